use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn_kernels::Tensor2D;

use super::ViTError;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub channels: usize,
    /// Embedding width `D`.
    pub dim: usize,
    /// Per-head width `D_h`.
    pub head_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_dim: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    /// ViT-Base over 192×240×9 frames with 16×16 patches (180 slots).
    pub fn base() -> Self {
        Self {
            patch_size: 16,
            channels: 9,
            dim: 768,
            head_dim: 64,
            heads: 12,
            layers: 12,
            mlp_dim: 3072,
            frame_height: 192,
            frame_width: 240,
            num_classes: 100,
        }
    }

    /// Desk-scale model over 64×64×5 frames with 8×8 patches (64 slots).
    pub fn toy() -> Self {
        Self {
            patch_size: 8,
            channels: 5,
            dim: 64,
            head_dim: 16,
            heads: 4,
            layers: 2,
            mlp_dim: 128,
            frame_height: 64,
            frame_width: 64,
            num_classes: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ViTError> {
        let fields = [
            self.patch_size,
            self.channels,
            self.dim,
            self.head_dim,
            self.heads,
            self.mlp_dim,
            self.frame_height,
            self.frame_width,
            self.num_classes,
        ];
        if fields.contains(&0) {
            return Err(ViTError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.heads * self.head_dim != self.dim {
            return Err(ViTError::InvalidConfig(format!(
                "heads·head_dim = {}·{} must equal dim {}",
                self.heads, self.head_dim, self.dim
            )));
        }
        if !self.frame_height.is_multiple_of(self.patch_size) || !self.frame_width.is_multiple_of(self.patch_size) {
            return Err(ViTError::InvalidConfig(format!(
                "frame {}x{} not divisible by patch size {}",
                self.frame_height, self.frame_width, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        self.frame_height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.frame_width / self.patch_size
    }

    /// Number of patch slots.
    pub fn n_max(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn param_count(&self) -> usize {
        ViTParams::layout(self).iter().map(|(_, (r, c))| r * c).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadParams {
    pub u_q: Tensor2D,
    pub u_k: Tensor2D,
    pub u_v: Tensor2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub ln1_gain: Tensor2D,
    pub ln1_bias: Tensor2D,
    pub heads: Vec<AttentionHeadParams>,
    pub u_msa: Tensor2D,
    pub ln2_gain: Tensor2D,
    pub ln2_bias: Tensor2D,
    pub w1: Tensor2D,
    pub b1: Tensor2D,
    pub w2: Tensor2D,
    pub b2: Tensor2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub ln_gain: Tensor2D,
    pub ln_bias: Tensor2D,
    pub weight: Tensor2D,
    pub bias: Tensor2D,
}

/// Every learnable tensor. Vectors are stored as single-row tensors. The same
/// type carries gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub patch_embed: Tensor2D,
    pub pos_embed: Tensor2D,
    pub cls_token: Tensor2D,
    pub layers: Vec<EncoderParams>,
    pub head: ClassifierParams,
}

impl ViTParams {
    /// Canonical tensor names and shapes: embedding, positions, class token,
    /// per-layer blocks, classifier head.
    pub fn layout(cfg: &ViTConfig) -> Vec<(String, (usize, usize))> {
        let (d, dh) = (cfg.dim, cfg.head_dim);
        let mut out = vec![
            ("patch_embed".to_string(), (cfg.patch_len(), d)),
            ("pos_embed".to_string(), (cfg.n_max() + 1, d)),
            ("cls_token".to_string(), (1, d)),
        ];
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln1.gain"), (1, d)));
            out.push((p("ln1.bias"), (1, d)));
            for h in 0..cfg.heads {
                for m in ["u_q", "u_k", "u_v"] {
                    out.push((p(&format!("heads.{h}.{m}")), (d, dh)));
                }
            }
            out.push((p("u_msa"), (cfg.heads * dh, d)));
            out.push((p("ln2.gain"), (1, d)));
            out.push((p("ln2.bias"), (1, d)));
            out.push((p("mlp.w1"), (d, cfg.mlp_dim)));
            out.push((p("mlp.b1"), (1, cfg.mlp_dim)));
            out.push((p("mlp.w2"), (cfg.mlp_dim, d)));
            out.push((p("mlp.b2"), (1, d)));
        }
        out.push(("head.ln.gain".to_string(), (1, d)));
        out.push(("head.ln.bias".to_string(), (1, d)));
        out.push(("head.weight".to_string(), (d, cfg.num_classes)));
        out.push(("head.bias".to_string(), (1, cfg.num_classes)));
        out
    }

    pub fn zeros(cfg: &ViTConfig) -> Self {
        let z = Tensor2D::zeros;
        let (d, dh) = (cfg.dim, cfg.head_dim);
        Self {
            patch_embed: z(cfg.patch_len(), d),
            pos_embed: z(cfg.n_max() + 1, d),
            cls_token: z(1, d),
            layers: (0..cfg.layers)
                .map(|_| EncoderParams {
                    ln1_gain: z(1, d),
                    ln1_bias: z(1, d),
                    heads: (0..cfg.heads)
                        .map(|_| AttentionHeadParams {
                            u_q: z(d, dh),
                            u_k: z(d, dh),
                            u_v: z(d, dh),
                        })
                        .collect(),
                    u_msa: z(cfg.heads * dh, d),
                    ln2_gain: z(1, d),
                    ln2_bias: z(1, d),
                    w1: z(d, cfg.mlp_dim),
                    b1: z(1, cfg.mlp_dim),
                    w2: z(cfg.mlp_dim, d),
                    b2: z(1, d),
                })
                .collect(),
            head: ClassifierParams {
                ln_gain: z(1, d),
                ln_bias: z(1, d),
                weight: z(d, cfg.num_classes),
                bias: z(1, cfg.num_classes),
            },
        }
    }

    /// Weights and embeddings from a normal with deviation 0.02 truncated at
    /// two deviations; biases zero; layer-norm gains one.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid deviation");
        let mut p = Self::zeros(cfg);
        let mut trunc = |t: &mut Tensor2D| {
            for v in t.data_mut() {
                *v = loop {
                    let s: f64 = normal.sample(&mut rng);
                    if s.abs() <= 0.04 {
                        break s;
                    }
                };
            }
        };
        trunc(&mut p.patch_embed);
        trunc(&mut p.pos_embed);
        trunc(&mut p.cls_token);
        for layer in &mut p.layers {
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
            for h in &mut layer.heads {
                trunc(&mut h.u_q);
                trunc(&mut h.u_k);
                trunc(&mut h.u_v);
            }
            trunc(&mut layer.u_msa);
            trunc(&mut layer.w1);
            trunc(&mut layer.w2);
        }
        p.head.ln_gain.fill(1.0);
        trunc(&mut p.head.weight);
        p
    }

    /// Tensors in canonical order, borrowed.
    pub fn tensors(&self) -> Vec<&Tensor2D> {
        let mut out = vec![&self.patch_embed, &self.pos_embed, &self.cls_token];
        for l in &self.layers {
            out.push(&l.ln1_gain);
            out.push(&l.ln1_bias);
            for h in &l.heads {
                out.extend([&h.u_q, &h.u_k, &h.u_v]);
            }
            out.extend([&l.u_msa, &l.ln2_gain, &l.ln2_bias, &l.w1, &l.b1, &l.w2, &l.b2]);
        }
        out.extend([
            &self.head.ln_gain,
            &self.head.ln_bias,
            &self.head.weight,
            &self.head.bias,
        ]);
        out
    }

    /// Tensors in canonical order, mutably borrowed.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2D> {
        let mut out = vec![&mut self.patch_embed, &mut self.pos_embed, &mut self.cls_token];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            for h in &mut l.heads {
                out.extend([&mut h.u_q, &mut h.u_k, &mut h.u_v]);
            }
            out.extend([
                &mut l.u_msa,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([
            &mut self.head.ln_gain,
            &mut self.head.ln_bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        out
    }

    /// Checks every tensor against [`ViTParams::layout`].
    pub fn check_shapes(&self, cfg: &ViTConfig) -> Result<(), ViTError> {
        let layout = Self::layout(cfg);
        let tensors = self.tensors();
        if layout.len() != tensors.len() {
            return Err(ViTError::InvalidConfig(format!(
                "parameter set has {} tensors, config implies {}",
                tensors.len(),
                layout.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(tensors) {
            if t.shape() != *shape {
                return Err(ViTError::ParamShape {
                    name: name.clone(),
                    expected: *shape,
                    found: t.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &ViTParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b).expect("identical layouts");
        }
    }
}
