//! Vision transformer over a variable number of patches.
//!
//! Selected patches are linearly embedded and receive the positional
//! embedding row of their original slot, so any subset of slots (including
//! none) forms a valid input. The encoder is pre-norm: multi-head
//! self-attention and a GELU MLP, each wrapped in a residual connection.
//! The class token's final state goes through a layer norm and an affine map.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, load_checkpoint_file, save_checkpoint, save_checkpoint_file, CHECKPOINT_MAGIC};
pub use params::{AttentionHeadParams, ClassifierParams, EncoderParams, ViTConfig, ViTParams};

use std::io;

use thiserror::Error;

use crate::nn_kernels::{
    add, add_bias, bias_bwd, cross_entropy, gelu_bwd, gelu_tensor, layer_norm, layer_norm_bwd,
    matmul, matmul_bwd, scaled_dot_attention, softmax_attention_bwd, AttentionCache, KernelError,
    LayerNormCache, OpCounter, Tensor2D, LAYER_NORM_EPS,
};
use crate::patches::PatchSet;
use crate::voxel::VoxelGrid;

#[derive(Debug, Error)]
pub enum ViTError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("patch position {position} out of range for {n_max} slots")]
    PositionOutOfRange { position: usize, n_max: usize },
    #[error("patch vectors have length {got}, model expects {expected}")]
    PatchLength { got: usize, expected: usize },
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("forward cache does not match this model")]
    MissingCache,
    #[error("bad checkpoint magic, expected VITC")]
    BadMagic,
    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("checkpoint tensor {name} has shape {found:?}, config implies {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ViTError>;

/// Operation counts of one encoder layer, split by component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerProfile {
    pub ln1: OpCounter,
    pub msa: OpCounter,
    pub residual1: OpCounter,
    pub ln2: OpCounter,
    pub mlp: OpCounter,
    pub residual2: OpCounter,
}

impl LayerProfile {
    pub fn total(&self) -> OpCounter {
        let mut t = self.ln1;
        for c in [self.msa, self.residual1, self.ln2, self.mlp, self.residual2] {
            t += c;
        }
        t
    }
}

/// Operation counts of a whole forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardProfile {
    /// Patches in the input (the class token is not counted).
    pub n: usize,
    pub embed: OpCounter,
    pub layers: Vec<LayerProfile>,
    pub head_norm: OpCounter,
    pub head: OpCounter,
}

impl ForwardProfile {
    pub fn total(&self) -> OpCounter {
        let mut t = self.embed;
        for l in &self.layers {
            t += l.total();
        }
        t += self.head_norm;
        t += self.head;
        t
    }
}

struct HeadCache {
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    attn: AttentionCache,
}

struct LayerCache {
    input: Tensor2D,
    ln1: LayerNormCache,
    normed1: Tensor2D,
    heads: Vec<HeadCache>,
    concat: Tensor2D,
    ln2: LayerNormCache,
    normed2: Tensor2D,
    pre_gelu: Tensor2D,
    post_gelu: Tensor2D,
}

/// Activations retained by [`VisionTransformer::forward_cached`] for the
/// backward pass.
pub struct ForwardCache {
    patches: Tensor2D,
    positions: Vec<usize>,
    layers: Vec<LayerCache>,
    head_ln: LayerNormCache,
    head_in: Tensor2D,
}

/// Model = configuration + parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionTransformer {
    cfg: ViTConfig,
    params: ViTParams,
}

impl VisionTransformer {
    pub fn new(cfg: ViTConfig, params: ViTParams) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params: ViTParams::init(&cfg, seed),
            cfg,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ViTParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ViTParams {
        &mut self.params
    }

    pub fn into_parts(self) -> (ViTConfig, ViTParams) {
        (self.cfg, self.params)
    }

    /// Token matrix `[(n + 1) × D]`: the class token followed by each patch
    /// embedding, plus the positional row of its original slot (offset by one
    /// for the class slot).
    pub fn embed(&self, patches: &PatchSet, counter: &mut OpCounter) -> Result<Tensor2D> {
        self.check_patches(patches)?;
        embed_rows(&self.params, patches.vectors(), patches.positions(), counter)
    }

    fn check_patches(&self, patches: &PatchSet) -> Result<()> {
        let expected = self.cfg.patch_len();
        if patches.vectors().cols() != expected {
            return Err(ViTError::PatchLength {
                got: patches.vectors().cols(),
                expected,
            });
        }
        let n_max = self.cfg.n_max();
        if let Some(&position) = patches.positions().iter().find(|&&p| p >= n_max) {
            return Err(ViTError::PositionOutOfRange { position, n_max });
        }
        Ok(())
    }

    /// Logits for one patch set; `profile` receives the operation counts.
    pub fn forward(&self, patches: &PatchSet, profile: &mut ForwardProfile) -> Result<Vec<f64>> {
        self.check_patches(patches)?;
        Ok(self.run(patches.vectors(), patches.positions(), profile)?.0)
    }

    /// Logits of the dense model: every slot of `grid`, in slot order, with no
    /// selection step.
    pub fn forward_dense(&self, grid: &VoxelGrid, profile: &mut ForwardProfile) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        if (grid.height(), grid.width(), grid.channels()) != (cfg.frame_height, cfg.frame_width, cfg.channels) {
            return Err(ViTError::InvalidConfig(format!(
                "frame {}x{}x{} does not match the model",
                grid.height(),
                grid.width(),
                grid.channels()
            )));
        }
        let p = cfg.patch_size;
        let mut rows = Tensor2D::zeros(cfg.n_max(), cfg.patch_len());
        for pr in 0..cfg.grid_rows() {
            for pc in 0..cfg.grid_cols() {
                let row = rows.row_mut(pr * cfg.grid_cols() + pc);
                let mut i = 0;
                for y in pr * p..(pr + 1) * p {
                    for x in pc * p..(pc + 1) * p {
                        for c in 0..cfg.channels {
                            row[i] = grid.get(y, x, c);
                            i += 1;
                        }
                    }
                }
            }
        }
        let positions: Vec<usize> = (0..cfg.n_max()).collect();
        Ok(self.run(&rows, &positions, profile)?.0)
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn forward_cached(&self, patches: &PatchSet) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_patches(patches)?;
        let mut profile = ForwardProfile::default();
        self.run(patches.vectors(), patches.positions(), &mut profile)
    }

    fn run(
        &self,
        vectors: &Tensor2D,
        positions: &[usize],
        profile: &mut ForwardProfile,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        profile.n = positions.len();
        profile.embed = OpCounter::default();
        profile.layers = vec![LayerProfile::default(); self.cfg.layers];
        profile.head_norm = OpCounter::default();
        profile.head = OpCounter::default();

        let mut z = embed_rows(&self.params, vectors, positions, &mut profile.embed)?;
        let mut caches = Vec::with_capacity(self.cfg.layers);
        for (layer, prof) in self.params.layers.iter().zip(profile.layers.iter_mut()) {
            let (next, cache) = encoder_layer_cached(&z, layer, prof)?;
            caches.push(cache);
            z = next;
        }
        let cls = Tensor2D::row_vector(z.row(0).to_vec());
        let head = &self.params.head;
        let (normed, head_ln) = layer_norm(&cls, &head.ln_gain, &head.ln_bias, LAYER_NORM_EPS, &mut profile.head_norm)?;
        let mut logits = matmul(&normed, &head.weight, &mut profile.head)?;
        add_bias(&mut logits, &head.bias, &mut profile.head)?;
        Ok((
            logits.into_data(),
            ForwardCache {
                patches: vectors.clone(),
                positions: positions.to_vec(),
                layers: caches,
                head_ln,
                head_in: normed,
            },
        ))
    }

    /// Gradients of a scalar loss with respect to every parameter, given the
    /// loss gradient at the logits.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &[f64]) -> Result<ViTParams> {
        let cfg = &self.cfg;
        if cache.layers.len() != cfg.layers
            || d_logits.len() != cfg.num_classes
            || cache.patches.cols() != cfg.patch_len()
            || cache.positions.iter().any(|&p| p >= cfg.n_max())
        {
            return Err(ViTError::MissingCache);
        }
        let mut grads = ViTParams::zeros(cfg);
        let head = &self.params.head;

        let d_logits = Tensor2D::row_vector(d_logits.to_vec());
        grads.head.bias = d_logits.clone();
        let (d_normed, d_w) = matmul_bwd(&cache.head_in, &head.weight, &d_logits)?;
        grads.head.weight = d_w;
        let (d_cls, d_gain, d_bias) = layer_norm_bwd(&cache.head_ln, &head.ln_gain, &d_normed)?;
        grads.head.ln_gain = d_gain;
        grads.head.ln_bias = d_bias;

        let tokens = cache.positions.len() + 1;
        let mut dz = Tensor2D::zeros(tokens, cfg.dim);
        dz.row_mut(0).copy_from_slice(d_cls.row(0));

        for ((layer, lcache), lgrad) in self
            .params
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            dz = encoder_layer_bwd(layer, lcache, &dz, lgrad)?;
        }

        // Embedding: row 0 is the class token, row j the (j−1)-th patch.
        grads.cls_token.row_mut(0).copy_from_slice(dz.row(0));
        for (slot, src) in std::iter::once(0)
            .chain(cache.positions.iter().map(|p| p + 1))
            .zip(0..tokens)
        {
            for (g, v) in grads.pos_embed.row_mut(slot).iter_mut().zip(dz.row(src)) {
                *g += v;
            }
        }
        if !cache.positions.is_empty() {
            let d_patch = Tensor2D::from_vec(tokens - 1, cfg.dim, dz.data()[cfg.dim..].to_vec())?;
            let (_, d_e) = matmul_bwd(&cache.patches, &self.params.patch_embed, &d_patch)?;
            grads.patch_embed = d_e;
        }
        Ok(grads)
    }

    /// Cross-entropy loss, logits and parameter gradients for one labeled
    /// patch set.
    pub fn loss_and_grad(&self, patches: &PatchSet, target: usize) -> Result<(f64, Vec<f64>, ViTParams)> {
        let (logits, cache) = self.forward_cached(patches)?;
        let (loss, d_logits) = cross_entropy(&logits, target)?;
        let grads = self.backward(&cache, &d_logits)?;
        Ok((loss, logits, grads))
    }
}

fn embed_rows(
    params: &ViTParams,
    vectors: &Tensor2D,
    positions: &[usize],
    counter: &mut OpCounter,
) -> Result<Tensor2D> {
    let d = params.cls_token.cols();
    let projected = matmul(vectors, &params.patch_embed, counter)?;
    let mut z = Tensor2D::zeros(positions.len() + 1, d);
    for (o, (c, p)) in z
        .row_mut(0)
        .iter_mut()
        .zip(params.cls_token.row(0).iter().zip(params.pos_embed.row(0)))
    {
        *o = c + p;
    }
    for (j, &slot) in positions.iter().enumerate() {
        let pos = params.pos_embed.row(slot + 1);
        for (o, (e, p)) in z.row_mut(j + 1).iter_mut().zip(projected.row(j).iter().zip(pos)) {
            *o = e + p;
        }
    }
    counter.adds += (z.rows() * d) as u64;
    Ok(z)
}

fn self_attention_cached(
    z: &Tensor2D,
    head: &AttentionHeadParams,
    counter: &mut OpCounter,
) -> Result<(Tensor2D, HeadCache)> {
    let q = matmul(z, &head.u_q, counter)?;
    let k = matmul(z, &head.u_k, counter)?;
    let v = matmul(z, &head.u_v, counter)?;
    let (out, attn) = scaled_dot_attention(&q, &k, &v, counter)?;
    Ok((out, HeadCache { q, k, v, attn }))
}

/// One attention head: `softmax(q·kᵀ/√D_h)·v` with `q, k, v = z·U_q, z·U_k, z·U_v`.
pub fn self_attention(z: &Tensor2D, head: &AttentionHeadParams, counter: &mut OpCounter) -> Result<Tensor2D> {
    Ok(self_attention_cached(z, head, counter)?.0)
}

fn msa_cached(
    z: &Tensor2D,
    layer: &EncoderParams,
    counter: &mut OpCounter,
) -> Result<(Tensor2D, Tensor2D, Vec<HeadCache>)> {
    let dh = layer.heads.first().map_or(0, |h| h.u_q.cols());
    let mut concat = Tensor2D::zeros(z.rows(), dh * layer.heads.len());
    let mut caches = Vec::with_capacity(layer.heads.len());
    for (h, head) in layer.heads.iter().enumerate() {
        let (out, cache) = self_attention_cached(z, head, counter)?;
        concat.set_columns(h * dh, &out);
        caches.push(cache);
    }
    let out = matmul(&concat, &layer.u_msa, counter)?;
    Ok((out, concat, caches))
}

/// Multi-head self-attention: head outputs concatenated, then projected by `U_MSA`.
pub fn msa(z: &Tensor2D, layer: &EncoderParams, counter: &mut OpCounter) -> Result<Tensor2D> {
    Ok(msa_cached(z, layer, counter)?.0)
}

fn encoder_layer_cached(
    z: &Tensor2D,
    layer: &EncoderParams,
    prof: &mut LayerProfile,
) -> Result<(Tensor2D, LayerCache)> {
    let (normed1, ln1) = layer_norm(z, &layer.ln1_gain, &layer.ln1_bias, LAYER_NORM_EPS, &mut prof.ln1)?;
    let (attn, concat, heads) = msa_cached(&normed1, layer, &mut prof.msa)?;
    let mid = add(&attn, z, &mut prof.residual1)?;
    let (normed2, ln2) = layer_norm(&mid, &layer.ln2_gain, &layer.ln2_bias, LAYER_NORM_EPS, &mut prof.ln2)?;
    let mut pre_gelu = matmul(&normed2, &layer.w1, &mut prof.mlp)?;
    add_bias(&mut pre_gelu, &layer.b1, &mut prof.mlp)?;
    let post_gelu = gelu_tensor(&pre_gelu, &mut prof.mlp);
    let mut mlp_out = matmul(&post_gelu, &layer.w2, &mut prof.mlp)?;
    add_bias(&mut mlp_out, &layer.b2, &mut prof.mlp)?;
    let out = add(&mlp_out, &mid, &mut prof.residual2)?;
    Ok((
        out,
        LayerCache {
            input: z.clone(),
            ln1,
            normed1,
            heads,
            concat,
            ln2,
            normed2,
            pre_gelu,
            post_gelu,
        },
    ))
}

/// `z' = MSA(LN₁(z)) + z`, then `MLP(LN₂(z')) + z'`.
pub fn encoder_layer(z: &Tensor2D, layer: &EncoderParams, prof: &mut LayerProfile) -> Result<Tensor2D> {
    Ok(encoder_layer_cached(z, layer, prof)?.0)
}

fn encoder_layer_bwd(
    layer: &EncoderParams,
    cache: &LayerCache,
    d_out: &Tensor2D,
    grads: &mut EncoderParams,
) -> Result<Tensor2D> {
    // MLP branch
    let (d_post, d_w2) = matmul_bwd(&cache.post_gelu, &layer.w2, d_out)?;
    grads.w2 = d_w2;
    grads.b2 = bias_bwd(d_out);
    let d_pre = gelu_bwd(&cache.pre_gelu, &d_post)?;
    let (d_normed2, d_w1) = matmul_bwd(&cache.normed2, &layer.w1, &d_pre)?;
    grads.w1 = d_w1;
    grads.b1 = bias_bwd(&d_pre);
    let (d_mid_ln, d_g2, d_b2) = layer_norm_bwd(&cache.ln2, &layer.ln2_gain, &d_normed2)?;
    grads.ln2_gain = d_g2;
    grads.ln2_bias = d_b2;
    let mut d_mid = d_out.clone();
    d_mid.add_assign(&d_mid_ln)?;

    // Attention branch
    let (d_concat, d_umsa) = matmul_bwd(&cache.concat, &layer.u_msa, &d_mid)?;
    grads.u_msa = d_umsa;
    let dh = layer.heads.first().map_or(0, |h| h.u_q.cols());
    let mut d_normed1 = Tensor2D::zeros(cache.normed1.rows(), cache.normed1.cols());
    for (h, ((head, hcache), hgrad)) in layer
        .heads
        .iter()
        .zip(&cache.heads)
        .zip(grads.heads.iter_mut())
        .enumerate()
    {
        let d_head = d_concat.columns(h * dh, dh);
        let (dq, dk, dv) = softmax_attention_bwd(&hcache.attn, &d_head)?;
        for (proj, d_proj, u, du) in [
            (&hcache.q, &dq, &head.u_q, &mut hgrad.u_q),
            (&hcache.k, &dk, &head.u_k, &mut hgrad.u_k),
            (&hcache.v, &dv, &head.u_v, &mut hgrad.u_v),
        ] {
            debug_assert_eq!(proj.shape(), d_proj.shape());
            let (d_in, d_u) = matmul_bwd(&cache.normed1, u, d_proj)?;
            *du = d_u;
            d_normed1.add_assign(&d_in)?;
        }
    }
    let (d_in_ln, d_g1, d_b1) = layer_norm_bwd(&cache.ln1, &layer.ln1_gain, &d_normed1)?;
    grads.ln1_gain = d_g1;
    grads.ln1_bias = d_b1;
    debug_assert_eq!(cache.input.shape(), d_in_ln.shape());
    let mut d_in = d_mid;
    d_in.add_assign(&d_in_ln)?;
    Ok(d_in)
}

/// Argmax with ties resolved to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patches::{select_active, PatchGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            patch_size: 2,
            channels: 2,
            dim: 8,
            head_dim: 4,
            heads: 2,
            layers: 1,
            mlp_dim: 6,
            frame_height: 4,
            frame_width: 6,
            num_classes: 3,
        }
    }

    fn random_grid(cfg: &ViTConfig, density: f64, rng: &mut ChaCha8Rng) -> VoxelGrid {
        let mut g = VoxelGrid::zeros(cfg.frame_height, cfg.frame_width, cfg.channels);
        for y in 0..cfg.frame_height {
            for x in 0..cfg.frame_width {
                for c in 0..cfg.channels {
                    if rng.gen_bool(density) {
                        g.set(y, x, c, rng.gen_range(-2.0..2.0));
                    }
                }
            }
        }
        g
    }

    #[test]
    fn empty_patch_set_embeds_to_class_token() {
        let cfg = tiny_cfg();
        let m = VisionTransformer::init(cfg, 1).unwrap();
        let g = VoxelGrid::zeros(4, 6, 2);
        let ps = select_active(&g, 2, 0.5).unwrap();
        assert!(ps.is_empty());
        let z = m.embed(&ps, &mut OpCounter::default()).unwrap();
        assert_eq!(z.shape(), (1, 8));
        let logits = m.forward(&ps, &mut ForwardProfile::default()).unwrap();
        assert_eq!(logits.len(), 3);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn position_out_of_range_is_rejected() {
        let cfg = tiny_cfg();
        let m = VisionTransformer::init(cfg, 1).unwrap();
        let wrong = PatchGrid {
            patch_size: 2,
            rows: 4,
            cols: 4,
            channels: 2,
        };
        let ps = PatchSet::new(Tensor2D::zeros(1, 8), vec![10], wrong).unwrap();
        assert!(matches!(
            m.forward(&ps, &mut ForwardProfile::default()),
            Err(ViTError::PositionOutOfRange { position: 10, n_max: 6 })
        ));
    }

    #[test]
    fn zero_embeddings_leave_only_head_dependence() {
        let cfg = tiny_cfg();
        let mut m = VisionTransformer::init(cfg, 3).unwrap();
        m.params.patch_embed.fill(0.0);
        m.params.pos_embed.fill(0.0);
        m.params.cls_token.fill(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = select_active(&random_grid(&cfg, 0.9, &mut rng), 2, 0.0).unwrap();
        let b = select_active(&random_grid(&cfg, 0.2, &mut rng), 2, 0.3).unwrap();
        let la = m.forward(&a, &mut ForwardProfile::default()).unwrap();
        let lb = m.forward(&b, &mut ForwardProfile::default()).unwrap();
        // All tokens are identical, so attention averages identical rows.
        for (x, y) in la.iter().zip(&lb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor2D::from_fn(1, 8, |_, _| rng.gen_range(-1.0..1.0));
        let head = AttentionHeadParams {
            u_q: Tensor2D::from_fn(8, 4, |_, _| rng.gen_range(-1.0..1.0)),
            u_k: Tensor2D::from_fn(8, 4, |_, _| rng.gen_range(-1.0..1.0)),
            u_v: Tensor2D::from_fn(8, 4, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let out = self_attention(&z, &head, &mut OpCounter::default()).unwrap();
        let v = matmul(&z, &head.u_v, &mut OpCounter::default()).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor2D::from_fn(5, 8, |_, _| rng.gen_range(-1.0..1.0));
        let head = AttentionHeadParams {
            u_q: Tensor2D::zeros(8, 4),
            u_k: Tensor2D::from_fn(8, 4, |_, _| rng.gen_range(-1.0..1.0)),
            u_v: Tensor2D::from_fn(8, 4, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let out = self_attention(&z, &head, &mut OpCounter::default()).unwrap();
        let v = matmul(&z, &head.u_v, &mut OpCounter::default()).unwrap();
        for c in 0..4 {
            let mean = (0..5).map(|r| v.get(r, c)).sum::<f64>() / 5.0;
            for r in 0..5 {
                assert!((out.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_make_layer_identity() {
        let cfg = tiny_cfg();
        let p = ViTParams::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 3, 7] {
            let z = Tensor2D::from_fn(n, 8, |_, _| rng.gen_range(-1.0..1.0));
            let out = encoder_layer(&z, &p.layers[0], &mut LayerProfile::default()).unwrap();
            assert_eq!(out, z);
        }
    }

    #[test]
    fn msa_single_head_identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = AttentionHeadParams {
            u_q: Tensor2D::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0)),
            u_k: Tensor2D::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0)),
            u_v: Tensor2D::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let mut layer = ViTParams::zeros(&ViTConfig {
            dim: 4,
            head_dim: 4,
            heads: 1,
            ..tiny_cfg()
        })
        .layers
        .remove(0);
        layer.heads = vec![head.clone()];
        layer.u_msa = Tensor2D::identity(4);
        let z = Tensor2D::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let a = msa(&z, &layer, &mut OpCounter::default()).unwrap();
        let b = self_attention(&z, &head, &mut OpCounter::default()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
        for h in &mut layer.heads {
            h.u_v.fill(0.0);
        }
        let zero = msa(&z, &layer, &mut OpCounter::default()).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let cfg = tiny_cfg();
        let m = VisionTransformer::init(cfg, 1).unwrap();
        let other = VisionTransformer::init(ViTConfig { layers: 2, ..cfg }, 1).unwrap();
        let ps = select_active(&VoxelGrid::zeros(4, 6, 2), 2, 0.0).unwrap();
        let (_, cache) = other.forward_cached(&ps).unwrap();
        assert!(matches!(m.backward(&cache, &[0.0; 3]), Err(ViTError::MissingCache)));
    }

    #[test]
    fn predict_picks_first_max() {
        assert_eq!(predict(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(predict(&[2.0]), 0);
    }
}
