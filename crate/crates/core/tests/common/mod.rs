//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use evpatch::nn_kernels::{
    bias_bwd, cross_entropy, gelu_bwd, gelu_tensor, layer_norm, layer_norm_bwd, matmul, matmul_bwd,
    scaled_dot_attention, softmax_attention_bwd, softmax_rows, softmax_rows_bwd, add_bias,
    LAYER_NORM_EPS,
};
use evpatch::vit::ForwardProfile;
use evpatch::{OpCounter, PatchGrid, PatchSet, Tensor2D, ViTConfig, VisionTransformer, VoxelGrid};
use rand::seq::index::sample;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &Tensor2D, f: impl Fn(&Tensor2D) -> f64) -> Tensor2D {
    let mut g = Tensor2D::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// Largest absolute difference divided by the largest magnitude in either
/// gradient (floored at 1e-8).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
    num / den
}

fn dot(a: &Tensor2D, w: &Tensor2D) -> f64 {
    a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
}

/// Gradient checks for every backward kernel under a random linear loss
/// `Σ w ⊙ out`. Returns `(name, relative error)` per checked input.
pub fn kernel_gradient_errors<R: Rng>(rng: &mut R) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut c = OpCounter::default();
    let (m, k, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));

    let a = random_tensor(rng, m, k);
    let b = random_tensor(rng, k, n);
    let w = random_tensor(rng, m, n);
    let (da, db) = matmul_bwd(&a, &b, &w).unwrap();
    let na = numeric_grad(&a, |x| dot(&matmul(x, &b, &mut OpCounter::default()).unwrap(), &w));
    let nb = numeric_grad(&b, |x| dot(&matmul(&a, x, &mut OpCounter::default()).unwrap(), &w));
    out.push(("matmul.a".into(), rel_err(da.data(), na.data())));
    out.push(("matmul.b".into(), rel_err(db.data(), nb.data())));

    let bias = random_tensor(rng, 1, n);
    let base = random_tensor(rng, m, n);
    let nbias = numeric_grad(&bias, |x| {
        let mut y = base.clone();
        add_bias(&mut y, x, &mut OpCounter::default()).unwrap();
        dot(&y, &w)
    });
    out.push(("bias".into(), rel_err(bias_bwd(&w).data(), nbias.data())));

    let x = random_tensor(rng, m, n.max(2));
    let d = x.cols();
    let gain = random_tensor(rng, 1, d);
    let beta = random_tensor(rng, 1, d);
    let wl = random_tensor(rng, m, d);
    let (_, cache) = layer_norm(&x, &gain, &beta, LAYER_NORM_EPS, &mut c).unwrap();
    let (dx, dg, dbeta) = layer_norm_bwd(&cache, &gain, &wl).unwrap();
    let ln = |x: &Tensor2D, g: &Tensor2D, b: &Tensor2D| {
        dot(&layer_norm(x, g, b, LAYER_NORM_EPS, &mut OpCounter::default()).unwrap().0, &wl)
    };
    out.push(("layer_norm.x".into(), rel_err(dx.data(), numeric_grad(&x, |v| ln(v, &gain, &beta)).data())));
    out.push(("layer_norm.gain".into(), rel_err(dg.data(), numeric_grad(&gain, |v| ln(&x, v, &beta)).data())));
    out.push(("layer_norm.bias".into(), rel_err(dbeta.data(), numeric_grad(&beta, |v| ln(&x, &gain, v)).data())));

    let pre = random_tensor(rng, m, n);
    let dg = gelu_bwd(&pre, &w).unwrap();
    let ng = numeric_grad(&pre, |v| dot(&gelu_tensor(v, &mut OpCounter::default()), &w));
    out.push(("gelu".into(), rel_err(dg.data(), ng.data())));

    let s = random_tensor(rng, m, n);
    let probs = softmax_rows(&s, &mut c);
    let ds = softmax_rows_bwd(&probs, &w).unwrap();
    let ns = numeric_grad(&s, |v| dot(&softmax_rows(v, &mut OpCounter::default()), &w));
    out.push(("softmax".into(), rel_err(ds.data(), ns.data())));

    let (t, dh, dv) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
    let q = random_tensor(rng, t, dh);
    let kk = random_tensor(rng, t, dh);
    let v = random_tensor(rng, t, dv);
    let wa = random_tensor(rng, t, dv);
    let (_, cache) = scaled_dot_attention(&q, &kk, &v, &mut c).unwrap();
    let (dq, dk, dvv) = softmax_attention_bwd(&cache, &wa).unwrap();
    let att = |q: &Tensor2D, k: &Tensor2D, v: &Tensor2D| {
        dot(&scaled_dot_attention(q, k, v, &mut OpCounter::default()).unwrap().0, &wa)
    };
    out.push(("attention.q".into(), rel_err(dq.data(), numeric_grad(&q, |x| att(x, &kk, &v)).data())));
    out.push(("attention.k".into(), rel_err(dk.data(), numeric_grad(&kk, |x| att(&q, x, &v)).data())));
    out.push(("attention.v".into(), rel_err(dvv.data(), numeric_grad(&v, |x| att(&q, &kk, x)).data())));

    let logits = random_tensor(rng, 1, n.max(2));
    let target = rng.gen_range(0..logits.cols());
    let (_, dl) = cross_entropy(logits.data(), target).unwrap();
    let nl = numeric_grad(&logits, |x| cross_entropy(x.data(), target).unwrap().0);
    out.push(("cross_entropy".into(), rel_err(&dl, nl.data())));
    out
}

/// `n` random patches at distinct sorted slots of `cfg`'s grid.
pub fn random_patch_set<R: Rng>(rng: &mut R, cfg: &ViTConfig, n: usize) -> PatchSet {
    let grid = PatchGrid::for_frame(cfg.frame_height, cfg.frame_width, cfg.channels, cfg.patch_size).unwrap();
    let mut positions: Vec<usize> = sample(rng, grid.slots(), n).into_vec();
    positions.sort_unstable();
    let vectors = random_tensor(rng, n, grid.patch_len());
    PatchSet::new(vectors, positions, grid).unwrap()
}

/// A frame in which each patch is either all zero or densely random.
pub fn random_sparse_frame<R: Rng>(rng: &mut R, cfg: &ViTConfig, keep: f64) -> VoxelGrid {
    let (h, w, c, p) = (cfg.frame_height, cfg.frame_width, cfg.channels, cfg.patch_size);
    let mut g = VoxelGrid::zeros(h, w, c);
    for pr in 0..h / p {
        for pc in 0..w / p {
            if !rng.gen_bool(keep) {
                continue;
            }
            for y in pr * p..(pr + 1) * p {
                for x in pc * p..(pc + 1) * p {
                    for ch in 0..c {
                        if rng.gen_bool(0.7) {
                            g.set(y, x, ch, rng.gen_range(-2.0..2.0));
                        }
                    }
                }
            }
        }
    }
    g
}

/// Full-model gradient check of the cross-entropy loss. With `per_tensor`
/// set, only that many random coordinates of each parameter tensor are
/// perturbed. Returns `(tensor name, relative error)`.
pub fn vit_gradient_errors<R: Rng>(
    rng: &mut R,
    cfg: ViTConfig,
    n: usize,
    per_tensor: Option<usize>,
) -> Vec<(String, f64)> {
    let mut model = VisionTransformer::init(cfg, rng.gen()).unwrap();
    // Nonzero norms and biases so every path carries gradient.
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let patches = random_patch_set(rng, &cfg, n);
    let target = rng.gen_range(0..cfg.num_classes);
    let (_, _, grads) = model.loss_and_grad(&patches, target).unwrap();
    let names = evpatch::ViTParams::layout(&cfg);
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data().to_vec()).collect();
    let loss = |m: &VisionTransformer| {
        let logits = m.forward(&patches, &mut ForwardProfile::default()).unwrap();
        cross_entropy(&logits, target).unwrap().0
    };
    let mut out = Vec::new();
    for (ti, (name, _)) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < len => sample(rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let mut a = Vec::with_capacity(coords.len());
        let mut num = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = model.params().tensors()[ti].data()[i];
            model.params_mut().tensors_mut()[ti].data_mut()[i] = orig + FD_STEP;
            let up = loss(&model);
            model.params_mut().tensors_mut()[ti].data_mut()[i] = orig - FD_STEP;
            let down = loss(&model);
            model.params_mut().tensors_mut()[ti].data_mut()[i] = orig;
            a.push(analytic[ti][i]);
            num.push((up - down) / (2.0 * FD_STEP));
        }
        out.push((name.clone(), rel_err(&a, &num)));
    }
    out
}
