//! Analytical FLOPs/MACs model of the encoder as a function of the number of
//! input patches, and its reconciliation against instrumented counts.
//!
//! Per layer and per input length `n`:
//!
//! * MSA: `k(3 + 4·D_h)·n² + 8·k·D·D_h·n`. The quadratic term counts `q·kᵀ`
//!   (`2·D_h·n²`), the `1/√D_h` scaling (`n²`), softmax (`2·n²`) and the
//!   product with `v` (`2·D_h·n²`); the linear term counts the `q, k, v`
//!   projections and `U_MSA`.
//! * MLP: `4·D·D_mlp·n`.
//!
//! One multiply-accumulate is two FLOPs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vit::{ForwardProfile, ViTConfig};

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("reconciliation needs a full-mode report (encoder mode omits the class token)")]
    ModeMismatch,
    #[error("report is for n = {report}, profile for n = {profile}")]
    LengthMismatch { report: u64, profile: u64 },
    #[error("report has {report} layers, profile has {profile}")]
    LayerMismatch { report: usize, profile: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountingMode {
    /// Encoder MSA + MLP at length `n`; class token, embedding and head omitted.
    Encoder,
    /// Encoder at `n + 1` tokens plus patch embedding and classifier head.
    Full,
}

fn msa_coefficients(cfg: &ViTConfig) -> (u64, u64) {
    let (k, dh, d) = (cfg.heads as u64, cfg.head_dim as u64, cfg.dim as u64);
    (k * (3 + 4 * dh), 8 * k * d * dh)
}

fn mlp_coefficient(cfg: &ViTConfig) -> u64 {
    4 * cfg.dim as u64 * cfg.mlp_dim as u64
}

/// FLOPs of one MSA block at input length `n`.
pub fn msa_flops(n: u64, cfg: &ViTConfig) -> u64 {
    let (quad, lin) = msa_coefficients(cfg);
    quad * n * n + lin * n
}

/// FLOPs of one patch-wise MLP block at input length `n`.
pub fn mlp_flops(n: u64, cfg: &ViTConfig) -> u64 {
    mlp_coefficient(cfg) * n
}

/// Smallest `n ≥ 1` at which MSA FLOPs reach MLP FLOPs.
///
/// For `n > 0` the condition reduces to `k(3+4D_h)·n ≥ 4·D·D_mlp − 8·k·D·D_h`.
pub fn crossover_n(cfg: &ViTConfig) -> u64 {
    let (quad, lin) = msa_coefficients(cfg);
    let mlp = mlp_coefficient(cfg);
    if mlp <= lin {
        return 1;
    }
    assert!(quad > 0, "quadratic coefficient must be positive");
    (mlp - lin).div_ceil(quad).max(1)
}

/// FLOPs of the patch embedding for `n` patches.
pub fn embedding_flops(n: u64, cfg: &ViTConfig) -> u64 {
    2 * n * cfg.patch_len() as u64 * cfg.dim as u64
}

/// FLOPs of the classifier projection.
pub fn head_flops(cfg: &ViTConfig) -> u64 {
    2 * cfg.dim as u64 * cfg.num_classes as u64
}

pub fn model_flops(n: u64, cfg: &ViTConfig, mode: CountingMode) -> u64 {
    cost_report(n, cfg, mode).flops_total
}

/// Whole-model MACs (`FLOPs / 2`).
pub fn model_macs(n: u64, cfg: &ViTConfig, mode: CountingMode) -> f64 {
    model_flops(n, cfg, mode) as f64 / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub msa: u64,
    pub mlp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Number of input patches (excluding the class token).
    pub n: u64,
    pub mode: CountingMode,
    pub layers: usize,
    pub flops_msa_per_layer: u64,
    pub flops_mlp_per_layer: u64,
    pub flops_embedding: u64,
    pub flops_head: u64,
    pub per_layer: Vec<LayerCost>,
    pub flops_total: u64,
    pub macs_total: f64,
    pub conventions: String,
}

pub fn cost_report(n: u64, cfg: &ViTConfig, mode: CountingMode) -> CostReport {
    let tokens = match mode {
        CountingMode::Encoder => n,
        CountingMode::Full => n + 1,
    };
    let msa = msa_flops(tokens, cfg);
    let mlp = mlp_flops(tokens, cfg);
    let (emb, head) = match mode {
        CountingMode::Encoder => (0, 0),
        CountingMode::Full => (embedding_flops(n, cfg), head_flops(cfg)),
    };
    let per_layer: Vec<LayerCost> = (0..cfg.layers)
        .map(|layer| LayerCost { layer, msa, mlp })
        .collect();
    let flops_total = cfg.layers as u64 * (msa + mlp) + emb + head;
    CostReport {
        n,
        mode,
        layers: cfg.layers,
        flops_msa_per_layer: msa,
        flops_mlp_per_layer: mlp,
        flops_embedding: emb,
        flops_head: head,
        per_layer,
        flops_total,
        macs_total: flops_total as f64 / 2.0,
        conventions: "2 FLOPs per MAC; softmax 2 ops per score and 1/sqrt(D_h) scaling 1 op per score; \
                      layer norms, residual adds and GELU are not modeled"
            .to_string(),
    }
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub name: String,
    pub analytic: u64,
    pub instrumented: u64,
    /// `|analytic − instrumented| / analytic`; absent when the analytic
    /// count is zero.
    pub rel_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconciliation {
    pub components: Vec<ComponentCheck>,
    /// Work the analytic model leaves out (layer norms, residuals, GELU,
    /// comparisons), as instrumented.
    pub unmodeled_ops: u64,
}

impl Reconciliation {
    pub fn max_rel_error(&self) -> f64 {
        self.components
            .iter()
            .filter_map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn component(&self, name: &str) -> Option<&ComponentCheck> {
        self.components.iter().find(|c| c.name == name)
    }
}

fn check(name: String, analytic: u64, instrumented: u64) -> ComponentCheck {
    let rel_error = (analytic > 0).then(|| analytic.abs_diff(instrumented) as f64 / analytic as f64);
    ComponentCheck {
        name,
        analytic,
        instrumented,
        rel_error,
    }
}

/// Compares a full-mode report against the counters of a forward pass over
/// the same number of patches. Instrumented FLOPs are `muls + adds + exps +
/// divs`; GELU evaluations, square roots and comparisons are reported as
/// unmodeled.
pub fn reconcile(report: &CostReport, profile: &ForwardProfile) -> Result<Reconciliation, CostError> {
    if report.mode != CountingMode::Full {
        return Err(CostError::ModeMismatch);
    }
    if report.n != profile.n as u64 {
        return Err(CostError::LengthMismatch {
            report: report.n,
            profile: profile.n as u64,
        });
    }
    if report.per_layer.len() != profile.layers.len() {
        return Err(CostError::LayerMismatch {
            report: report.per_layer.len(),
            profile: profile.layers.len(),
        });
    }
    let mut components = vec![check("embedding".into(), report.flops_embedding, profile.embed.flops())];
    let mut unmodeled = profile.embed.other + profile.head_norm.total() + profile.head.other;
    for (cost, lp) in report.per_layer.iter().zip(&profile.layers) {
        components.push(check(format!("layers.{}.msa", cost.layer), cost.msa, lp.msa.flops()));
        components.push(check(format!("layers.{}.mlp", cost.layer), cost.mlp, lp.mlp.flops()));
        unmodeled += lp.msa.other + lp.mlp.other;
        unmodeled += lp.ln1.total() + lp.ln2.total() + lp.residual1.total() + lp.residual2.total();
    }
    components.push(check("head".into(), report.flops_head, profile.head.flops()));
    Ok(Reconciliation {
        components,
        unmodeled_ops: unmodeled,
    })
}
