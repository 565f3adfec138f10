//! Batch-size-one training with AdamW and cross-entropy, under a fixed or a
//! per-iteration random patch-selection threshold.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cost_model::{model_macs, CountingMode};
use crate::events_io::EventRecording;
use crate::nn_kernels::cross_entropy;
use crate::patches::{sample_threshold_mixed, select_active, PatchError, MIXED_THRESHOLD_HI, MIXED_THRESHOLD_LO};
use crate::vit::{predict, ForwardProfile, ViTError, ViTParams, VisionTransformer};
use crate::voxel::{augment_with, normalize_nonzero, Preprocess, VoxelError, VoxelGrid};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("recording {index} has label {label:?}, model has {classes} classes")]
    BadLabel {
        index: usize,
        label: Option<u32>,
        classes: usize,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("optimizer state does not match the parameters")]
    ShapeMismatch,
    #[error(transparent)]
    Vit(#[from] ViTError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    Fixed(f64),
    /// A fresh uniform draw from `[lo, hi]` for every iteration.
    Mixed { lo: f64, hi: f64 },
}

impl ThresholdMode {
    pub fn mixed() -> Self {
        ThresholdMode::Mixed {
            lo: MIXED_THRESHOLD_LO,
            hi: MIXED_THRESHOLD_HI,
        }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            ThresholdMode::Fixed(t) => t,
            ThresholdMode::Mixed { lo, hi } if lo == MIXED_THRESHOLD_LO && hi == MIXED_THRESHOLD_HI => {
                sample_threshold_mixed(rng)
            }
            ThresholdMode::Mixed { lo, hi } => rng.gen_range(lo..=hi),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ThresholdMode::Fixed(t) => (0.0..=1.0).contains(&t),
            ThresholdMode::Mixed { lo, hi } => 0.0 <= lo && lo <= hi && hi <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("bad threshold mode {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub threshold_mode: ThresholdMode,
    pub seed: u64,
    /// Random flip and affine warp of each frame before selection.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            optimizer: AdamWConfig::default(),
            threshold_mode: ThresholdMode::Fixed(0.0),
            seed: 0,
            augment: false,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ViTParams,
    pub v: ViTParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ViTParams) -> Self {
        let mut m = params.clone();
        m.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
pub fn adamw_step(
    params: &mut ViTParams,
    grads: &ViTParams,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<()> {
    let shapes = |p: &ViTParams| p.tensors().iter().map(|t| t.shape()).collect::<Vec<_>>();
    let target = shapes(params);
    if shapes(grads) != target || shapes(&state.m) != target || shapes(&state.v) != target {
        return Err(TrainError::ShapeMismatch);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *pv);
        }
    }
    Ok(())
}

/// A preprocessed labeled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Voxelized and resized, not normalized.
    pub frame: VoxelGrid,
    pub normalized: VoxelGrid,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_recordings(recordings: &[EventRecording], prep: &Preprocess, num_classes: usize) -> Result<Self> {
        let samples = recordings
            .iter()
            .enumerate()
            .map(|(index, rec)| {
                let label = rec
                    .label()
                    .map(|l| l as usize)
                    .filter(|&l| l < num_classes)
                    .ok_or(TrainError::BadLabel {
                        index,
                        label: rec.label(),
                        classes: num_classes,
                    })?;
                let frame = prep.frame(rec)?;
                let normalized = normalize_nonzero(&frame);
                Ok(Sample {
                    frame,
                    normalized,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn from_samples(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub mean_active_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub mean_active_fraction: f64,
    /// Encoder-mode MACs at each frame's patch count, averaged.
    pub mean_macs: f64,
}

/// Model, optimizer state and configuration of one training run.
pub struct Trainer {
    model: VisionTransformer,
    state: OptimizerState,
    cfg: TrainConfig,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: VisionTransformer, cfg: TrainConfig) -> Result<Self> {
        cfg.threshold_mode.validate()?;
        Ok(Self {
            state: OptimizerState::new(model.params()),
            model,
            cfg,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &VisionTransformer {
        &self.model
    }

    pub fn into_model(self) -> VisionTransformer {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over `data` in a shuffled order drawn from the master seed
    /// and the epoch index.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let patch_size = self.model.config().patch_size;
        let (mut loss_sum, mut correct, mut frac_sum) = (0.0, 0usize, 0.0);
        for i in order {
            let sample = &data.samples[i];
            let threshold = self.cfg.threshold_mode.draw(&mut rng);
            let augmented;
            let frame = if self.cfg.augment {
                augmented = normalize_nonzero(&augment_with(&sample.frame, &mut rng));
                &augmented
            } else {
                &sample.normalized
            };
            let patches = select_active(frame, patch_size, threshold)?;
            frac_sum += patches.active_fraction();
            let (loss, logits, grads) = self.model.loss_and_grad(&patches, sample.label)?;
            loss_sum += loss;
            correct += usize::from(predict(&logits) == sample.label);
            adamw_step(self.model.params_mut(), &grads, &mut self.state, &self.cfg.optimizer)?;
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochMetrics {
            mean_loss: loss_sum / n,
            accuracy: correct as f64 / n,
            mean_active_fraction: frac_sum / n,
        })
    }
}

/// Accuracy, loss, active fraction and MACs at a fixed threshold. Does not
/// touch the parameters.
pub fn evaluate(model: &VisionTransformer, data: &Dataset, threshold: f64) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cfg = model.config();
    let (mut loss_sum, mut correct, mut frac_sum, mut macs_sum) = (0.0, 0usize, 0.0, 0.0);
    let mut profile = ForwardProfile::default();
    for sample in data.samples() {
        let patches = select_active(&sample.normalized, cfg.patch_size, threshold)?;
        let logits = model.forward(&patches, &mut profile)?;
        let (loss, _) = cross_entropy(&logits, sample.label).map_err(ViTError::from)?;
        loss_sum += loss;
        correct += usize::from(predict(&logits) == sample.label);
        frac_sum += patches.active_fraction();
        macs_sum += model_macs(patches.len() as u64, cfg, CountingMode::Encoder);
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        mean_loss: loss_sum / n,
        accuracy: correct as f64 / n,
        mean_active_fraction: frac_sum / n,
        mean_macs: macs_sum / n,
    })
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,mean_active_fraction,mean_macs";

/// Appends one metrics record.
pub fn write_metrics_row<W: Write>(
    mut out: W,
    epoch: usize,
    split: &str,
    loss: f64,
    accuracy: f64,
    mean_active_fraction: f64,
    mean_macs: Option<f64>,
) -> io::Result<()> {
    let macs = mean_macs.map(|m| format!("{m}")).unwrap_or_default();
    writeln!(out, "{epoch},{split},{loss},{accuracy},{mean_active_fraction},{macs}")
}

/// Result of [`fit`]: the selected parameters and per-epoch history.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: VisionTransformer,
    /// Zero-based epoch the returned model comes from.
    pub epoch: usize,
    pub val_accuracy: Option<f64>,
    pub history: Vec<EpochMetrics>,
}

/// Trains for the configured number of epochs. With a validation set the
/// returned model is the epoch with the highest validation accuracy at
/// `eval_threshold` (earliest on ties), otherwise the final one. Metrics rows
/// go to `metrics` when given; the header is not written.
pub fn fit<W: Write>(
    trainer: &mut Trainer,
    train: &Dataset,
    val: Option<&Dataset>,
    eval_threshold: f64,
    mut metrics: Option<&mut W>,
) -> Result<FitOutcome> {
    let mut history = Vec::with_capacity(trainer.cfg.epochs);
    let mut best: Option<(f64, usize, VisionTransformer)> = None;
    for epoch in 0..trainer.cfg.epochs {
        let m = trainer.train_epoch(train)?;
        history.push(m);
        if let Some(out) = metrics.as_deref_mut() {
            write_metrics_row(&mut *out, epoch, "train", m.mean_loss, m.accuracy, m.mean_active_fraction, None)?;
        }
        if let Some(val) = val {
            let v = evaluate(trainer.model(), val, eval_threshold)?;
            if let Some(out) = metrics.as_deref_mut() {
                write_metrics_row(&mut *out, epoch, "val", v.mean_loss, v.accuracy, v.mean_active_fraction, Some(v.mean_macs))?;
            }
            if best.as_ref().is_none_or(|(acc, _, _)| v.accuracy > *acc) {
                best = Some((v.accuracy, epoch, trainer.model().clone()));
            }
        }
    }
    Ok(match best {
        Some((acc, epoch, model)) => FitOutcome {
            model,
            epoch,
            val_accuracy: Some(acc),
            history,
        },
        None => FitOutcome {
            model: trainer.model().clone(),
            epoch: trainer.epochs_done().saturating_sub(1),
            val_accuracy: None,
            history,
        },
    })
}
