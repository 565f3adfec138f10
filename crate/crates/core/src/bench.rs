//! Single-threaded wall-clock throughput of patch selection plus the forward
//! pass. Voxelization and normalization are timed separately.

use std::time::{Duration, Instant};

use crate::cost_model::{model_macs, CountingMode};
use crate::events_io::EventRecording;
use crate::patches::select_active;
use crate::train::{Result, TrainError};
use crate::vit::{predict, ForwardProfile, VisionTransformer};
use crate::voxel::{normalize_nonzero, Preprocess, VoxelGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub threshold: f64,
    pub frames: usize,
    pub repeats: usize,
    /// Frames per second of each repetition, in run order.
    pub fps_per_repeat: Vec<f64>,
    pub median_fps: f64,
    pub mean_active_fraction: f64,
    pub mean_macs: f64,
    /// Predicted class per frame from the first repetition.
    pub predictions: Vec<usize>,
}

/// Voxelizes, resizes and normalizes every recording, returning the frames
/// and the elapsed time.
pub fn preprocess_timed(recordings: &[EventRecording], prep: &Preprocess) -> Result<(Vec<VoxelGrid>, Duration)> {
    let start = Instant::now();
    let frames = recordings
        .iter()
        .map(|r| Ok(normalize_nonzero(&prep.frame(r)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, start.elapsed()))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs selection and inference over all frames `repeats` times.
pub fn run_bench(model: &VisionTransformer, frames: &[VoxelGrid], threshold: f64, repeats: usize) -> Result<BenchResult> {
    if frames.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if repeats == 0 {
        return Err(TrainError::InvalidConfig("repeat count must be positive".into()));
    }
    let cfg = model.config();
    let mut profile = ForwardProfile::default();
    let mut fps_per_repeat = Vec::with_capacity(repeats);
    let mut predictions = Vec::with_capacity(frames.len());
    let (mut frac_sum, mut macs_sum) = (0.0, 0.0);
    for r in 0..repeats {
        let start = Instant::now();
        for frame in frames {
            let patches = select_active(frame, cfg.patch_size, threshold)?;
            let logits = model.forward(&patches, &mut profile)?;
            if r == 0 {
                predictions.push(predict(&logits));
                frac_sum += patches.active_fraction();
                macs_sum += model_macs(patches.len() as u64, cfg, CountingMode::Encoder);
            }
        }
        let secs = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        fps_per_repeat.push(frames.len() as f64 / secs);
    }
    let n = frames.len() as f64;
    Ok(BenchResult {
        threshold,
        frames: frames.len(),
        repeats,
        median_fps: median(&fps_per_repeat),
        fps_per_repeat,
        mean_active_fraction: frac_sum / n,
        mean_macs: macs_sum / n,
        predictions,
    })
}
