//! Voxel-grid frames built from event recordings by temporal bilinear
//! accumulation, plus the resize/pad, normalization and augmentation steps
//! applied to frames before patch selection.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::events_io::EventRecording;

pub const DEFAULT_CHANNELS: usize = 9;
pub const FRAME_HEIGHT: usize = 192;
pub const FRAME_WIDTH: usize = 240;

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("recording has no events")]
    EmptyRecording,
    #[error("channel count must be at least 2, got {0}")]
    TooFewChannels(usize),
    #[error("grid is degenerate ({height}x{width}x{channels})")]
    Degenerate {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("grid dump is malformed: {0}")]
    BadDump(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, VoxelError>;

/// Dense `height × width × channels` frame stored in `(y, x, c)` order with
/// the channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    /// # Panics
    /// If `values.len()` does not match the dimensions.
    pub fn from_values(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width * channels, "voxel grid size mismatch");
        Self {
            height,
            width,
            channels,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.values[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_non_degenerate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(VoxelError::Degenerate {
                height: self.height,
                width: self.width,
                channels: self.channels,
            });
        }
        Ok(())
    }

    /// Bilinear sample of one channel at fractional pixel coordinates, with
    /// samples outside the frame treated as zero.
    fn sample_zero_fill(&self, fy: f64, fx: f64, c: usize) -> f64 {
        let (y0, x0) = (fy.floor(), fx.floor());
        let (wy, wx) = (fy - y0, fx - x0);
        let mut acc = 0.0;
        for (dy, wyv) in [(0.0, 1.0 - wy), (1.0, wy)] {
            for (dx, wxv) in [(0.0, 1.0 - wx), (1.0, wx)] {
                let w = wyv * wxv;
                if w == 0.0 {
                    continue;
                }
                let (yy, xx) = (y0 + dy, x0 + dx);
                if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                    continue;
                }
                acc += w * self.get(yy as usize, xx as usize, c);
            }
        }
        acc
    }
}

/// Accumulates events into `channels` temporal channels with linear
/// time-distance weights.
///
/// Channel `c` (0-based) sits at `t_1 + c·ΔT` with `ΔT = (t_N − t_1)/(C − 1)`
/// and collects events in `(t'_{c-1}, t'_{c+1}]`, weighted by
/// `1 − |t − t'_c|/ΔT`. The first channel's window is closed below so that
/// events at `t_1` are kept. When all events share one timestamp they deposit
/// weight 1 in the first channel.
pub fn build_voxel_grid(rec: &EventRecording, channels: usize) -> Result<VoxelGrid> {
    if channels < 2 {
        return Err(VoxelError::TooFewChannels(channels));
    }
    let events = rec.events();
    let (first, last) = match (events.first(), events.last()) {
        (Some(f), Some(l)) => (f.t, l.t),
        _ => return Err(VoxelError::EmptyRecording),
    };
    let mut grid = VoxelGrid::zeros(usize::from(rec.height()), usize::from(rec.width()), channels);
    let span = u128::from(last - first);
    if span == 0 {
        for e in events {
            let i = grid.index(usize::from(e.y), usize::from(e.x), 0);
            grid.values[i] += e.p.sign();
        }
        return Ok(grid);
    }

    // Positions are scaled by (C − 1) so every channel anchor lands on an
    // integer multiple of `span`; window tests are then exact.
    let bins = (channels - 1) as u128;
    let dt = span as f64;
    for e in events {
        let pos = u128::from(e.t - first) * bins;
        let base = (pos / span) as usize;
        let lo = base.saturating_sub(1);
        let hi = (base + 1).min(channels - 1);
        for c in lo..=hi {
            let anchor = c as u128 * span;
            let lower_ok = if c == 0 {
                true
            } else {
                pos > (c as u128 - 1) * span
            };
            let upper_ok = pos <= (c as u128 + 1) * span;
            if !(lower_ok && upper_ok) {
                continue;
            }
            let dist = pos.abs_diff(anchor) as f64;
            let weight = (1.0 - dist / dt).clamp(0.0, 1.0);
            if weight == 0.0 {
                continue;
            }
            let i = grid.index(usize::from(e.y), usize::from(e.x), c);
            grid.values[i] += weight * e.p.sign();
        }
    }
    Ok(grid)
}

/// Half-pixel-centered 1-D bilinear taps from destination to source with edge
/// clamping.
fn bilinear_taps(dst: usize, scale: f64, src_len: usize) -> [(usize, f64); 2] {
    let s = ((dst as f64 + 0.5) / scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    let f = s - i0 as f64;
    [(i0, 1.0 - f), (i1, f)]
}

/// Scales by `min(target_h/h, target_w/w)` with bilinear interpolation, then
/// zero-pads bottom and right to exactly `target_h × target_w`.
pub fn resize_pad(grid: &VoxelGrid, target_h: usize, target_w: usize) -> Result<VoxelGrid> {
    grid.check_non_degenerate()?;
    if target_h == 0 || target_w == 0 {
        return Err(VoxelError::Degenerate {
            height: target_h,
            width: target_w,
            channels: grid.channels,
        });
    }
    let (h, w, ch) = (grid.height, grid.width, grid.channels);
    if h == target_h && w == target_w {
        return Ok(grid.clone());
    }
    let scale = (target_h as f64 / h as f64).min(target_w as f64 / w as f64);
    let new_h = ((h as f64 * scale + 1e-9).floor() as usize).clamp(1, target_h);
    let new_w = ((w as f64 * scale + 1e-9).floor() as usize).clamp(1, target_w);
    let mut out = VoxelGrid::zeros(target_h, target_w, ch);
    for y in 0..new_h {
        let ty = bilinear_taps(y, scale, h);
        for x in 0..new_w {
            let tx = bilinear_taps(x, scale, w);
            for c in 0..ch {
                let mut acc = 0.0;
                for &(sy, wy) in &ty {
                    for &(sx, wx) in &tx {
                        acc += wy * wx * grid.get(sy, sx, c);
                    }
                }
                out.set(y, x, c, acc);
            }
        }
    }
    Ok(out)
}

/// Standardizes the nonzero entries with their own population mean and
/// standard deviation; zeros stay zero.
pub fn normalize_nonzero(grid: &VoxelGrid) -> VoxelGrid {
    let (mut count, mut sum) = (0usize, 0.0);
    for &v in &grid.values {
        if v != 0.0 {
            count += 1;
            sum += v;
        }
    }
    if count == 0 {
        return grid.clone();
    }
    let mean = sum / count as f64;
    let var = grid
        .values
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count as f64;
    let std = var.sqrt();
    let mut out = grid.clone();
    for v in out.values.iter_mut().filter(|v| **v != 0.0) {
        *v = if std < 1e-8 { 0.0 } else { (*v - mean) / std };
    }
    out
}

/// One draw of the frame augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub flip: bool,
    /// Radians, counter-clockwise about the frame center.
    pub rotation: f64,
    /// Pixels.
    pub shift_x: f64,
    pub shift_y: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        flip: false,
        rotation: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };

    pub const MAX_ROTATION_DEG: f64 = 15.0;
    pub const MAX_SHIFT_FRACTION: f64 = 0.1;

    pub fn sample<R: Rng>(rng: &mut R, height: usize, width: usize) -> Self {
        let flip = rng.gen_bool(0.5);
        let max_rot = Self::MAX_ROTATION_DEG.to_radians();
        let rotation = rng.gen_range(-max_rot..=max_rot);
        let sx = Self::MAX_SHIFT_FRACTION * width as f64;
        let sy = Self::MAX_SHIFT_FRACTION * height as f64;
        Self {
            flip,
            rotation,
            shift_x: rng.gen_range(-sx..=sx),
            shift_y: rng.gen_range(-sy..=sy),
        }
    }
}

/// Flip, rotate about the center, then translate. Sampling is inverse-mapped
/// with bilinear interpolation and zero fill.
pub fn apply_affine(grid: &VoxelGrid, params: &AffineParams) -> VoxelGrid {
    let (h, w, ch) = (grid.height, grid.width, grid.channels);
    let mut out = VoxelGrid::zeros(h, w, ch);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = params.rotation.sin_cos();
    for y in 0..h {
        for x in 0..w {
            // Undo translation, then rotation, then the flip.
            let ux = x as f64 - params.shift_x - cx;
            let uy = y as f64 - params.shift_y - cy;
            let rx = cos * ux + sin * uy;
            let ry = -sin * ux + cos * uy;
            let mut sx = rx + cx;
            let sy = ry + cy;
            if params.flip {
                sx = (w as f64 - 1.0) - sx;
            }
            for c in 0..ch {
                let v = grid.sample_zero_fill(sy, sx, c);
                if v != 0.0 {
                    out.set(y, x, c, v);
                }
            }
        }
    }
    out
}

pub fn augment(grid: &VoxelGrid, seed: u64) -> VoxelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment_with(grid, &mut rng)
}

pub fn augment_with<R: Rng>(grid: &VoxelGrid, rng: &mut R) -> VoxelGrid {
    let params = AffineParams::sample(rng, grid.height, grid.width);
    apply_affine(grid, &params)
}

/// Frame preparation shared by training, evaluation and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preprocess {
    pub channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
}

impl Preprocess {
    /// Voxelize then resize/pad; normalization is left to the caller so that
    /// augmentation can run between the two.
    pub fn frame(&self, rec: &EventRecording) -> Result<VoxelGrid> {
        let grid = build_voxel_grid(rec, self.channels)?;
        resize_pad(&grid, self.frame_height, self.frame_width)
    }

    pub fn normalized_frame(&self, rec: &EventRecording) -> Result<VoxelGrid> {
        Ok(normalize_nonzero(&self.frame(rec)?))
    }
}

/// Dump layout: `height`, `width`, `channels` as little-endian u32, then
/// little-endian f32 values in `(y, x, c)` order.
pub fn write_grid_dump<W: Write>(grid: &VoxelGrid, mut out: W) -> Result<()> {
    for d in [grid.height, grid.width, grid.channels] {
        let d = u32::try_from(d).map_err(|_| VoxelError::BadDump("dimension exceeds u32"))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(grid.values.len() * 4);
    for &v in &grid.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_grid_dump<R: Read>(mut input: R) -> Result<VoxelGrid> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(VoxelError::BadDump("header truncated"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (dim(0), dim(4), dim(8));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or(VoxelError::BadDump("dimensions overflow"))?;
    if bytes.len() != 12 + 4 * n {
        return Err(VoxelError::BadDump("payload size does not match dimensions"));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    Ok(VoxelGrid::from_values(h, w, c, values))
}
