//! Non-overlapping patch tiling, the active-ratio statistic and threshold
//! selection of active patches.

use std::io::{self, Write};

use rand::Rng;
use thiserror::Error;

use crate::nn_kernels::Tensor2D;
use crate::voxel::VoxelGrid;

/// Range of the per-iteration threshold draw in mixed-threshold training.
pub const MIXED_THRESHOLD_LO: f64 = 0.0;
pub const MIXED_THRESHOLD_HI: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("frame {height}x{width} is not divisible by patch size {patch_size}")]
    DimensionNotDivisible {
        height: usize,
        width: usize,
        patch_size: usize,
    },
    #[error("patch vector has length {got}, expected {expected}")]
    BadPatchLength { got: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, PatchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn for_frame(height: usize, width: usize, channels: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return Err(PatchError::DimensionNotDivisible {
                height,
                width,
                patch_size,
            });
        }
        Ok(Self {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
            channels,
        })
    }

    pub fn slots(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Copies slot `slot` of `grid` into `out`, channel fastest, then x, then y.
    pub fn extract_into(&self, grid: &VoxelGrid, slot: usize, out: &mut [f64]) {
        let p = self.patch_size;
        let (pr, pc) = (slot / self.cols, slot % self.cols);
        let run = p * self.channels;
        for dy in 0..p {
            let start = grid.index(pr * p + dy, pc * p, 0);
            out[dy * run..(dy + 1) * run].copy_from_slice(&grid.values()[start..start + run]);
        }
    }
}

/// Active patches of one frame, flattened, with their row-major slot indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    vectors: Tensor2D,
    positions: Vec<usize>,
    grid: PatchGrid,
}

impl PatchSet {
    /// Builds a set from parts, checking the position invariants.
    pub fn new(vectors: Tensor2D, positions: Vec<usize>, grid: PatchGrid) -> Option<Self> {
        let ok = vectors.rows() == positions.len()
            && vectors.cols() == grid.patch_len()
            && positions.windows(2).all(|w| w[0] < w[1])
            && positions.last().is_none_or(|&p| p < grid.slots());
        ok.then_some(Self {
            vectors,
            positions,
            grid,
        })
    }

    /// Like [`PatchSet::new`] but positions need not be sorted (only distinct
    /// and in range). Used to test order independence.
    pub fn unordered(vectors: Tensor2D, positions: Vec<usize>, grid: PatchGrid) -> Option<Self> {
        let mut sorted = positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let ok = sorted.len() == positions.len()
            && vectors.rows() == positions.len()
            && vectors.cols() == grid.patch_len()
            && sorted.last().is_none_or(|&p| p < grid.slots());
        ok.then_some(Self {
            vectors,
            positions,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn vectors(&self) -> &Tensor2D {
        &self.vectors
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn active_fraction(&self) -> f64 {
        self.len() as f64 / self.grid.slots() as f64
    }

    /// Writes each patch back to its slot on a zero frame.
    pub fn scatter(&self) -> VoxelGrid {
        let g = &self.grid;
        let p = g.patch_size;
        let mut out = VoxelGrid::zeros(g.rows * p, g.cols * p, g.channels);
        for (i, &slot) in self.positions.iter().enumerate() {
            let v = self.vectors.row(i);
            let (pr, pc) = (slot / g.cols, slot % g.cols);
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..g.channels {
                        out.set(pr * p + dy, pc * p + dx, c, v[(dy * p + dx) * g.channels + c]);
                    }
                }
            }
        }
        out
    }
}

/// Fraction of entries that are exactly nonzero.
pub fn compute_active_ratio(patch: &[f64]) -> f64 {
    if patch.is_empty() {
        return 0.0;
    }
    patch.iter().filter(|&&v| v != 0.0).count() as f64 / patch.len() as f64
}

/// Active ratio of every slot, row-major.
pub fn active_ratios(grid: &VoxelGrid, patch_size: usize) -> Result<Vec<f64>> {
    let pg = PatchGrid::for_frame(grid.height(), grid.width(), grid.channels(), patch_size)?;
    let mut buf = vec![0.0; pg.patch_len()];
    Ok((0..pg.slots())
        .map(|slot| {
            pg.extract_into(grid, slot, &mut buf);
            compute_active_ratio(&buf)
        })
        .collect())
}

/// Keeps slots whose active ratio is at least `threshold`, in row-major order.
pub fn select_active(grid: &VoxelGrid, patch_size: usize, threshold: f64) -> Result<PatchSet> {
    let pg = PatchGrid::for_frame(grid.height(), grid.width(), grid.channels(), patch_size)?;
    let len = pg.patch_len();
    let mut buf = vec![0.0; len];
    let mut data = Vec::new();
    let mut positions = Vec::new();
    for slot in 0..pg.slots() {
        pg.extract_into(grid, slot, &mut buf);
        if compute_active_ratio(&buf) >= threshold {
            data.extend_from_slice(&buf);
            positions.push(slot);
        }
    }
    let vectors = Tensor2D::from_vec(positions.len(), len, data).expect("consistent patch buffer");
    Ok(PatchSet {
        vectors,
        positions,
        grid: pg,
    })
}

/// Number of active patches out of the total slots of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveCount {
    pub active: usize,
    pub total: usize,
}

impl From<&PatchSet> for ActiveCount {
    fn from(p: &PatchSet) -> Self {
        Self {
            active: p.len(),
            total: p.grid.slots(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistogramBin {
    /// Inclusive bounds on the active-patch count.
    pub low: usize,
    pub high: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveHistogram {
    /// Non-empty bins only, ascending.
    pub bins: Vec<HistogramBin>,
    pub mean_active_fraction: Option<f64>,
}

/// Histogram of active-patch counts with bins of `bin_width` counts each.
pub fn active_histogram(counts: &[ActiveCount], bin_width: usize) -> ActiveHistogram {
    let bin_width = bin_width.max(1);
    let mut by_bin = std::collections::BTreeMap::new();
    for c in counts {
        *by_bin.entry(c.active / bin_width).or_insert(0usize) += 1;
    }
    let bins = by_bin
        .into_iter()
        .map(|(b, count)| HistogramBin {
            low: b * bin_width,
            high: b * bin_width + bin_width - 1,
            count,
        })
        .collect();
    let mean_active_fraction = (!counts.is_empty()).then(|| {
        counts
            .iter()
            .map(|c| c.active as f64 / c.total.max(1) as f64)
            .sum::<f64>()
            / counts.len() as f64
    });
    ActiveHistogram {
        bins,
        mean_active_fraction,
    }
}

impl ActiveHistogram {
    /// `bin_low,bin_high,count` rows and a trailing mean record.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "bin_low,bin_high,count")?;
        for b in &self.bins {
            writeln!(out, "{},{},{}", b.low, b.high, b.count)?;
        }
        match self.mean_active_fraction {
            Some(m) => writeln!(out, "mean_active_fraction,{m}"),
            None => writeln!(out, "mean_active_fraction,"),
        }
    }
}

/// Uniform draw from the mixed-threshold range.
pub fn sample_threshold_mixed<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.gen_range(MIXED_THRESHOLD_LO..=MIXED_THRESHOLD_HI)
}
