//! Piecewise-constant probability densities on a fixed grid.
//!
//! A [`Grid`] splits a compact interval into equal-width cells and a
//! [`GridDensity`] stores the probability mass per cell. Because every
//! density is constant within a cell, the Kullback-Leibler divergence, its
//! second moment, and the Hellinger affinity between two densities on the
//! same grid reduce to exact finite sums over the mass vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for "this mass vector sums to one" checks.
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("grid requires lo < hi, got [{lo}, {hi}]")]
    BadInterval { lo: f64, hi: f64 },
    #[error("grid requires at least one cell")]
    NoCells,
    #[error("mass vector has length {got}, grid has {want} cells")]
    LengthMismatch { got: usize, want: usize },
    #[error("mass vector entry {index} is negative ({value})")]
    NegativeMass { index: usize, value: f64 },
    #[error("mass vector is all zero")]
    AllZero,
    #[error("mass vector sums to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("point {y} lies outside the grid domain [{lo}, {hi}]")]
    OutOfDomain { y: f64, lo: f64, hi: f64 },
    #[error("densities live on different grids")]
    GridMismatch,
    #[error("mixture weights sum to {sum}, expected 1")]
    BadWeights { sum: f64 },
    #[error("empty density list")]
    EmptyList,
}

/// Equal-width partition of `[lo, hi]` into `bins` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lo: f64,
    hi: f64,
    bins: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self, DensityError> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(DensityError::BadInterval { lo, hi });
        }
        if bins == 0 {
            return Err(DensityError::NoCells);
        }
        Ok(Grid { lo, hi, bins })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Cell width `(hi - lo) / bins`.
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    /// Cell index containing `y`; the right endpoint maps to the last cell.
    pub fn cell_of(&self, y: f64) -> Result<usize, DensityError> {
        if !(y >= self.lo && y <= self.hi) {
            return Err(DensityError::OutOfDomain {
                y,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let raw = ((y - self.lo) / self.width()) as usize;
        Ok(raw.min(self.bins - 1))
    }
}

/// Probability density represented by the mass in each grid cell; the
/// density value on cell `b` is `mass[b] / width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    grid: Grid,
    mass: Vec<f64>,
}

impl GridDensity {
    /// Normalizes a raw nonnegative vector into a density.
    pub fn from_raw(grid: Grid, raw: &[f64]) -> Result<Self, DensityError> {
        if raw.len() != grid.bins() {
            return Err(DensityError::LengthMismatch {
                got: raw.len(),
                want: grid.bins(),
            });
        }
        for (index, &value) in raw.iter().enumerate() {
            if value < 0.0 || !value.is_finite() {
                return Err(DensityError::NegativeMass { index, value });
            }
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(DensityError::AllZero);
        }
        let mass: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(DensityError::NotNormalized { sum });
        }
        Ok(GridDensity { grid, mass })
    }

    /// Accepts a vector that already sums to one within [`MASS_TOL`].
    pub fn from_mass(grid: Grid, mass: Vec<f64>) -> Result<Self, DensityError> {
        if mass.len() != grid.bins() {
            return Err(DensityError::LengthMismatch {
                got: mass.len(),
                want: grid.bins(),
            });
        }
        for (index, &value) in mass.iter().enumerate() {
            if value < 0.0 || !value.is_finite() {
                return Err(DensityError::NegativeMass { index, value });
            }
        }
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(DensityError::NotNormalized { sum });
        }
        Ok(GridDensity { grid, mass })
    }

    /// Uniform density on the grid.
    pub fn uniform(grid: Grid) -> Self {
        let mass = vec![1.0 / grid.bins() as f64; grid.bins()];
        GridDensity { grid, mass }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Density value at `y` (mass of the containing cell divided by width).
    pub fn evaluate(&self, y: f64) -> Result<f64, DensityError> {
        let cell = self.grid.cell_of(y)?;
        Ok(self.mass[cell] / self.grid.width())
    }

    /// Log density at `y`; cells with zero mass give `-inf`.
    pub fn log_evaluate(&self, y: f64) -> Result<f64, DensityError> {
        Ok(self.evaluate(y)?.ln())
    }

    /// Inverse-CDF sampling: pick a cell by cumulative mass, then a
    /// uniform point within the cell. Deterministic given the RNG state.
    pub fn sample<R: Rng>(&self, rng: &mut R, count: usize) -> Vec<f64> {
        let mut cdf = Vec::with_capacity(self.mass.len());
        let mut acc = 0.0;
        for &m in &self.mass {
            acc += m;
            cdf.push(acc);
        }
        // guard against the cumulative sum landing just below 1
        if let Some(last) = cdf.last_mut() {
            *last = f64::max(*last, 1.0);
        }
        let width = self.grid.width();
        (0..count)
            .map(|_| {
                let u: f64 = rng.gen::<f64>();
                let cell = cdf.partition_point(|&c| c <= u).min(self.mass.len() - 1);
                let v: f64 = rng.gen::<f64>();
                let y = self.grid.lo() + (cell as f64 + v) * width;
                y.min(self.grid.hi())
            })
            .collect()
    }
}

/// Divergences of a candidate density from a reference density, all exact
/// for piecewise-constant densities on a shared grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergences {
    /// Kullback-Leibler divergence; `+inf` when the candidate misses
    /// reference support.
    pub kl: f64,
    /// Second moment of the log ratio under the reference; `+inf` along
    /// with `kl`.
    pub v: f64,
    /// Half squared Hellinger distance, in `[0, 1]`.
    pub h: f64,
    /// Hellinger affinity, `1 - h` exactly.
    pub affinity: f64,
}

/// Computes KL, its second moment, half squared Hellinger distance, and
/// the affinity of `candidate` from `reference`.
///
/// Cells where the reference has zero mass contribute nothing (the
/// `0 * log 0 = 0` convention); a cell with positive reference mass and
/// zero candidate mass makes `kl` and `v` infinite while `h` and
/// `affinity` stay finite.
pub fn divergences(
    reference: &GridDensity,
    candidate: &GridDensity,
) -> Result<Divergences, DensityError> {
    if reference.grid != candidate.grid {
        return Err(DensityError::GridMismatch);
    }
    let mut kl = 0.0;
    let mut v = 0.0;
    let mut affinity = 0.0;
    for (&p, &q) in reference.mass.iter().zip(candidate.mass.iter()) {
        affinity += (p * q).sqrt();
        if p > 0.0 {
            if q > 0.0 {
                let log_ratio = (p / q).ln();
                kl += p * log_ratio;
                v += p * log_ratio * log_ratio;
            } else {
                kl = f64::INFINITY;
                v = f64::INFINITY;
            }
        }
    }
    Ok(Divergences {
        kl,
        v,
        h: 1.0 - affinity,
        affinity,
    })
}

/// Convex combination of densities on a common grid, renormalized to kill
/// rounding drift from long accumulation chains.
pub fn mixture(fs: &[GridDensity], weights: &[f64]) -> Result<GridDensity, DensityError> {
    if fs.is_empty() {
        return Err(DensityError::EmptyList);
    }
    if fs.len() != weights.len() {
        return Err(DensityError::LengthMismatch {
            got: weights.len(),
            want: fs.len(),
        });
    }
    let grid = fs[0].grid;
    let mut mass = vec![0.0; grid.bins()];
    let mut weight_sum = 0.0;
    for (f, &w) in fs.iter().zip(weights.iter()) {
        if f.grid != grid {
            return Err(DensityError::GridMismatch);
        }
        if w < 0.0 || !w.is_finite() {
            return Err(DensityError::NegativeMass {
                index: 0,
                value: w,
            });
        }
        weight_sum += w;
        for (slot, &m) in mass.iter_mut().zip(f.mass.iter()) {
            *slot += w * m;
        }
    }
    if (weight_sum - 1.0).abs() > MASS_TOL {
        return Err(DensityError::BadWeights { sum: weight_sum });
    }
    let total: f64 = mass.iter().sum();
    for slot in &mut mass {
        *slot /= total;
    }
    Ok(GridDensity { grid, mass })
}

/// Equal-weight average of an ordered list of densities.
pub fn cesaro_average(fs: &[GridDensity]) -> Result<GridDensity, DensityError> {
    if fs.is_empty() {
        return Err(DensityError::EmptyList);
    }
    let w = 1.0 / fs.len() as f64;
    mixture(fs, &vec![w; fs.len()])
}
