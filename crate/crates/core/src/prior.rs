//! Finite sieve priors over grid densities.
//!
//! A [`FinitePrior`] is an explicit list of candidate densities with log
//! weights, so the prior mass of any divergence neighborhood is an exact
//! finite sum. [`build_histogram_sieve`] constructs the built-in family:
//! histogram densities constant on super-cells at a list of resolutions,
//! with masses on a simplex lattice and geometrically decaying weight per
//! resolution level.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{divergences, DensityError, Grid, GridDensity};
use crate::log_sum_exp;

/// Tolerance for "prior weights sum to one" checks.
pub const WEIGHT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("prior must contain at least one candidate")]
    Empty,
    #[error("candidate {index} lives on a different grid")]
    GridMismatch { index: usize },
    #[error("prior weights sum to {sum}, expected 1")]
    BadWeights { sum: f64 },
    #[error("{count} log weights for {candidates} candidates")]
    WeightCountMismatch { count: usize, candidates: usize },
    #[error("sieve resolution {resolution} does not divide {bins} grid cells")]
    ResolutionMismatch { resolution: usize, bins: usize },
    #[error("sieve resolution must be at least 1")]
    ZeroResolution,
    #[error("level decay must lie in (0, 1), got {0}")]
    BadDecay(f64),
    #[error("candidate cap per level must be at least 1")]
    ZeroCap,
    #[error("sieve level produced no candidates")]
    EmptyLevel,
    #[error("simplex lattice too large to index")]
    SieveTooLarge,
    #[error("rate sequence requires amp > 0, got {0}")]
    BadAmplitude(f64),
    #[error("rate sequence requires gamma in (0, 1/2], got {0}")]
    BadGamma(f64),
    #[error("rate sequence requires logpow >= 0, got {0}")]
    BadLogPower(f64),
    #[error("rate sequence with gamma = 1/2 needs logpow > 0 so that n*eps_n^2 diverges")]
    NotDiverging,
    #[error("sample sizes must be strictly increasing and at least 1")]
    BadSampleSizes,
    #[error("prior file: {0}")]
    Format(String),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which divergence neighborhood the prior mass is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborhoodVariant {
    /// `{f : K(truth, f) <= eps^2}`
    KlOnly,
    /// `{f : K(truth, f) <= eps^2 and V(truth, f) <= eps^2}`
    KlAndV,
}

/// Finite collection of candidate densities with log prior weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinitePrior {
    candidates: Vec<GridDensity>,
    log_weights: Vec<f64>,
}

impl FinitePrior {
    pub fn new(candidates: Vec<GridDensity>, log_weights: Vec<f64>) -> Result<Self, PriorError> {
        if candidates.is_empty() {
            return Err(PriorError::Empty);
        }
        if log_weights.len() != candidates.len() {
            return Err(PriorError::WeightCountMismatch {
                count: log_weights.len(),
                candidates: candidates.len(),
            });
        }
        let grid = *candidates[0].grid();
        for (index, c) in candidates.iter().enumerate() {
            if *c.grid() != grid {
                return Err(PriorError::GridMismatch { index });
            }
        }
        let sum: f64 = log_weights.iter().map(|lw| lw.exp()).sum();
        if (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(PriorError::BadWeights { sum });
        }
        Ok(FinitePrior {
            candidates,
            log_weights,
        })
    }

    /// Builds from unnormalized log weights, normalizing in log space.
    pub fn from_unnormalized(
        candidates: Vec<GridDensity>,
        raw_log_weights: Vec<f64>,
    ) -> Result<Self, PriorError> {
        let z = log_sum_exp(&raw_log_weights);
        if z == f64::NEG_INFINITY {
            return Err(PriorError::BadWeights { sum: 0.0 });
        }
        let log_weights = raw_log_weights.iter().map(|lw| lw - z).collect();
        FinitePrior::new(candidates, log_weights)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn grid(&self) -> &Grid {
        self.candidates[0].grid()
    }

    pub fn candidates(&self) -> &[GridDensity] {
        &self.candidates
    }

    pub fn candidate(&self, j: usize) -> &GridDensity {
        &self.candidates[j]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|lw| lw.exp()).collect()
    }

    /// Exact prior mass of the divergence neighborhood of `truth` with
    /// radius `eps` (thresholds apply to `eps^2`). Candidates at infinite
    /// divergence are outside every neighborhood.
    pub fn neighborhood_mass(
        &self,
        truth: &GridDensity,
        eps: f64,
        variant: NeighborhoodVariant,
    ) -> Result<f64, PriorError> {
        let eps_sq = eps * eps;
        let mut mass = 0.0;
        for (candidate, &lw) in self.candidates.iter().zip(self.log_weights.iter()) {
            let d = divergences(truth, candidate)?;
            let inside = match variant {
                NeighborhoodVariant::KlOnly => d.kl <= eps_sq,
                NeighborhoodVariant::KlAndV => d.kl <= eps_sq && d.v <= eps_sq,
            };
            if inside {
                mass += lw.exp();
            }
        }
        Ok(mass)
    }

    /// Writes the prior as plain text, one candidate per line, with every
    /// real printed at 17 significant digits so reloading is bit-exact.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<(), PriorError> {
        let grid = self.grid();
        writeln!(w, "finite-prior v1")?;
        writeln!(
            w,
            "grid {} {} {}",
            format_sig17(grid.lo()),
            format_sig17(grid.hi()),
            grid.bins()
        )?;
        writeln!(w, "count {}", self.len())?;
        for (candidate, &lw) in self.candidates.iter().zip(self.log_weights.iter()) {
            write!(w, "cand {}", format_sig17(lw))?;
            for &m in candidate.mass() {
                write!(w, " {}", format_sig17(m))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self, PriorError> {
        let mut lines = r.lines();
        let header = next_line(&mut lines)?;
        if header.trim() != "finite-prior v1" {
            return Err(PriorError::Format(format!(
                "unrecognized header {header:?}"
            )));
        }
        let grid_line = next_line(&mut lines)?;
        let mut parts = grid_line.split_whitespace();
        expect_token(parts.next(), "grid")?;
        let lo = parse_real(parts.next())?;
        let hi = parse_real(parts.next())?;
        let bins: usize = parts
            .next()
            .ok_or_else(|| PriorError::Format("missing bin count".into()))?
            .parse()
            .map_err(|e| PriorError::Format(format!("bad bin count: {e}")))?;
        let grid = Grid::new(lo, hi, bins)?;

        let count_line = next_line(&mut lines)?;
        let mut parts = count_line.split_whitespace();
        expect_token(parts.next(), "count")?;
        let count: usize = parts
            .next()
            .ok_or_else(|| PriorError::Format("missing candidate count".into()))?
            .parse()
            .map_err(|e| PriorError::Format(format!("bad candidate count: {e}")))?;

        let mut candidates = Vec::with_capacity(count);
        let mut log_weights = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line(&mut lines)?;
            let mut parts = line.split_whitespace();
            expect_token(parts.next(), "cand")?;
            log_weights.push(parse_real(parts.next())?);
            let mut mass = Vec::with_capacity(bins);
            for _ in 0..bins {
                mass.push(parse_real(parts.next())?);
            }
            if parts.next().is_some() {
                return Err(PriorError::Format("trailing fields on candidate line".into()));
            }
            candidates.push(GridDensity::from_mass(grid, mass)?);
        }
        FinitePrior::new(candidates, log_weights)
    }

    pub fn save(&self, path: &Path) -> Result<(), PriorError> {
        let mut buf = Vec::new();
        self.write_text(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PriorError> {
        let file = std::fs::File::open(path)?;
        FinitePrior::read_text(std::io::BufReader::new(file))
    }
}

/// Formats a real with 17 significant digits, enough for exact `f64`
/// round-trips through text.
pub fn format_sig17(x: f64) -> String {
    format!("{x:.16e}")
}

fn next_line(
    lines: &mut std::io::Lines<impl BufRead>,
) -> Result<String, PriorError> {
    loop {
        match lines.next() {
            None => return Err(PriorError::Format("unexpected end of file".into())),
            Some(line) => {
                let line = line?;
                if !line.trim().is_empty() {
                    return Ok(line);
                }
            }
        }
    }
}

fn expect_token(got: Option<&str>, want: &str) -> Result<(), PriorError> {
    match got {
        Some(tok) if tok == want => Ok(()),
        other => Err(PriorError::Format(format!(
            "expected {want:?}, got {other:?}"
        ))),
    }
}

fn parse_real(token: Option<&str>) -> Result<f64, PriorError> {
    token
        .ok_or_else(|| PriorError::Format("missing real field".into()))?
        .parse()
        .map_err(|e| PriorError::Format(format!("bad real field: {e}")))
}

/// Parametric rate sequence `eps_n = amp * n^(-gamma) * ln(n+1)^logpow`.
///
/// Construction enforces `eps_n -> 0` with `n * eps_n^2 -> inf`: gamma
/// must lie in (0, 1/2), or equal 1/2 with a positive log power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSequence {
    amp: f64,
    gamma: f64,
    logpow: f64,
}

impl EpsilonSequence {
    pub fn new(amp: f64, gamma: f64, logpow: f64) -> Result<Self, PriorError> {
        if !(amp > 0.0) || !amp.is_finite() {
            return Err(PriorError::BadAmplitude(amp));
        }
        if !(gamma > 0.0 && gamma <= 0.5) {
            return Err(PriorError::BadGamma(gamma));
        }
        if !(logpow >= 0.0) || !logpow.is_finite() {
            return Err(PriorError::BadLogPower(logpow));
        }
        if gamma == 0.5 && logpow == 0.0 {
            return Err(PriorError::NotDiverging);
        }
        Ok(EpsilonSequence { amp, gamma, logpow })
    }

    pub fn amp(&self) -> f64 {
        self.amp
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn logpow(&self) -> f64 {
        self.logpow
    }

    /// `eps_n` for a sample size `n >= 1`.
    pub fn at(&self, n: u64) -> f64 {
        let n = n as f64;
        self.amp * n.powf(-self.gamma) * (n + 1.0).ln().powf(self.logpow)
    }

    /// `eps_n^2`.
    pub fn sq_at(&self, n: u64) -> f64 {
        let e = self.at(n);
        e * e
    }
}

/// One row of a support-condition check: does the prior put at least
/// `exp(-c * n * eps_n^2)` mass on the shrinking neighborhood of `truth`?
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportCheckResult {
    pub n: u64,
    pub eps_sq: f64,
    pub neighborhood_mass: f64,
    pub required_mass: f64,
    pub satisfied: bool,
    /// `ln(neighborhood_mass) + c * n * eps_n^2`; `-inf` when the
    /// neighborhood is empty.
    pub log_margin: f64,
}

/// Evaluates the local support condition at each sample size in `ns`
/// (strictly increasing, each at least 1). Pure report; the prior is
/// never mutated.
pub fn check_support_condition(
    prior: &FinitePrior,
    truth: &GridDensity,
    eps_seq: &EpsilonSequence,
    c: f64,
    ns: &[u64],
    variant: NeighborhoodVariant,
) -> Result<Vec<SupportCheckResult>, PriorError> {
    if ns.is_empty() || ns[0] < 1 || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PriorError::BadSampleSizes);
    }
    ns.iter()
        .map(|&n| {
            let eps = eps_seq.at(n);
            let eps_sq = eps * eps;
            let mass = prior.neighborhood_mass(truth, eps, variant)?;
            let exponent = c * n as f64 * eps_sq;
            let log_margin = mass.ln() + exponent;
            Ok(SupportCheckResult {
                n,
                eps_sq,
                neighborhood_mass: mass,
                required_mass: (-exponent).exp(),
                satisfied: log_margin >= 0.0,
                log_margin,
            })
        })
        .collect()
}

/// Builds the histogram sieve: for the `l`-th entry of `levels` (resolution
/// `r`, which must divide the grid's cell count), candidates are densities
/// constant on `r` super-cells with super-cell masses on the simplex
/// lattice of mesh `1/r^2`. A level whose lattice exceeds
/// `max_candidates_per_level` is thinned by a deterministic stride. Level
/// weight is proportional to `level_decay^(l+1)`, split uniformly within
/// the level.
pub fn build_histogram_sieve(
    grid: Grid,
    levels: &[usize],
    level_decay: f64,
    max_candidates_per_level: usize,
) -> Result<FinitePrior, PriorError> {
    if levels.is_empty() {
        return Err(PriorError::Empty);
    }
    if !(level_decay > 0.0 && level_decay < 1.0) {
        return Err(PriorError::BadDecay(level_decay));
    }
    if max_candidates_per_level == 0 {
        return Err(PriorError::ZeroCap);
    }

    let mut candidates = Vec::new();
    let mut raw_log_weights = Vec::new();
    for (index, &resolution) in levels.iter().enumerate() {
        if resolution == 0 {
            return Err(PriorError::ZeroResolution);
        }
        if grid.bins() % resolution != 0 {
            return Err(PriorError::ResolutionMismatch {
                resolution,
                bins: grid.bins(),
            });
        }
        let lattice = level_lattice(resolution, max_candidates_per_level)?;
        if lattice.is_empty() {
            return Err(PriorError::EmptyLevel);
        }
        let level_log_weight =
            (index as f64 + 1.0) * level_decay.ln() - (lattice.len() as f64).ln();
        for composition in lattice {
            candidates.push(expand_composition(grid, resolution, &composition)?);
            raw_log_weights.push(level_log_weight);
        }
    }
    FinitePrior::from_unnormalized(candidates, raw_log_weights)
}

/// Super-cell compositions for one level: all ways to place `r^2` lattice
/// units into `r` super-cells, thinned by stride when over the cap.
fn level_lattice(resolution: usize, cap: usize) -> Result<Vec<Vec<u64>>, PriorError> {
    let units = (resolution * resolution) as u64;
    let parts = resolution as u64;
    let total = composition_count(units, parts)?;
    if total <= cap as u128 {
        let mut out = Vec::with_capacity(total as usize);
        let mut prefix = Vec::with_capacity(resolution);
        enumerate_compositions(units, parts, &mut prefix, &mut out);
        Ok(out)
    } else {
        (0..cap as u128)
            .map(|t| {
                let rank = t
                    .checked_mul(total)
                    .ok_or(PriorError::SieveTooLarge)?
                    / cap as u128;
                unrank_composition(rank, units, parts)
            })
            .collect()
    }
}

/// Number of compositions of `units` into `parts` nonnegative integers.
fn composition_count(units: u64, parts: u64) -> Result<u128, PriorError> {
    binomial(units + parts - 1, parts - 1)
}

fn binomial(n: u64, k: u64) -> Result<u128, PriorError> {
    let k = k.min(n - k);
    let mut value: u128 = 1;
    for i in 1..=k {
        value = value
            .checked_mul((n - k + i) as u128)
            .ok_or(PriorError::SieveTooLarge)?;
        value /= i as u128;
    }
    Ok(value)
}

fn enumerate_compositions(units: u64, parts: u64, prefix: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
    if parts == 1 {
        prefix.push(units);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for k in 0..=units {
        prefix.push(k);
        enumerate_compositions(units - k, parts - 1, prefix, out);
        prefix.pop();
    }
}

/// Composition at `rank` in the same lexicographic order that
/// `enumerate_compositions` emits.
fn unrank_composition(mut rank: u128, units: u64, parts: u64) -> Result<Vec<u64>, PriorError> {
    let mut out = Vec::with_capacity(parts as usize);
    let mut remaining = units;
    for pos in 0..parts {
        if pos == parts - 1 {
            out.push(remaining);
            break;
        }
        let tail = parts - pos - 1;
        let mut chosen = None;
        for k in 0..=remaining {
            let block = composition_count(remaining - k, tail)?;
            if rank < block {
                chosen = Some(k);
                break;
            }
            rank -= block;
        }
        let k = chosen.ok_or(PriorError::SieveTooLarge)?;
        out.push(k);
        remaining -= k;
    }
    Ok(out)
}

/// Expands super-cell lattice counts into a base-grid density.
fn expand_composition(
    grid: Grid,
    resolution: usize,
    composition: &[u64],
) -> Result<GridDensity, PriorError> {
    let units = (resolution * resolution) as f64;
    let cells_per_super = grid.bins() / resolution;
    let mut mass = Vec::with_capacity(grid.bins());
    for &k in composition {
        let per_cell = k as f64 / units / cells_per_super as f64;
        mass.extend(std::iter::repeat(per_cell).take(cells_per_super));
    }
    // lattice masses are exact dyadic-free ratios; renormalize the tiny
    // division drift before the sum-to-one check
    let total: f64 = mass.iter().sum();
    for slot in &mut mass {
        *slot /= total;
    }
    Ok(GridDensity::from_mass(grid, mass)?)
}
