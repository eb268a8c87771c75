//! Martingale diagnostics and convergence-bound reports over run traces.
//!
//! Each sequential run yields two centered series: the log marginal-ratio
//! increments centered by the predictive KL term, and the square-root
//! restricted-numerator increments centered by the predictive Hellinger
//! term. Both have conditional mean zero, which is testable exactly on
//! enumerable sample spaces and via Monte Carlo otherwise. The report
//! builders turn replicated runs into [`BoundReport`] rows: one bound per
//! row, with the orientation `satisfied <=> lhs <= rhs` (strict `<` for
//! the PROP2 existence summary and PROP3 decrease rows, as documented on
//! the producing functions).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{cesaro_average, divergences, DensityError, GridDensity};
use crate::engine::{EngineError, RunTrace, SubsetMask};
use crate::prior::{EpsilonSequence, FinitePrior, PriorError};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("trace was recorded at likelihood power {got}, expected {want}")]
    WrongKappa { got: f64, want: f64 },
    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),
    #[error("trace has no mask at index {0}")]
    MaskIndex(usize),
    #[error("mask carries zero prior mass")]
    EmptyMaskTrace,
    #[error("mask was annihilated mid-run; restricted series undefined")]
    AnnihilatedMask,
    #[error("need at least {need} replications, got {got}")]
    TooFewReplications { got: usize, need: usize },
    #[error("beta must lie in (0, 1/2), got {0}")]
    BadBeta(f64),
    #[error("{0}")]
    Misuse(String),
    #[error("trace lacks full predictive mass vectors")]
    MissingFullPredictives,
    #[error("sample vectors have inconsistent lengths")]
    RaggedSamples,
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Which bound a report row refers to; the token form is used in file
/// output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BoundKind {
    Lemma1,
    Prop1Avg,
    Prop1Cesaro,
    Lemma2,
    Prop2,
    Prop3,
    Union,
}

impl BoundKind {
    pub fn token(&self) -> &'static str {
        match self {
            BoundKind::Lemma1 => "LEMMA1",
            BoundKind::Prop1Avg => "PROP1_AVG",
            BoundKind::Prop1Cesaro => "PROP1_CESARO",
            BoundKind::Lemma2 => "LEMMA2",
            BoundKind::Prop2 => "PROP2",
            BoundKind::Prop3 => "PROP3",
            BoundKind::Union => "UNION",
        }
    }
}

/// One evaluated bound. `satisfied` is always reproducible from
/// `(lhs, rhs, mc_std_err)`; `flag` carries annotations (vacuous support,
/// failed preconditions) that never feed back into `satisfied`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: BoundKind,
    pub n: u64,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    pub mc_std_err: Option<f64>,
    pub replications: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flag: Option<String>,
}

/// Centered log marginal-ratio increments of a genuine-posterior run:
/// `x[i] = (log I_i - log I_{i-1}) + K(truth, predictive_{i-1})`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlMartingaleSeries {
    pub x: Vec<f64>,
    pub kl_terms: Vec<f64>,
    pub partial_sums: Vec<f64>,
    /// Set when some predictive had infinite KL from the truth.
    pub flagged: bool,
}

/// Centered square-root restricted-numerator increments:
/// `x[i] = (L_i / L_{i-1})^{1/2} - 1 + h(truth, restricted predictive)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HellingerMartingaleArray {
    pub x: Vec<f64>,
    pub h_terms: Vec<f64>,
    pub m_nn: f64,
}

/// Builds the KL-centered series from a power-one trace.
pub fn kl_martingale(trace: &RunTrace) -> Result<KlMartingaleSeries, DiagnosticsError> {
    if trace.kappa != 1.0 {
        return Err(DiagnosticsError::WrongKappa {
            got: trace.kappa,
            want: 1.0,
        });
    }
    let n = trace.len();
    if trace.log_i.len() != n + 1 || trace.predictive_before.len() != n {
        return Err(DiagnosticsError::IncompleteTrace(
            "log marginal ratios and predictive divergences must cover every step".into(),
        ));
    }
    let mut x = Vec::with_capacity(n);
    let mut kl_terms = Vec::with_capacity(n);
    let mut partial_sums = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut flagged = false;
    for i in 0..n {
        let kl = trace.predictive_before[i].kl;
        if kl.is_infinite() {
            flagged = true;
        }
        let xi = (trace.log_i[i + 1] - trace.log_i[i]) + kl;
        acc += xi;
        x.push(xi);
        kl_terms.push(kl);
        partial_sums.push(acc);
    }
    Ok(KlMartingaleSeries {
        x,
        kl_terms,
        partial_sums,
        flagged,
    })
}

/// Builds the Hellinger-centered array for the mask at `mask_index`, using
/// the first `upto_n` steps of the trace.
pub fn hellinger_martingale(
    trace: &RunTrace,
    mask_index: usize,
    upto_n: usize,
) -> Result<HellingerMartingaleArray, DiagnosticsError> {
    let mt = trace
        .masks
        .get(mask_index)
        .ok_or(DiagnosticsError::MaskIndex(mask_index))?;
    if mt.log_l.first().copied() == Some(f64::NEG_INFINITY) {
        return Err(DiagnosticsError::EmptyMaskTrace);
    }
    if upto_n > trace.len() || mt.restricted_before.len() < upto_n {
        return Err(DiagnosticsError::IncompleteTrace(format!(
            "mask trace records {} of {} steps, asked for {upto_n}",
            mt.restricted_before.len(),
            trace.len()
        )));
    }
    if mt.annihilated && mt.restricted_before[..upto_n].iter().any(|d| d.h.is_nan()) {
        return Err(DiagnosticsError::AnnihilatedMask);
    }
    let mut x = Vec::with_capacity(upto_n);
    let mut h_terms = Vec::with_capacity(upto_n);
    let mut m_nn = 0.0;
    for i in 0..upto_n {
        let ratio_sqrt = (0.5 * (mt.log_l[i + 1] - mt.log_l[i])).exp();
        let h = mt.restricted_before[i].h;
        let xi = ratio_sqrt - 1.0 + h;
        m_nn += xi;
        x.push(xi);
        h_terms.push(h);
    }
    Ok(HellingerMartingaleArray { x, h_terms, m_nn })
}

/// Running average of the restricted-predictive Hellinger terms over the
/// first `n` steps, paired with the comparison scale `n^(-beta)`.
pub fn condition1_statistic(
    trace: &RunTrace,
    mask_index: usize,
    n: usize,
    beta: f64,
) -> Result<(f64, f64), DiagnosticsError> {
    if !(beta > 0.0 && beta < 0.5) {
        return Err(DiagnosticsError::BadBeta(beta));
    }
    let mt = trace
        .masks
        .get(mask_index)
        .ok_or(DiagnosticsError::MaskIndex(mask_index))?;
    if n == 0 || n > mt.restricted_before.len() {
        return Err(DiagnosticsError::IncompleteTrace(format!(
            "mask trace has {} steps, asked for {n}",
            mt.restricted_before.len()
        )));
    }
    let statistic = mt.restricted_before[..n].iter().map(|d| d.h).sum::<f64>() / n as f64;
    Ok((statistic, (n as f64).powf(-beta)))
}

/// Candidates whose Hellinger distance from the truth exceeds
/// `min_hellinger` (`H^2 = 2h`).
pub fn hellinger_shell_mask(
    prior: &FinitePrior,
    truth: &GridDensity,
    min_hellinger: f64,
) -> Result<SubsetMask, DiagnosticsError> {
    let included = prior
        .candidates()
        .iter()
        .map(|c| {
            let d = divergences(truth, c)?;
            Ok((2.0 * d.h).sqrt() > min_hellinger)
        })
        .collect::<Result<Vec<bool>, DensityError>>()?;
    Ok(SubsetMask::new(included))
}

/// Exponential lower bound on the expected log marginal ratio:
/// `lhs = -mean(log I_n)` against `rhs = (c+1) n eps_n^2`, satisfied when
/// `lhs <= rhs + 4 SE`.
pub fn lemma1_report(
    log_i_samples: &[f64],
    c: f64,
    eps: &EpsilonSequence,
    n: u64,
) -> Result<BoundReport, DiagnosticsError> {
    const MIN_REPS: usize = 30;
    if log_i_samples.len() < MIN_REPS {
        return Err(DiagnosticsError::TooFewReplications {
            got: log_i_samples.len(),
            need: MIN_REPS,
        });
    }
    let lhs = -stats::mean(log_i_samples);
    let rhs = (c + 1.0) * n as f64 * eps.sq_at(n);
    let se = stats::std_err(log_i_samples);
    Ok(BoundReport {
        bound: BoundKind::Lemma1,
        n,
        lhs,
        rhs,
        satisfied: lhs <= rhs + 4.0 * se,
        mc_std_err: Some(se),
        replications: log_i_samples.len() as u64,
        flag: None,
    })
}

/// Per-replication ingredients for the predictive-KL averages.
#[derive(Debug, Clone, Copy)]
pub struct Prop1Sample {
    /// Average predictive KL over the first `n` steps.
    pub avg_kl: f64,
    /// KL of the running-average predictive from the truth; requires full
    /// predictive recording.
    pub cesaro_kl: Option<f64>,
}

/// Extracts a [`Prop1Sample`] from the first `n` steps of a trace.
pub fn prop1_sample(
    trace: &RunTrace,
    truth: &GridDensity,
    n: usize,
    want_cesaro: bool,
) -> Result<Prop1Sample, DiagnosticsError> {
    if n == 0 || n > trace.len() {
        return Err(DiagnosticsError::IncompleteTrace(format!(
            "trace has {} steps, asked for {n}",
            trace.len()
        )));
    }
    let avg_kl = trace.predictive_before[..n].iter().map(|d| d.kl).sum::<f64>() / n as f64;
    let cesaro_kl = if want_cesaro {
        let masses = trace
            .predictive_mass_before
            .as_ref()
            .ok_or(DiagnosticsError::MissingFullPredictives)?;
        let grid = *truth.grid();
        let densities = masses[..n]
            .iter()
            .map(|m| GridDensity::from_mass(grid, m.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let avg = cesaro_average(&densities)?;
        Some(divergences(truth, &avg)?.kl)
    } else {
        None
    };
    Ok(Prop1Sample { avg_kl, cesaro_kl })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prop1Mode {
    Avg,
    Cesaro,
}

/// Average predictive KL against `(c+1) eps_n^2`, either as the
/// step-average (AVG) or through the running-average density (CESARO).
/// CESARO additionally cross-checks convexity against the AVG estimate;
/// a violation is flagged, never silently absorbed.
pub fn prop1_report(
    samples: &[Prop1Sample],
    c: f64,
    eps: &EpsilonSequence,
    n: u64,
    mode: Prop1Mode,
) -> Result<BoundReport, DiagnosticsError> {
    if samples.is_empty() {
        return Err(DiagnosticsError::TooFewReplications { got: 0, need: 1 });
    }
    let avg: Vec<f64> = samples.iter().map(|s| s.avg_kl).collect();
    let (bound, values, flag) = match mode {
        Prop1Mode::Avg => (BoundKind::Prop1Avg, avg, None),
        Prop1Mode::Cesaro => {
            let cesaro = samples
                .iter()
                .map(|s| s.cesaro_kl.ok_or(DiagnosticsError::MissingFullPredictives))
                .collect::<Result<Vec<f64>, _>>()?;
            let combined_se = stats::std_err(&cesaro) + stats::std_err(&avg);
            let flag = (stats::mean(&cesaro) > stats::mean(&avg) + 4.0 * combined_se)
                .then(|| "convexity-crosscheck-failed".to_string());
            (BoundKind::Prop1Cesaro, cesaro, flag)
        }
    };
    let lhs = stats::mean(&values);
    let rhs = (c + 1.0) * eps.sq_at(n);
    let se = stats::std_err(&values);
    Ok(BoundReport {
        bound,
        n,
        lhs,
        rhs,
        satisfied: lhs <= rhs + 4.0 * se,
        mc_std_err: Some(se),
        replications: samples.len() as u64,
        flag,
    })
}

/// Frequency of `log I_n < -c n eps_n^2` against the slack level.
/// Requires `c > kappa (c_support + 1)`, which covers both the power-one
/// and the half-power lower-bound statements.
pub fn lemma2_report(
    log_i_samples: &[f64],
    c_support: f64,
    eps: &EpsilonSequence,
    kappa: f64,
    c: f64,
    n: u64,
    slack: f64,
) -> Result<BoundReport, DiagnosticsError> {
    if c <= kappa * (c_support + 1.0) {
        return Err(DiagnosticsError::Misuse(format!(
            "lower-bound constant {c} must exceed kappa*(C+1) = {}",
            kappa * (c_support + 1.0)
        )));
    }
    if log_i_samples.is_empty() {
        return Err(DiagnosticsError::TooFewReplications { got: 0, need: 1 });
    }
    let threshold = -c * n as f64 * eps.sq_at(n);
    let violations = log_i_samples.iter().filter(|&&v| v < threshold).count();
    let r = log_i_samples.len();
    let lhs = violations as f64 / r as f64;
    let se = (lhs * (1.0 - lhs) / r as f64).sqrt();
    Ok(BoundReport {
        bound: BoundKind::Lemma2,
        n,
        lhs,
        rhs: slack,
        satisfied: lhs <= slack,
        mc_std_err: Some(se),
        replications: r as u64,
        flag: None,
    })
}

/// Checks that violation fractions are nonincreasing along the grid, up
/// to four pooled binomial standard errors per adjacent pair.
pub fn violation_fractions_nonincreasing(fractions: &[f64], replications: u64) -> bool {
    fractions.windows(2).all(|w| {
        let pooled = 0.5 * (w[0] + w[1]);
        let se_diff = (2.0 * pooled * (1.0 - pooled) / replications as f64).sqrt();
        w[1] <= w[0] + 4.0 * se_diff
    })
}

/// Per-replication ingredients for the restricted-posterior decay fit:
/// the log posterior-to-prior mass ratio of the masked set and the
/// condition-1 statistic, both at each grid sample size.
#[derive(Debug, Clone)]
pub struct Prop2Sample {
    pub log_ratio: Vec<f64>,
    pub condition1: Vec<f64>,
}

/// Extracts a [`Prop2Sample`] for the mask at `mask_index`.
pub fn prop2_sample(
    trace: &RunTrace,
    mask_index: usize,
    n_grid: &[u64],
    beta: f64,
) -> Result<Prop2Sample, DiagnosticsError> {
    let mt = trace
        .masks
        .get(mask_index)
        .ok_or(DiagnosticsError::MaskIndex(mask_index))?;
    let log_prior_mass = mt.log_l[0];
    if log_prior_mass == f64::NEG_INFINITY {
        return Err(DiagnosticsError::EmptyMaskTrace);
    }
    let mut log_ratio = Vec::with_capacity(n_grid.len());
    let mut condition1 = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let n = n as usize;
        if n > trace.len() {
            return Err(DiagnosticsError::IncompleteTrace(format!(
                "trace has {} steps, grid asks for {n}",
                trace.len()
            )));
        }
        log_ratio.push(mt.log_l[n] - trace.log_i[n] - log_prior_mass);
        condition1.push(condition1_statistic(trace, mask_index, n, beta)?.0);
    }
    Ok(Prop2Sample {
        log_ratio,
        condition1,
    })
}

pub struct Prop2Params {
    pub c_support: f64,
    pub d_separation: f64,
    pub beta: f64,
    pub bootstrap_seed: u64,
    pub bootstrap_rounds: usize,
}

/// Outcome of the restricted-posterior decay analysis.
#[derive(Debug, Clone)]
pub struct Prop2Outcome {
    /// Per grid size: lhs = median mass ratio, rhs = `exp(-kappa_hat n
    /// delta_n^2)`, satisfied when lhs <= rhs.
    pub per_n: Vec<BoundReport>,
    /// Rate existence: lhs = 0 against rhs = lower 95% confidence limit
    /// of the fitted decay exponent; satisfied when lhs < rhs (strict).
    pub summary: BoundReport,
    pub kappa_hat: f64,
    pub ci: (f64, f64),
    /// Fraction of replications meeting the separation precondition at
    /// every grid size.
    pub precondition_fraction: f64,
}

/// Fits the decay exponent of the masked posterior-to-prior mass ratio
/// against `n * delta_n^2`, `delta_n^2 = min(n^-beta, eps_n^2)`, with a
/// bootstrap confidence interval over replications.
pub fn prop2_reports(
    samples: &[Prop2Sample],
    eps: &EpsilonSequence,
    n_grid: &[u64],
    params: &Prop2Params,
) -> Result<Prop2Outcome, DiagnosticsError> {
    if params.d_separation <= (params.c_support + 1.0) / 2.0 {
        return Err(DiagnosticsError::Misuse(format!(
            "separation constant {} must exceed (C+1)/2 = {}",
            params.d_separation,
            (params.c_support + 1.0) / 2.0
        )));
    }
    if !(params.beta > 0.0 && params.beta < 0.5) {
        return Err(DiagnosticsError::BadBeta(params.beta));
    }
    if samples.len() < 2 || n_grid.len() < 2 {
        return Err(DiagnosticsError::TooFewReplications {
            got: samples.len().min(n_grid.len()),
            need: 2,
        });
    }
    if samples
        .iter()
        .any(|s| s.log_ratio.len() != n_grid.len() || s.condition1.len() != n_grid.len())
    {
        return Err(DiagnosticsError::RaggedSamples);
    }

    let met = samples
        .iter()
        .filter(|s| {
            s.condition1.iter().zip(n_grid.iter()).all(|(&stat, &n)| {
                stat >= params.d_separation * (n as f64).powf(-params.beta)
            })
        })
        .count();
    let precondition_fraction = met as f64 / samples.len() as f64;
    let flag = (precondition_fraction < 0.95).then(|| "precondition-failed".to_string());

    let x: Vec<f64> = n_grid
        .iter()
        .map(|&n| {
            let delta_sq = (n as f64).powf(-params.beta).min(eps.sq_at(n));
            n as f64 * delta_sq
        })
        .collect();
    let medians: Vec<f64> = (0..n_grid.len())
        .map(|k| stats::median(samples.iter().map(|s| s.log_ratio[k])))
        .collect();
    let kappa_hat = -stats::ols_slope(&x, &medians);

    let mut rng = ChaCha8Rng::seed_from_u64(params.bootstrap_seed);
    let mut boot = Vec::with_capacity(params.bootstrap_rounds);
    for _ in 0..params.bootstrap_rounds {
        let picks: Vec<usize> = (0..samples.len())
            .map(|_| rng.gen_range(0..samples.len()))
            .collect();
        let med: Vec<f64> = (0..n_grid.len())
            .map(|k| stats::median(picks.iter().map(|&r| samples[r].log_ratio[k])))
            .collect();
        boot.push(-stats::ols_slope(&x, &med));
    }
    boot.sort_by(|a, b| a.total_cmp(b));
    let ci = (
        stats::quantile_sorted(&boot, 0.025),
        stats::quantile_sorted(&boot, 0.975),
    );
    let boot_sd = stats::sample_sd(&boot);

    let per_n = n_grid
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let lhs = medians[k].exp();
            let rhs = (-kappa_hat * x[k]).exp();
            BoundReport {
                bound: BoundKind::Prop2,
                n,
                lhs,
                rhs,
                satisfied: lhs <= rhs,
                mc_std_err: None,
                replications: samples.len() as u64,
                flag: flag.clone(),
            }
        })
        .collect();
    let summary = BoundReport {
        bound: BoundKind::Prop2,
        n: *n_grid.last().unwrap(),
        lhs: 0.0,
        rhs: ci.0,
        satisfied: 0.0 < ci.0,
        mc_std_err: Some(boot_sd),
        replications: samples.len() as u64,
        flag,
    };
    Ok(Prop2Outcome {
        per_n,
        summary,
        kappa_hat,
        ci,
        precondition_fraction,
    })
}

/// Closed-form layer of the pseudo-posterior separation bound: for each
/// grid size, the exact expected masked numerator
/// `sum_j w_j affinity_j^n` over the shell `H > M eps_n` against
/// `exp(-M^2 n eps_n^2)`. No Monte Carlo error; `replications` is zero.
pub fn prop3_exact_reports(
    prior: &FinitePrior,
    truth: &GridDensity,
    eps: &EpsilonSequence,
    m_sq: f64,
    c_support: f64,
    n_grid: &[u64],
) -> Result<Vec<BoundReport>, DiagnosticsError> {
    if m_sq <= (c_support + 1.0) / 2.0 {
        return Err(DiagnosticsError::Misuse(format!(
            "separation constant squared {m_sq} must exceed (C+1)/2 = {}",
            (c_support + 1.0) / 2.0
        )));
    }
    let weights = prior.weights();
    let affinities = prior
        .candidates()
        .iter()
        .map(|candidate| Ok(divergences(truth, candidate)?.affinity))
        .collect::<Result<Vec<f64>, DensityError>>()?;
    let m = m_sq.sqrt();
    n_grid
        .iter()
        .map(|&n| {
            let threshold = m * eps.at(n);
            let mut expected = 0.0;
            for (&w, &affinity) in weights.iter().zip(affinities.iter()) {
                let hellinger = (2.0 * (1.0 - affinity)).sqrt();
                if hellinger > threshold && affinity > 0.0 {
                    expected += w * (n as f64 * affinity.ln()).exp();
                }
            }
            let rhs = (-m_sq * n as f64 * eps.sq_at(n)).exp();
            Ok(BoundReport {
                bound: BoundKind::Prop3,
                n,
                lhs: expected,
                rhs,
                satisfied: expected <= rhs,
                mc_std_err: None,
                replications: 0,
                flag: None,
            })
        })
        .collect()
}

/// Monte Carlo layer of the pseudo-posterior separation bound: the mean
/// masked pseudo-posterior mass must strictly decrease along the grid.
/// Each row compares the mean at `n` (lhs) against the mean at the
/// previous grid size (rhs); the first row is trivially satisfied.
pub fn prop3_mc_reports(
    mass_samples: &[Vec<f64>],
    n_grid: &[u64],
) -> Result<Vec<BoundReport>, DiagnosticsError> {
    if mass_samples.len() != n_grid.len() {
        return Err(DiagnosticsError::RaggedSamples);
    }
    let mut previous = f64::INFINITY;
    let mut out = Vec::with_capacity(n_grid.len());
    for (&n, samples) in n_grid.iter().zip(mass_samples.iter()) {
        if samples.is_empty() {
            return Err(DiagnosticsError::TooFewReplications { got: 0, need: 1 });
        }
        let lhs = stats::mean(samples);
        out.push(BoundReport {
            bound: BoundKind::Prop3,
            n,
            lhs,
            rhs: previous,
            satisfied: lhs < previous,
            mc_std_err: Some(stats::std_err(samples)),
            replications: samples.len() as u64,
            flag: None,
        });
        previous = lhs;
    }
    Ok(out)
}

/// Subadditivity of posterior mass over a finite union: mean mass of the
/// union (lhs) against the summed mean masses of the parts (rhs), allowed
/// four standard errors of the pathwise difference.
pub fn union_report(
    union_masses: &[f64],
    part_mass_sums: &[f64],
    n: u64,
) -> Result<BoundReport, DiagnosticsError> {
    if union_masses.is_empty() || union_masses.len() != part_mass_sums.len() {
        return Err(DiagnosticsError::RaggedSamples);
    }
    let diffs: Vec<f64> = part_mass_sums
        .iter()
        .zip(union_masses.iter())
        .map(|(&s, &u)| s - u)
        .collect();
    let lhs = stats::mean(union_masses);
    let rhs = stats::mean(part_mass_sums);
    let se = stats::std_err(&diffs);
    Ok(BoundReport {
        bound: BoundKind::Union,
        n,
        lhs,
        rhs,
        satisfied: lhs <= rhs + 4.0 * se,
        mc_std_err: Some(se),
        replications: union_masses.len() as u64,
        flag: None,
    })
}

/// Small numeric helpers shared by the report builders and test suites.
pub mod stats {
    pub fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    /// Sample standard deviation (n-1 denominator); zero for singletons.
    pub fn sample_sd(xs: &[f64]) -> f64 {
        if xs.len() < 2 {
            return 0.0;
        }
        let m = mean(xs);
        let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
        (ss / (xs.len() - 1) as f64).sqrt()
    }

    /// Standard error of the mean.
    pub fn std_err(xs: &[f64]) -> f64 {
        sample_sd(xs) / (xs.len() as f64).sqrt()
    }

    pub fn median(values: impl Iterator<Item = f64>) -> f64 {
        let mut v: Vec<f64> = values.collect();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// Empirical quantile of an ascending-sorted slice (nearest rank).
    pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
        let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
        sorted[idx.min(sorted.len() - 1)]
    }

    /// Ordinary least-squares slope of y on x.
    pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
        let mx = mean(x);
        let my = mean(y);
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for (&xi, &yi) in x.iter().zip(y.iter()) {
            sxx += (xi - mx) * (xi - mx);
            sxy += (xi - mx) * (yi - my);
        }
        sxy / sxx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::Grid;
    use crate::engine::{MaskSpec, PosteriorState, Tracer};
    use crate::prior::FinitePrior;
    use std::sync::Arc;

    fn unit_grid(bins: usize) -> Grid {
        Grid::new(0.0, 1.0, bins).unwrap()
    }

    fn run_trace(
        prior: Arc<FinitePrior>,
        truth: &GridDensity,
        masks: Vec<MaskSpec>,
        data: &[f64],
    ) -> RunTrace {
        let state = PosteriorState::init(prior, 1.0, Some(truth.clone())).unwrap();
        let mut tracer = Tracer::new(state, masks, false).unwrap();
        for &y in data {
            tracer.absorb(y).unwrap();
        }
        tracer.into_trace()
    }

    #[test]
    fn kl_series_vanishes_when_prior_is_truth() {
        let g = unit_grid(2);
        let truth = GridDensity::from_mass(g, vec![0.25, 0.75]).unwrap();
        let prior = Arc::new(FinitePrior::new(vec![truth.clone()], vec![0.0]).unwrap());
        let trace = run_trace(prior, &truth, vec![], &[0.1, 0.9, 0.6, 0.3]);
        let series = kl_martingale(&trace).unwrap();
        for (&x, &kl) in series.x.iter().zip(series.kl_terms.iter()) {
            assert!(x.abs() < 1e-12);
            assert!(kl.abs() < 1e-12);
        }
        assert!(!series.flagged);
    }

    #[test]
    fn kl_series_reconstructs_log_marginal_ratio() {
        let g = unit_grid(2);
        let truth = GridDensity::from_mass(g, vec![0.25, 0.75]).unwrap();
        let other = GridDensity::from_mass(g, vec![0.5, 0.5]).unwrap();
        let prior = Arc::new(
            FinitePrior::new(vec![truth.clone(), other], vec![0.5f64.ln(), 0.5f64.ln()])
                .unwrap(),
        );
        let trace = run_trace(prior, &truth, vec![], &[0.7, 0.2, 0.9, 0.4, 0.8]);
        let series = kl_martingale(&trace).unwrap();
        let reconstructed =
            series.partial_sums.last().unwrap() - series.kl_terms.iter().sum::<f64>();
        assert!((reconstructed - trace.log_i.last().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kl_series_requires_power_one() {
        let g = unit_grid(2);
        let truth = GridDensity::from_mass(g, vec![0.25, 0.75]).unwrap();
        let prior = Arc::new(FinitePrior::new(vec![truth.clone()], vec![0.0]).unwrap());
        let state = PosteriorState::init(prior, 0.5, Some(truth)).unwrap();
        let mut tracer = Tracer::new(state, vec![], false).unwrap();
        tracer.absorb(0.5).unwrap();
        assert!(matches!(
            kl_martingale(tracer.trace()),
            Err(DiagnosticsError::WrongKappa { .. })
        ));
    }

    #[test]
    fn hellinger_array_vanishes_for_all_mask_over_truth_prior() {
        let g = unit_grid(2);
        let truth = GridDensity::from_mass(g, vec![0.25, 0.75]).unwrap();
        let prior = Arc::new(FinitePrior::new(vec![truth.clone()], vec![0.0]).unwrap());
        let trace = run_trace(
            prior,
            &truth,
            vec![MaskSpec::full("all", SubsetMask::all(1))],
            &[0.1, 0.9, 0.6],
        );
        let array = hellinger_martingale(&trace, 0, 3).unwrap();
        for &x in &array.x {
            assert!(x.abs() < 1e-12);
        }
        assert!(array.m_nn.abs() < 1e-12);
    }

    #[test]
    fn hellinger_array_rejects_empty_mask() {
        let g = unit_grid(2);
        let truth = GridDensity::from_mass(g, vec![0.25, 0.75]).unwrap();
        let prior = Arc::new(FinitePrior::new(vec![truth.clone()], vec![0.0]).unwrap());
        let trace = run_trace(
            prior,
            &truth,
            vec![MaskSpec::full("none", SubsetMask::none(1))],
            &[0.1],
        );
        assert!(matches!(
            hellinger_martingale(&trace, 0, 1),
            Err(DiagnosticsError::EmptyMaskTrace)
        ));
    }

    #[test]
    fn condition1_singleton_mask_is_constant() {
        // restricted predictive of a singleton mask is that candidate, so
        // the statistic equals its Hellinger term at every n
        let g = unit_grid(2);
        let truth = GridDensity::from_mass(g, vec![0.5, 0.5]).unwrap();
        let far = GridDensity::from_mass(g, vec![0.25, 0.75]).unwrap();
        let h = divergences(&truth, &far).unwrap().h;
        let prior = Arc::new(
            FinitePrior::new(
                vec![truth.clone(), far],
                vec![0.5f64.ln(), 0.5f64.ln()],
            )
            .unwrap(),
        );
        let trace = run_trace(
            prior,
            &truth,
            vec![MaskSpec::full("far", SubsetMask::from_indices(2, &[1]))],
            &[0.7, 0.1, 0.4, 0.9],
        );
        for n in 1..=4 {
            let (stat, scale) = condition1_statistic(&trace, 0, n, 0.4).unwrap();
            assert!((stat - h).abs() < 1e-12);
            assert!((scale - (n as f64).powf(-0.4)).abs() < 1e-15);
        }
        assert!((h - 0.034074).abs() < 1e-6);
        assert!(matches!(
            condition1_statistic(&trace, 0, 4, 0.6),
            Err(DiagnosticsError::BadBeta(_))
        ));
    }

    #[test]
    fn lemma1_report_trivial_prior() {
        let eps = EpsilonSequence::new(1.0, 0.5, 1.0).unwrap();
        let samples = vec![0.0; 50];
        let report = lemma1_report(&samples, 1.0, &eps, 100).unwrap();
        assert_eq!(report.lhs, 0.0);
        assert!(report.satisfied);
        assert!(report.rhs > 0.0);
        assert!(matches!(
            lemma1_report(&samples[..10], 1.0, &eps, 100),
            Err(DiagnosticsError::TooFewReplications { .. })
        ));
    }

    #[test]
    fn lemma2_misuse_gate() {
        let eps = EpsilonSequence::new(1.0, 0.5, 1.0).unwrap();
        let samples = vec![0.0; 40];
        // kappa = 1 requires c > C + 1
        assert!(matches!(
            lemma2_report(&samples, 1.0, &eps, 1.0, 1.5, 100, 0.05),
            Err(DiagnosticsError::Misuse(_))
        ));
        let report = lemma2_report(&samples, 1.0, &eps, 1.0, 2.5, 100, 0.05).unwrap();
        assert_eq!(report.lhs, 0.0);
        assert!(report.satisfied);
        // kappa = 1/2 requires c > (C+1)/2
        assert!(lemma2_report(&samples, 1.0, &eps, 0.5, 0.9, 100, 0.05).is_err());
        assert!(lemma2_report(&samples, 1.0, &eps, 0.5, 1.5, 100, 0.05).is_ok());
    }

    #[test]
    fn lemma2_huge_constant_never_violated() {
        let eps = EpsilonSequence::new(1.0, 0.5, 1.0).unwrap();
        let samples: Vec<f64> = (0..40).map(|i| -(i as f64)).collect();
        let report = lemma2_report(&samples, 1.0, &eps, 1.0, 1e6, 100, 0.05).unwrap();
        assert_eq!(report.lhs, 0.0);
        assert!(report.satisfied);
    }

    #[test]
    fn violation_monotonicity_helper() {
        assert!(violation_fractions_nonincreasing(&[0.0, 0.0, 0.0], 500));
        assert!(violation_fractions_nonincreasing(&[0.1, 0.05, 0.0], 500));
        // a tiny bump within binomial noise is tolerated
        assert!(violation_fractions_nonincreasing(&[0.0, 0.002], 500));
        assert!(!violation_fractions_nonincreasing(&[0.0, 0.2], 500));
    }

    #[test]
    fn prop2_decay_on_synthetic_geometric_ratios() {
        // log ratio = -3 * n * delta_n^2 plus small replication noise
        let eps = EpsilonSequence::new(1.0, 0.5, 1.0).unwrap();
        let n_grid = [50u64, 100, 200, 400];
        let beta = 0.4;
        let samples: Vec<Prop2Sample> = (0..60)
            .map(|r| {
                let noise = (r as f64 - 30.0) / 100.0;
                let log_ratio = n_grid
                    .iter()
                    .map(|&n| {
                        let delta_sq = (n as f64).powf(-beta).min(eps.sq_at(n));
                        -3.0 * n as f64 * delta_sq + noise
                    })
                    .collect();
                Prop2Sample {
                    log_ratio,
                    condition1: vec![0.5; n_grid.len()],
                }
            })
            .collect();
        let params = Prop2Params {
            c_support: 1.0,
            d_separation: 1.1,
            beta,
            bootstrap_seed: 7,
            bootstrap_rounds: 200,
        };
        let outcome = prop2_reports(&samples, &eps, &n_grid, &params).unwrap();
        assert!((outcome.kappa_hat - 3.0).abs() < 0.05);
        assert!(outcome.summary.satisfied);
        assert_eq!(outcome.precondition_fraction, 1.0);
        assert!(outcome.per_n.iter().all(|r| r.flag.is_none()));

        // insufficient separation constant is a misuse error
        let bad = Prop2Params {
            d_separation: 0.9,
            ..params
        };
        assert!(prop2_reports(&samples, &eps, &n_grid, &bad).is_err());
    }

    #[test]
    fn prop2_flags_failed_precondition() {
        let eps = EpsilonSequence::new(1.0, 0.5, 1.0).unwrap();
        let n_grid = [50u64, 100];
        let samples: Vec<Prop2Sample> = (0..20)
            .map(|_| Prop2Sample {
                log_ratio: vec![-1.0, -2.0],
                condition1: vec![0.0, 0.0],
            })
            .collect();
        let params = Prop2Params {
            c_support: 1.0,
            d_separation: 1.1,
            beta: 0.4,
            bootstrap_seed: 7,
            bootstrap_rounds: 50,
        };
        let outcome = prop2_reports(&samples, &eps, &n_grid, &params).unwrap();
        assert_eq!(outcome.precondition_fraction, 0.0);
        assert_eq!(outcome.summary.flag.as_deref(), Some("precondition-failed"));
    }

    #[test]
    fn prop3_exact_single_far_candidate() {
        let g = unit_grid(4);
        let truth = GridDensity::from_mass(g, vec![0.4, 0.4, 0.1, 0.1]).unwrap();
        let far = GridDensity::from_mass(g, vec![0.02, 0.02, 0.48, 0.48]).unwrap();
        let affinity = divergences(&truth, &far).unwrap().affinity;
        let prior = FinitePrior::new(
            vec![truth.clone(), far],
            vec![0.9f64.ln(), 0.1f64.ln()],
        )
        .unwrap();
        let eps = EpsilonSequence::new(1.0, 0.5, 1.0).unwrap();
        let n_grid = [100u64, 200, 400];
        let reports =
            prop3_exact_reports(&prior, &truth, &eps, 2.0, 1.0, &n_grid).unwrap();
        for (report, &n) in reports.iter().zip(n_grid.iter()) {
            // the shell holds exactly the far candidate at these sizes
            let expect = 0.1 * (n as f64 * affinity.ln()).exp();
            assert!((report.lhs - expect).abs() <= 1e-12 * expect.max(1.0));
            assert!(report.satisfied, "n = {n}");
            assert_eq!(report.replications, 0);
        }
        // gate: M^2 must exceed (C+1)/2
        assert!(prop3_exact_reports(&prior, &truth, &eps, 0.9, 1.0, &n_grid).is_err());
    }

    #[test]
    fn prop3_exact_empty_shell_is_trivially_satisfied() {
        let g = unit_grid(2);
        let truth = GridDensity::from_mass(g, vec![0.5, 0.5]).unwrap();
        let prior = FinitePrior::new(vec![truth.clone()], vec![0.0]).unwrap();
        let eps = EpsilonSequence::new(1.0, 0.5, 1.0).unwrap();
        let reports = prop3_exact_reports(&prior, &truth, &eps, 2.0, 1.0, &[100]).unwrap();
        assert_eq!(reports[0].lhs, 0.0);
        assert!(reports[0].satisfied);
    }

    #[test]
    fn prop3_mc_strict_decrease() {
        let samples = vec![vec![0.5, 0.4], vec![0.1, 0.2], vec![0.05, 0.01]];
        let reports = prop3_mc_reports(&samples, &[100, 200, 400]).unwrap();
        assert!(reports.iter().all(|r| r.satisfied));
        let flat = vec![vec![0.1, 0.1], vec![0.1, 0.1]];
        let reports = prop3_mc_reports(&flat, &[100, 200]).unwrap();
        assert!(reports[0].satisfied);
        assert!(!reports[1].satisfied);
    }

    #[test]
    fn union_report_additive_for_disjoint_parts() {
        let union = vec![0.3, 0.25, 0.4];
        let report = union_report(&union, &union.clone(), 100).unwrap();
        assert!(report.satisfied);
        assert_eq!(report.lhs, report.rhs);
    }

    #[test]
    fn shell_mask_thresholds_on_hellinger_distance() {
        let g = unit_grid(2);
        let truth = GridDensity::from_mass(g, vec![0.5, 0.5]).unwrap();
        let near = GridDensity::from_mass(g, vec![0.45, 0.55]).unwrap();
        let far = GridDensity::from_mass(g, vec![0.02, 0.98]).unwrap();
        let prior = FinitePrior::from_unnormalized(
            vec![truth.clone(), near, far],
            vec![0.0, 0.0, 0.0],
        )
        .unwrap();
        let mask = hellinger_shell_mask(&prior, &truth, 0.3).unwrap();
        assert_eq!(mask.included(), &[false, false, true]);
    }

    #[test]
    fn stats_helpers() {
        assert_eq!(stats::mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(stats::median([1.0, 3.0, 2.0].into_iter()), 2.0);
        assert_eq!(stats::median([1.0, 2.0, 3.0, 4.0].into_iter()), 2.5);
        let slope = stats::ols_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((slope - 2.0).abs() < 1e-12);
        assert!((stats::sample_sd(&[1.0, 1.0, 1.0]) - 0.0).abs() < 1e-15);
    }
}
