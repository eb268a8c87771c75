//! Log-space sequential posterior computation over a finite prior.
//!
//! A [`PosteriorState`] absorbs observations one at a time, tracking each
//! candidate's cumulative log likelihood. Posterior weights are the
//! softmax of `log_weight + kappa * log_lik`, where the likelihood power
//! `kappa = 1` gives the genuine posterior and `kappa < 1` the
//! fractional-power pseudo-posterior. When the data-generating density is
//! registered, the state also exposes the log marginal likelihood ratio
//! (the posterior normalizer relative to the truth) and its restriction
//! to candidate subsets. All sums run through log-sum-exp with max
//! subtraction; likelihood ratios are never formed multiplicatively.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{divergences, mixture, DensityError, Divergences, GridDensity};
use crate::log_sum_exp;
use crate::prior::{FinitePrior, PriorError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("likelihood power must lie in (0, 1], got {0}")]
    KappaOutOfRange(f64),
    #[error("reference density lives on a different grid than the prior")]
    GridMismatch,
    #[error("observation {y} has zero density under the registered truth")]
    InvalidTruth { y: f64 },
    #[error("operation requires a registered true density")]
    MissingTruth,
    #[error("every candidate has been annihilated by the data")]
    DegeneratePosterior,
    #[error("restriction to a zero-mass subset")]
    EmptyRestriction,
    #[error("mask has {got} entries for {want} candidates")]
    MaskLength { got: usize, want: usize },
    #[error("log likelihood vector has {got} entries for {want} candidates")]
    LogLikLength { got: usize, want: usize },
    #[error("log likelihood entry {index} is {value}; must be finite or -inf")]
    BadLogLik { index: usize, value: f64 },
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Subset of prior candidates, by inclusion flag. Mask indices stay
/// aligned with the prior across a whole run (annihilated candidates keep
/// their slot with zero weight).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetMask {
    included: Vec<bool>,
}

impl SubsetMask {
    pub fn new(included: Vec<bool>) -> Self {
        SubsetMask { included }
    }

    pub fn all(len: usize) -> Self {
        SubsetMask {
            included: vec![true; len],
        }
    }

    pub fn none(len: usize) -> Self {
        SubsetMask {
            included: vec![false; len],
        }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut included = vec![false; len];
        for &j in indices {
            included[j] = true;
        }
        SubsetMask { included }
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn count_included(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    pub fn is_included(&self, j: usize) -> bool {
        self.included[j]
    }

    pub fn included(&self) -> &[bool] {
        &self.included
    }

    pub fn union(&self, other: &SubsetMask) -> Result<SubsetMask, EngineError> {
        if self.len() != other.len() {
            return Err(EngineError::MaskLength {
                got: other.len(),
                want: self.len(),
            });
        }
        Ok(SubsetMask {
            included: self
                .included
                .iter()
                .zip(other.included.iter())
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }

    pub fn is_disjoint(&self, other: &SubsetMask) -> bool {
        self.included
            .iter()
            .zip(other.included.iter())
            .all(|(&a, &b)| !(a && b))
    }
}

/// Sequential posterior state at likelihood power `kappa`.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    prior: Arc<FinitePrior>,
    kappa: f64,
    n: u64,
    log_lik: Vec<f64>,
    log_lik_star: f64,
    truth: Option<GridDensity>,
}

impl PosteriorState {
    /// Fresh state with no observations absorbed. The truth, when given,
    /// must live on the prior's grid; it enables the marginal-ratio
    /// operations.
    pub fn init(
        prior: Arc<FinitePrior>,
        kappa: f64,
        truth: Option<GridDensity>,
    ) -> Result<Self, EngineError> {
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(EngineError::KappaOutOfRange(kappa));
        }
        if let Some(t) = &truth {
            if t.grid() != prior.grid() {
                return Err(EngineError::GridMismatch);
            }
        }
        let m = prior.len();
        Ok(PosteriorState {
            prior,
            kappa,
            n: 0,
            log_lik: vec![0.0; m],
            log_lik_star: 0.0,
            truth,
        })
    }

    pub fn prior(&self) -> &FinitePrior {
        &self.prior
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn truth(&self) -> Option<&GridDensity> {
        self.truth.as_ref()
    }

    pub fn log_lik(&self) -> &[f64] {
        &self.log_lik
    }

    /// Absorbs one observation. A candidate with zero mass in the
    /// observation's cell picks up `-inf` log likelihood and carries zero
    /// posterior weight from then on; an observation where the registered
    /// truth vanishes is an error, since a sample from the truth cannot
    /// land there.
    pub fn update(&mut self, y: f64) -> Result<(), EngineError> {
        let grid = *self.prior.grid();
        let cell = grid.cell_of(y)?;
        let width = grid.width();
        if let Some(t) = &self.truth {
            let density = t.mass()[cell] / width;
            if density <= 0.0 {
                return Err(EngineError::InvalidTruth { y });
            }
            self.log_lik_star += density.ln();
        }
        for (ll, candidate) in self.log_lik.iter_mut().zip(self.prior.candidates()) {
            *ll += (candidate.mass()[cell] / width).ln();
        }
        self.n += 1;
        Ok(())
    }

    /// `log_weight[j] + kappa * log_lik[j]`, the unnormalized log
    /// posterior scores.
    fn scores(&self) -> Vec<f64> {
        self.prior
            .log_weights()
            .iter()
            .zip(self.log_lik.iter())
            .map(|(&lw, &ll)| lw + self.kappa * ll)
            .collect()
    }

    /// Posterior weights via softmax of the scores.
    pub fn posterior_weights(&self) -> Result<Vec<f64>, EngineError> {
        let scores = self.scores();
        let z = log_sum_exp(&scores);
        if z == f64::NEG_INFINITY {
            return Err(EngineError::DegeneratePosterior);
        }
        Ok(scores.iter().map(|s| (s - z).exp()).collect())
    }

    /// Log of the posterior normalizer relative to the truth,
    /// `logsumexp_j(log_weight[j] + kappa * (log_lik[j] - log_lik_star))`.
    /// Identically zero before any observation.
    pub fn log_denominator(&self) -> Result<f64, EngineError> {
        if self.truth.is_none() {
            return Err(EngineError::MissingTruth);
        }
        if self.n == 0 {
            return Ok(0.0);
        }
        Ok(log_sum_exp(&self.relative_scores()))
    }

    /// Same as [`Self::log_denominator`] but restricted to a candidate
    /// subset; `-inf` when the subset carries no surviving mass. Before
    /// any observation this is the log prior mass of the subset.
    pub fn log_restricted_numerator(&self, mask: &SubsetMask) -> Result<f64, EngineError> {
        if self.truth.is_none() {
            return Err(EngineError::MissingTruth);
        }
        self.check_mask(mask)?;
        let scores = self.relative_scores();
        let restricted: Vec<f64> = scores
            .iter()
            .zip(mask.included().iter())
            .filter_map(|(&s, &inc)| inc.then_some(s))
            .collect();
        Ok(log_sum_exp(&restricted))
    }

    fn relative_scores(&self) -> Vec<f64> {
        self.prior
            .log_weights()
            .iter()
            .zip(self.log_lik.iter())
            .map(|(&lw, &ll)| lw + self.kappa * (ll - self.log_lik_star))
            .collect()
    }

    /// Posterior mean density (predictive density of the next
    /// observation).
    pub fn predictive_density(&self) -> Result<GridDensity, EngineError> {
        let weights = self.posterior_weights()?;
        Ok(mixture(self.prior.candidates(), &weights)?)
    }

    /// Posterior mass of a candidate subset; zero for the empty mask.
    pub fn posterior_mass(&self, mask: &SubsetMask) -> Result<f64, EngineError> {
        self.check_mask(mask)?;
        let weights = self.posterior_weights()?;
        Ok(weights
            .iter()
            .zip(mask.included().iter())
            .filter_map(|(&w, &inc)| inc.then_some(w))
            .sum())
    }

    /// Predictive density under the posterior restricted and renormalized
    /// to a subset.
    pub fn restricted_predictive(&self, mask: &SubsetMask) -> Result<GridDensity, EngineError> {
        self.check_mask(mask)?;
        let scores = self.scores();
        let restricted: Vec<f64> = scores
            .iter()
            .zip(mask.included().iter())
            .map(|(&s, &inc)| if inc { s } else { f64::NEG_INFINITY })
            .collect();
        let z = log_sum_exp(&restricted);
        if z == f64::NEG_INFINITY {
            return Err(EngineError::EmptyRestriction);
        }
        let weights: Vec<f64> = restricted.iter().map(|s| (s - z).exp()).collect();
        Ok(mixture(self.prior.candidates(), &weights)?)
    }

    fn check_mask(&self, mask: &SubsetMask) -> Result<(), EngineError> {
        if mask.len() != self.prior.len() {
            return Err(EngineError::MaskLength {
                got: mask.len(),
                want: self.prior.len(),
            });
        }
        Ok(())
    }
}

/// Prior reweighted by a power of each candidate's data log likelihood:
/// new log weight = `log_weight[j] + power * data_log_lik[j]`, normalized.
/// Candidates annihilated by the data (`-inf` log likelihood) are excluded
/// with weight zero regardless of the power's sign.
pub fn reweighted_prior(
    prior: &FinitePrior,
    data_log_lik: &[f64],
    power: f64,
) -> Result<FinitePrior, EngineError> {
    if data_log_lik.len() != prior.len() {
        return Err(EngineError::LogLikLength {
            got: data_log_lik.len(),
            want: prior.len(),
        });
    }
    for (index, &value) in data_log_lik.iter().enumerate() {
        if value.is_nan() || value == f64::INFINITY {
            return Err(EngineError::BadLogLik { index, value });
        }
    }
    let raw: Vec<f64> = prior
        .log_weights()
        .iter()
        .zip(data_log_lik.iter())
        .map(|(&lw, &ll)| {
            if ll == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                lw + power * ll
            }
        })
        .collect();
    FinitePrior::from_unnormalized(prior.candidates().to_vec(), raw)
        .map_err(|_| EngineError::DegeneratePosterior)
}

/// The data-dependent prior whose genuine posterior reproduces the
/// half-power pseudo-posterior: each weight is divided by the square root
/// of the candidate's likelihood.
pub fn empirical_bayes_reweight(
    prior: &FinitePrior,
    data_log_lik: &[f64],
) -> Result<FinitePrior, EngineError> {
    reweighted_prior(prior, data_log_lik, -0.5)
}

/// What to record for a registered mask. Log-only skips the per-step
/// restricted predictive, which keeps wide shell masks cheap when only
/// the restricted numerator is consumed.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub label: String,
    pub mask: SubsetMask,
    pub divergences: bool,
}

impl MaskSpec {
    pub fn full(label: impl Into<String>, mask: SubsetMask) -> Self {
        MaskSpec {
            label: label.into(),
            mask,
            divergences: true,
        }
    }

    pub fn log_only(label: impl Into<String>, mask: SubsetMask) -> Self {
        MaskSpec {
            label: label.into(),
            mask,
            divergences: false,
        }
    }
}

/// Per-subset slice of a run trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskTrace {
    pub label: String,
    pub mask: SubsetMask,
    /// Log restricted numerator after each step; entry 0 is the log prior
    /// mass of the subset.
    pub log_l: Vec<f64>,
    /// Divergences of the restricted predictive (before each step) from
    /// the truth; empty for log-only masks.
    pub restricted_before: Vec<Divergences>,
    /// Set when every included candidate was annihilated at some step,
    /// which leaves later restricted predictives undefined.
    pub annihilated: bool,
}

/// Step-by-step record of one sequential run against a registered truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrace {
    pub kappa: f64,
    /// Log marginal ratio after each step; entry 0 is 0.
    pub log_i: Vec<f64>,
    pub ys: Vec<f64>,
    /// Divergences of the predictive (before each step) from the truth.
    pub predictive_before: Vec<Divergences>,
    /// Full predictive mass vectors before each step, recorded on demand.
    pub predictive_mass_before: Option<Vec<Vec<f64>>>,
    pub masks: Vec<MaskTrace>,
}

impl RunTrace {
    /// Number of absorbed observations.
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn mask_by_label(&self, label: &str) -> Option<&MaskTrace> {
        self.masks.iter().find(|m| m.label == label)
    }
}

/// Drives a [`PosteriorState`] while recording a [`RunTrace`].
pub struct Tracer {
    state: PosteriorState,
    trace: RunTrace,
    record_full_predictives: bool,
    mask_divergences: Vec<bool>,
}

impl Tracer {
    pub fn new(
        state: PosteriorState,
        masks: Vec<MaskSpec>,
        record_full_predictives: bool,
    ) -> Result<Self, EngineError> {
        if state.truth().is_none() {
            return Err(EngineError::MissingTruth);
        }
        let mask_divergences: Vec<bool> = masks.iter().map(|spec| spec.divergences).collect();
        let mask_traces = masks
            .into_iter()
            .map(|spec| {
                let log_l0 = state.log_restricted_numerator(&spec.mask)?;
                Ok(MaskTrace {
                    label: spec.label,
                    mask: spec.mask,
                    log_l: vec![log_l0],
                    restricted_before: Vec::new(),
                    annihilated: false,
                })
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        let kappa = state.kappa();
        Ok(Tracer {
            state,
            trace: RunTrace {
                kappa,
                log_i: vec![0.0],
                ys: Vec::new(),
                predictive_before: Vec::new(),
                predictive_mass_before: record_full_predictives.then(Vec::new),
                masks: mask_traces,
            },
            record_full_predictives,
            mask_divergences,
        })
    }

    pub fn state(&self) -> &PosteriorState {
        &self.state
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    /// Records the predictive summaries, absorbs `y`, then records the
    /// updated marginal quantities.
    pub fn absorb(&mut self, y: f64) -> Result<(), EngineError> {
        let truth = self.state.truth().cloned().expect("truth checked at new");
        let predictive = self.state.predictive_density()?;
        self.trace
            .predictive_before
            .push(divergences(&truth, &predictive)?);
        if self.record_full_predictives {
            self.trace
                .predictive_mass_before
                .as_mut()
                .expect("enabled at new")
                .push(predictive.mass().to_vec());
        }
        for (mt, &record) in self
            .trace
            .masks
            .iter_mut()
            .zip(self.mask_divergences.iter())
        {
            if !record {
                continue;
            }
            if mt.annihilated {
                mt.restricted_before.push(Divergences {
                    kl: f64::NAN,
                    v: f64::NAN,
                    h: f64::NAN,
                    affinity: f64::NAN,
                });
                continue;
            }
            match self.state.restricted_predictive(&mt.mask) {
                Ok(restricted) => mt
                    .restricted_before
                    .push(divergences(&truth, &restricted)?),
                Err(EngineError::EmptyRestriction) => {
                    mt.annihilated = true;
                    mt.restricted_before.push(Divergences {
                        kl: f64::NAN,
                        v: f64::NAN,
                        h: f64::NAN,
                        affinity: f64::NAN,
                    });
                }
                Err(e) => return Err(e),
            }
        }

        self.state.update(y)?;
        self.trace.ys.push(y);
        self.trace.log_i.push(self.state.log_denominator()?);
        for mt in &mut self.trace.masks {
            mt.log_l
                .push(self.state.log_restricted_numerator(&mt.mask)?);
        }
        Ok(())
    }

    pub fn into_parts(self) -> (PosteriorState, RunTrace) {
        (self.state, self.trace)
    }

    pub fn into_trace(self) -> RunTrace {
        self.trace
    }
}
