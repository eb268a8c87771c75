//! Experiment configuration: TOML with flat sections, strict unknown-key
//! rejection, and defaults filled at load time so a dumped config reloads
//! to exactly the same resolved value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{DensityError, Grid, GridDensity};
use crate::prior::{EpsilonSequence, PriorError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config field {field}: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Experiment selectors; the token spelling is the config vocabulary.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Experiment {
    Support,
    Lemma1,
    Prop1,
    Lemma2,
    Prop2,
    Prop3,
    Union,
    Identities,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::Support,
        Experiment::Lemma1,
        Experiment::Prop1,
        Experiment::Lemma2,
        Experiment::Prop2,
        Experiment::Prop3,
        Experiment::Union,
        Experiment::Identities,
    ];

    pub fn token(&self) -> &'static str {
        match self {
            Experiment::Support => "SUPPORT",
            Experiment::Lemma1 => "LEMMA1",
            Experiment::Prop1 => "PROP1",
            Experiment::Lemma2 => "LEMMA2",
            Experiment::Prop2 => "PROP2",
            Experiment::Prop3 => "PROP3",
            Experiment::Union => "UNION",
            Experiment::Identities => "IDENTITIES",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

/// Truth as an explicit (raw, normalized-on-load) mass vector or a named
/// preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mass: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub preset: Option<String>,
}

/// Prior as sieve parameters or a prior file produced by `dump-prior`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub levels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub level_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_candidates_per_level: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSection {
    pub amp: f64,
    pub gamma: f64,
    pub logpow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSection {
    /// Support-condition constant; an input, never estimated.
    pub c_support: f64,
    /// Separation constant for the restricted-posterior decay fit; must
    /// exceed `(c_support + 1) / 2`.
    pub d_separation: f64,
    pub beta: f64,
    /// Squared Hellinger-shell multiplier; must exceed
    /// `(c_support + 1) / 2`.
    pub m_sq: f64,
    /// Fractional likelihood powers for the pseudo-posterior sweep.
    pub kappas: Vec<f64>,
    /// Lower-bound constant for the power-one marginal ratio.
    pub lemma2_c_full: f64,
    /// Lower-bound constant for the half-power marginal ratio.
    pub lemma2_c_half: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub n_grid: Vec<u64>,
    pub replications: usize,
    pub master_seed: u64,
    pub trace_full_predictives: bool,
    pub slack: f64,
    pub experiments: Vec<Experiment>,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    pub truth: TruthSection,
    pub prior: PriorSection,
    pub epsilon: EpsilonSection,
    pub constants: ConstantsSection,
    pub run: RunSection,
}

/// On-disk shape: everything except grid, truth, prior, and the sample
/// grid may be omitted and defaulted.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    grid: GridSection,
    truth: TruthSection,
    prior: PriorSection,
    epsilon: Option<RawEpsilon>,
    constants: Option<RawConstants>,
    run: RawRun,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEpsilon {
    amp: Option<f64>,
    gamma: Option<f64>,
    logpow: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstants {
    c_support: Option<f64>,
    d_separation: Option<f64>,
    beta: Option<f64>,
    m_sq: Option<f64>,
    kappas: Option<Vec<f64>>,
    lemma2_c_full: Option<f64>,
    lemma2_c_half: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    n_grid: Vec<u64>,
    replications: Option<usize>,
    master_seed: Option<u64>,
    trace_full_predictives: Option<bool>,
    slack: Option<f64>,
    experiments: Option<Vec<Experiment>>,
}

pub const DEFAULT_REPLICATIONS: usize = 500;
pub const DEFAULT_SLACK: f64 = 0.05;
pub const DEFAULT_MAX_CANDIDATES_PER_LEVEL: usize = 5000;
pub const DEFAULT_LEVEL_DECAY: f64 = 0.5;

/// Loads, defaults, and validates a config file. Prior file paths are
/// resolved relative to the config file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf);
    parse_config(&text, base.as_deref())
}

/// Parses config text; `base` anchors relative prior file paths.
pub fn parse_config(text: &str, base: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text)?;
    resolve(raw, base)
}

/// Serializes a resolved config; reloading the output yields an identical
/// value.
pub fn dump_config(config: &ExperimentConfig) -> String {
    toml::to_string_pretty(config).expect("config serializes")
}

fn resolve(raw: RawConfig, base: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    let eps = raw.epsilon.unwrap_or_default();
    let epsilon = EpsilonSection {
        amp: eps.amp.unwrap_or(1.0),
        gamma: eps.gamma.unwrap_or(0.5),
        logpow: eps.logpow.unwrap_or(1.0),
    };

    let cons = raw.constants.unwrap_or_default();
    let c_support = cons.c_support.unwrap_or(1.0);
    let constants = ConstantsSection {
        c_support,
        d_separation: cons.d_separation.unwrap_or((c_support + 1.0) / 2.0 + 0.1),
        beta: cons.beta.unwrap_or(0.4),
        m_sq: cons.m_sq.unwrap_or((c_support + 1.0) / 2.0 + 1.0),
        kappas: cons.kappas.unwrap_or_else(|| vec![0.25, 0.5, 0.75]),
        lemma2_c_full: cons.lemma2_c_full.unwrap_or(c_support + 1.5),
        lemma2_c_half: cons.lemma2_c_half.unwrap_or((c_support + 1.0) / 2.0 + 0.5),
    };

    let mut prior = raw.prior;
    if prior.levels.is_some() {
        prior.level_decay.get_or_insert(DEFAULT_LEVEL_DECAY);
        prior
            .max_candidates_per_level
            .get_or_insert(DEFAULT_MAX_CANDIDATES_PER_LEVEL);
    }
    if let (Some(file), Some(base)) = (&prior.file, base) {
        if file.is_relative() {
            prior.file = Some(base.join(file));
        }
    }

    let mut experiments = raw.run.experiments.unwrap_or_else(|| Experiment::ALL.to_vec());
    experiments.sort();
    experiments.dedup();

    let config = ExperimentConfig {
        grid: raw.grid,
        truth: raw.truth,
        prior,
        epsilon,
        constants,
        run: RunSection {
            n_grid: raw.run.n_grid,
            replications: raw.run.replications.unwrap_or(DEFAULT_REPLICATIONS),
            master_seed: raw.run.master_seed.unwrap_or(0),
            trace_full_predictives: raw.run.trace_full_predictives.unwrap_or(false),
            slack: raw.run.slack.unwrap_or(DEFAULT_SLACK),
            experiments,
        },
    };
    validate(&config)?;
    Ok(config)
}

fn validate(config: &ExperimentConfig) -> Result<(), ConfigError> {
    let grid = config.resolve_grid()?;

    match (&config.truth.mass, &config.truth.preset) {
        (Some(_), Some(_)) => {
            return Err(invalid("truth", "give either mass or preset, not both"))
        }
        (None, None) => return Err(invalid("truth", "give a mass vector or a preset name")),
        (Some(mass), None) => {
            if mass.len() != grid.bins() {
                return Err(invalid(
                    "truth.mass",
                    format!("{} entries for {} cells", mass.len(), grid.bins()),
                ));
            }
        }
        (None, Some(name)) => {
            if !matches!(name.as_str(), "uniform" | "ramp" | "step") {
                return Err(invalid(
                    "truth.preset",
                    format!("unknown preset {name:?}; expected uniform, ramp, or step"),
                ));
            }
        }
    }

    match (&config.prior.levels, &config.prior.file) {
        (Some(_), Some(_)) => {
            return Err(invalid("prior", "give either sieve levels or a file, not both"))
        }
        (None, None) => return Err(invalid("prior", "give sieve levels or a prior file")),
        _ => {}
    }

    // rejects gamma = 1/2 with zero log power, since n*eps_n^2 must diverge
    EpsilonSequence::new(
        config.epsilon.amp,
        config.epsilon.gamma,
        config.epsilon.logpow,
    )
    .map_err(|e| invalid("epsilon", e.to_string()))?;

    let c = config.constants.c_support;
    if !(c > 0.0) {
        return Err(invalid("constants.c_support", "must be positive"));
    }
    if config.constants.d_separation <= (c + 1.0) / 2.0 {
        return Err(invalid(
            "constants.d_separation",
            format!("must exceed (c_support + 1)/2 = {}", (c + 1.0) / 2.0),
        ));
    }
    if !(config.constants.beta > 0.0 && config.constants.beta < 0.5) {
        return Err(invalid("constants.beta", "must lie in (0, 1/2)"));
    }
    if config.constants.m_sq <= (c + 1.0) / 2.0 {
        return Err(invalid(
            "constants.m_sq",
            format!("must exceed (c_support + 1)/2 = {}", (c + 1.0) / 2.0),
        ));
    }
    for &kappa in &config.constants.kappas {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(invalid("constants.kappas", "powers must lie in (0, 1)"));
        }
    }
    if config.constants.lemma2_c_full <= c + 1.0 {
        return Err(invalid(
            "constants.lemma2_c_full",
            format!("must exceed c_support + 1 = {}", c + 1.0),
        ));
    }
    if config.constants.lemma2_c_half <= (c + 1.0) / 2.0 {
        return Err(invalid(
            "constants.lemma2_c_half",
            format!("must exceed (c_support + 1)/2 = {}", (c + 1.0) / 2.0),
        ));
    }

    let ns = &config.run.n_grid;
    if ns.is_empty() || ns[0] < 1 || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid(
            "run.n_grid",
            "must be nonempty and strictly increasing with entries >= 1",
        ));
    }
    if config.run.replications < 1 {
        return Err(invalid("run.replications", "must be at least 1"));
    }
    if !(config.run.slack > 0.0 && config.run.slack < 1.0) {
        return Err(invalid("run.slack", "must lie in (0, 1)"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn resolve_grid(&self) -> Result<Grid, ConfigError> {
        Ok(Grid::new(self.grid.lo, self.grid.hi, self.grid.bins)?)
    }

    pub fn resolve_truth(&self) -> Result<GridDensity, ConfigError> {
        let grid = self.resolve_grid()?;
        let bins = grid.bins();
        let raw: Vec<f64> = match (&self.truth.mass, &self.truth.preset) {
            (Some(mass), _) => mass.clone(),
            (None, Some(preset)) => match preset.as_str() {
                "uniform" => vec![1.0; bins],
                "ramp" => (1..=bins).map(|b| b as f64).collect(),
                "step" => (0..bins)
                    .map(|b| if b < bins / 2 { 3.0 } else { 1.0 })
                    .collect(),
                other => {
                    return Err(invalid("truth.preset", format!("unknown preset {other:?}")))
                }
            },
            (None, None) => return Err(invalid("truth", "unresolved truth")),
        };
        Ok(GridDensity::from_raw(grid, &raw)?)
    }

    pub fn resolve_epsilon(&self) -> Result<EpsilonSequence, ConfigError> {
        Ok(EpsilonSequence::new(
            self.epsilon.amp,
            self.epsilon.gamma,
            self.epsilon.logpow,
        )?)
    }

    pub fn max_n(&self) -> u64 {
        *self.run.n_grid.last().expect("validated nonempty")
    }

    pub fn wants(&self, experiment: Experiment) -> bool {
        self.run.experiments.contains(&experiment)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[grid]
lo = 0.0
hi = 1.0
bins = 4

[truth]
preset = "uniform"

[prior]
levels = [1, 2]

[run]
n_grid = [100, 200]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let config = parse_config(MINIMAL, None).unwrap();
        assert_eq!(config.run.replications, 500);
        assert_eq!(config.run.slack, 0.05);
        assert_eq!(config.run.master_seed, 0);
        assert!(!config.run.trace_full_predictives);
        assert_eq!(config.prior.level_decay, Some(0.5));
        assert_eq!(config.prior.max_candidates_per_level, Some(5000));
        assert_eq!(config.epsilon.gamma, 0.5);
        assert_eq!(config.epsilon.logpow, 1.0);
        assert_eq!(config.constants.c_support, 1.0);
        assert_eq!(config.constants.lemma2_c_full, 2.5);
        assert_eq!(config.constants.lemma2_c_half, 1.5);
        assert_eq!(config.run.experiments.len(), 8);
    }

    #[test]
    fn rejects_non_diverging_rate_sequence() {
        let text = MINIMAL.replace(
            "[run]",
            "[epsilon]\namp = 1.0\ngamma = 0.5\nlogpow = 0.0\n\n[run]",
        );
        let err = parse_config(&text, None).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("diverges"), "message: {message}");
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = MINIMAL.replace("[run]", "[run]\nbogus_key = 3\n");
        match parse_config(&text, None) {
            Err(ConfigError::Parse(e)) => {
                assert!(e.to_string().contains("bogus_key"), "{e}")
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_load_dump_load() {
        let config = parse_config(MINIMAL, None).unwrap();
        let dumped = dump_config(&config);
        let reloaded = parse_config(&dumped, None).unwrap();
        assert_eq!(config, reloaded);
        assert_eq!(dumped, dump_config(&reloaded));
    }

    #[test]
    fn truth_presets_resolve() {
        for preset in ["uniform", "ramp", "step"] {
            let text = MINIMAL.replace("uniform", preset);
            let config = parse_config(&text, None).unwrap();
            let truth = config.resolve_truth().unwrap();
            assert_eq!(truth.mass().len(), 4);
        }
        let text = MINIMAL.replace("uniform", "spike");
        assert!(parse_config(&text, None).is_err());
    }

    #[test]
    fn truth_requires_exactly_one_spec() {
        let text = MINIMAL.replace(
            "preset = \"uniform\"",
            "preset = \"uniform\"\nmass = [1.0, 1.0, 1.0, 1.0]",
        );
        assert!(parse_config(&text, None).is_err());
        let text = MINIMAL.replace("preset = \"uniform\"", "");
        assert!(parse_config(&text, None).is_err());
    }

    #[test]
    fn mass_length_must_match_grid() {
        let text = MINIMAL.replace("preset = \"uniform\"", "mass = [1.0, 2.0]");
        let err = parse_config(&text, None).unwrap_err();
        assert!(err.to_string().contains("truth.mass"));
    }

    #[test]
    fn n_grid_must_increase() {
        let text = MINIMAL.replace("[100, 200]", "[200, 100]");
        assert!(parse_config(&text, None).is_err());
        let text = MINIMAL.replace("[100, 200]", "[]");
        assert!(parse_config(&text, None).is_err());
    }

    #[test]
    fn relative_prior_file_is_anchored() {
        let text = MINIMAL.replace("levels = [1, 2]", "file = \"prior.txt\"");
        let config = parse_config(&text, Some(Path::new("/tmp/exp"))).unwrap();
        assert_eq!(
            config.prior.file.as_deref(),
            Some(Path::new("/tmp/exp/prior.txt"))
        );
    }

    #[test]
    fn constants_gates() {
        let text = MINIMAL.replace(
            "[run]",
            "[constants]\nc_support = 1.0\nd_separation = 0.5\n\n[run]",
        );
        assert!(parse_config(&text, None).is_err());
        let text = MINIMAL.replace(
            "[run]",
            "[constants]\nkappas = [0.5, 1.0]\n\n[run]",
        );
        assert!(parse_config(&text, None).is_err());
    }
}
