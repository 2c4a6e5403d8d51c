//! Run configuration: schema-validated model, experiment and tolerance
//! settings, loadable from TOML or JSON.
//!
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default, and every numeric knob is validated before any solver runs.
//! The resolved configuration (defaults included) is echoed into the output
//! metadata by the runner, so an artifact directory always records exactly
//! what produced it.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::engine::ModelSpec;
use crate::grid::Grid;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse (TOML): {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config parse (JSON): {0}")]
    Json(#[from] serde_json::Error),
    #[error("config file needs a .toml or .json extension: {0}")]
    Extension(PathBuf),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown tolerance `{0}`; known names: {1}")]
    UnknownTolerance(String, String),
    #[error("tolerance override must look like name=value, got `{0}`")]
    MalformedOverride(String),
}

/// Model geometry and physics. Defaults are the desk scale: unit box, 128
/// grid points, one fermion, unit soft-Coulomb repulsion with softening 0.5.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub length: f64,
    pub points: usize,
    pub particles: usize,
    pub interaction: f64,
    pub softening: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            length: 1.0,
            points: 128,
            particles: 1,
            interaction: 1.0,
            softening: 0.5,
        }
    }
}

/// Which experiment the runner executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// One density-to-potential inversion, result as JSON.
    Invert,
    /// Intrinsic-energy sweep across coarse-graining levels.
    Sweep,
    /// Representability probe with verdict.
    Probe,
    /// Quasi-continuity table of the product map.
    Quasi,
    /// Continuity modulus of the intrinsic energy.
    Modulus,
    /// Node and oscillation blow-up demonstrations.
    Blowup,
    /// Kohn-Sham decomposition with derivative checks.
    Ks,
    /// The full acceptance battery.
    VerifyAll,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment::VerifyAll
    }
}

/// Target density family for the representability probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTarget {
    /// Regularized quadratic node profile; expected to blow up.
    Node,
    /// Constant profile; cannot vanish at the hard walls, expected to blow
    /// up as well on this geometry.
    Uniform,
    /// Ground density of a smooth potential; expected representable.
    Forward,
}

impl Default for ProbeTarget {
    fn default() -> Self {
        ProbeTarget::Node
    }
}

/// Experiment-specific knobs. Every field has a default, and experiments
/// read only the fields they document; an empty level/radius list means
/// "use the experiment's standard schedule".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    /// Coarse level for single-level experiments (invert, ks).
    pub level: usize,
    /// Level schedule for sweeps and probes; empty = 1..=5 plus the grid.
    pub levels: Vec<usize>,
    /// Amplitude of the smooth generating potential for wall-compatible
    /// target densities.
    pub amplitude: f64,
    /// Phase of the generating potential.
    pub phase: f64,
    /// Samples per radius (quasi, modulus).
    pub samples: usize,
    /// Decreasing radius schedule; empty = experiment default.
    pub radii: Vec<f64>,
    /// Decreasing oscillation wavelengths; empty = experiment default.
    pub wavelengths: Vec<f64>,
    /// Oscillation amplitude (sup norm of the probe potential).
    pub oscillation_amplitude: f64,
    /// Potential cap used by the representability verdict.
    pub v_cap: f64,
    /// Density family fed to the representability probe.
    pub probe_target: ProbeTarget,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            level: 3,
            levels: Vec::new(),
            amplitude: 4.0,
            phase: 2.0,
            samples: 4,
            radii: Vec::new(),
            wavelengths: Vec::new(),
            oscillation_amplitude: 10.0,
            v_cap: 50.0,
            probe_target: ProbeTarget::default(),
        }
    }
}

macro_rules! tolerance_set {
    ($($(#[doc = $doc:literal])+ $name:ident : $default:expr),+ $(,)?) => {
        /// Acceptance thresholds, overridable by name from the config file
        /// or the command line.
        #[derive(Debug, Clone, Serialize)]
        pub struct ToleranceSet {
            $($(#[doc = $doc])+ pub $name: f64,)+
        }

        impl Default for ToleranceSet {
            fn default() -> Self {
                ToleranceSet { $($name: $default,)+ }
            }
        }

        impl ToleranceSet {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name),)+];

            /// Override one threshold by name.
            pub fn set(&mut self, name: &str, value: f64) -> Result<(), ConfigError> {
                if !(value.is_finite() && value > 0.0) {
                    return Err(ConfigError::Invalid(format!(
                        "tolerance {name} must be a positive finite number, got {value}"
                    )));
                }
                match name {
                    $(stringify!($name) => { self.$name = value; Ok(()) })+
                    _ => Err(ConfigError::UnknownTolerance(
                        name.to_string(),
                        Self::NAMES.join(", "),
                    )),
                }
            }
        }
    };
}

tolerance_set! {
    /// L1 mass residual below which an inversion counts as a fixed point.
    residual_l1: 1e-6,
    /// Absolute gauge residual |E[v]| after the gauge fix.
    gauge_abs: 1e-8,
    /// Relative gap between the one-particle functional and the gradient
    /// form of its maximizer density.
    one_particle_rel: 1e-5,
    /// Cell-wise potential recovery error relative to the sup norm of the
    /// generating potential.
    recovery_rel: 1e-4,
    /// Slack allowed in monotone level sequences.
    monotone_slack: 1e-7,
    /// Relative gap between the level-5 value and the grid value.
    gap_rel: 2e-2,
    /// Defect of the directional-derivative limit against the potential
    /// pairing, relative to 1 + |pairing|.
    derivative_rel: 1e-4,
    /// Largest allowed increase between consecutive difference quotients.
    quotient_monotone: 1e-6,
    /// Last/first ratio required of the quasi-continuity max column.
    quasi_ratio: 1e-1,
    /// Continuity modulus cap at radius 1e-6 per particle.
    modulus_cap: 1e-5,
    /// Slack for the lower-bound inequality of the dual pairing.
    fenchel_slack: 1e-8,
    /// Slack for concavity and midpoint-convexity triples.
    convexity_slack: 1e-7,
    /// How far below zero the energetic excess may dip.
    excess_floor: 1e-9,
    /// Absolute slack on construction-exact decomposition identities.
    ks_identity: 1e-12,
    /// Relative spread allowed between quadratic remainder coefficients of
    /// the mean-field energy.
    hartree_rel: 1e-1,
    /// Relative defect of the exchange-correlation directional derivative.
    xc_rel: 1e-3,
    /// Lower edge of the accepted oscillation decay exponent band.
    exponent_low: 0.8,
    /// Upper edge of the accepted oscillation decay exponent band.
    exponent_high: 1.2,
    /// Coarse-density drift allowed per particle under the strongest
    /// short-wavelength perturbation.
    drift_factor: 5e-2,
}

/// One full run: model, experiment, seed, output directory, knobs and
/// tolerance overrides.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub experiment: Experiment,
    pub seed: u64,
    /// Output directory; the command line may override it.
    pub out: Option<PathBuf>,
    pub params: Params,
    /// Named threshold overrides applied on top of the defaults.
    pub tolerances: BTreeMap<String, f64>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate a config file; the extension picks the format.
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&body),
            Some("json") => Self::from_json_str(&body),
            _ => Err(ConfigError::Extension(path.to_path_buf())),
        }
    }

    /// Schema-level validation beyond what serde enforces.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if !(m.length.is_finite() && m.length > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "model.length must be positive, got {}",
                m.length
            )));
        }
        if m.points < 2 {
            return Err(ConfigError::Invalid(format!(
                "model.points must be at least 2, got {}",
                m.points
            )));
        }
        if !(1..=2).contains(&m.particles) {
            return Err(ConfigError::Invalid(format!(
                "model.particles must be 1 or 2, got {}",
                m.particles
            )));
        }
        if !(m.interaction.is_finite() && m.interaction >= 0.0) {
            return Err(ConfigError::Invalid(format!(
                "model.interaction must be non-negative, got {}",
                m.interaction
            )));
        }
        if !(m.softening.is_finite() && m.softening > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "model.softening must be positive, got {}",
                m.softening
            )));
        }
        let p = &self.params;
        if p.level == 0 {
            return Err(ConfigError::Invalid("params.level must be >= 1".into()));
        }
        if p.samples == 0 {
            return Err(ConfigError::Invalid("params.samples must be >= 1".into()));
        }
        if !p.levels.is_empty()
            && (p.levels[0] == 0 || p.levels.windows(2).any(|w| w[1] <= w[0]))
        {
            return Err(ConfigError::Invalid(
                "params.levels must be strictly increasing and start at 1 or deeper".into(),
            ));
        }
        for (name, list) in [("radii", &p.radii), ("wavelengths", &p.wavelengths)] {
            if !list.is_empty()
                && (list.iter().any(|r| !(r.is_finite() && *r > 0.0))
                    || list.windows(2).any(|w| w[1] >= w[0]))
            {
                return Err(ConfigError::Invalid(format!(
                    "params.{name} must be strictly decreasing positive numbers"
                )));
            }
        }
        for (name, value) in [
            ("amplitude", p.amplitude),
            ("phase", p.phase),
            ("oscillation_amplitude", p.oscillation_amplitude),
            ("v_cap", p.v_cap),
        ] {
            if !value.is_finite() {
                return Err(ConfigError::Invalid(format!(
                    "params.{name} must be finite, got {value}"
                )));
            }
        }
        if p.oscillation_amplitude <= 0.0 || p.v_cap <= 0.0 {
            return Err(ConfigError::Invalid(
                "params.oscillation_amplitude and params.v_cap must be positive".into(),
            ));
        }
        // Tolerance names and values are checked by actually applying them.
        let mut probe = ToleranceSet::default();
        for (name, &value) in &self.tolerances {
            probe.set(name, value)?;
        }
        Ok(())
    }

    /// Build the model spec; wraps geometry errors in config language.
    pub fn to_spec(&self) -> Result<ModelSpec, ConfigError> {
        let grid = Grid::new(self.model.length, self.model.points)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        ModelSpec::new(
            grid,
            self.model.particles,
            self.model.interaction,
            self.model.softening,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Defaults plus the file's overrides plus any command-line overrides,
    /// applied in that order.
    pub fn resolved_tolerances(
        &self,
        cli_overrides: &[(String, f64)],
    ) -> Result<ToleranceSet, ConfigError> {
        let mut tols = ToleranceSet::default();
        for (name, &value) in &self.tolerances {
            tols.set(name, value)?;
        }
        for (name, value) in cli_overrides {
            tols.set(name, *value)?;
        }
        Ok(tols)
    }
}

/// Parse one `name=value` command-line tolerance override.
pub fn parse_override(s: &str) -> Result<(String, f64), ConfigError> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::MalformedOverride(s.to_string()))?;
    let value: f64 = value
        .trim()
        .parse()
        .map_err(|_| ConfigError::MalformedOverride(s.to_string()))?;
    Ok((name.trim().to_string(), value))
}
