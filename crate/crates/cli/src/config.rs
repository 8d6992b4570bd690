//! Run configuration: TOML schema, defaults and validation.

use std::fmt;
use std::path::PathBuf;

use lowrank_kbp::enkf::Integrator;
use lowrank_kbp::experiments::{AdvectionSetup, FemSetup};
use lowrank_kbp::fem::{default_squares, FemConfig, ObsMode, Square};
use serde::{Deserialize, Serialize};

/// A configuration error tied to the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub model: ModelConfig,
    pub discretization: Discretization,
    #[serde(with = "one_or_many")]
    pub filter: Vec<FilterConfig>,
    #[serde(default)]
    pub study: StudyConfig,
}

fn default_seed() -> u64 {
    42
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Advection(AdvectionModel),
    Fem(FemModel),
    Custom(CustomModel),
}

/// Periodic upwind advection with decay and constant forcing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvectionModel {
    pub d: usize,
    pub length: f64,
    pub decay: f64,
    pub forcing: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub r_true: usize,
}

impl Default for AdvectionModel {
    fn default() -> Self {
        let s = AdvectionSetup::default();
        Self {
            d: s.d,
            length: s.length,
            decay: s.decay,
            forcing: s.forcing,
            sigma: s.sigma,
            gamma: s.gamma,
            r_true: s.r_true,
        }
    }
}

/// Bilinear finite-element pollution model on the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FemModel {
    pub nodes: usize,
    pub diffusion: f64,
    pub velocity: [f64; 2],
    pub sigma: f64,
    pub gamma: f64,
    pub obs: ObsMode,
    pub squares: Vec<Square>,
    pub r_true: usize,
}

impl Default for FemModel {
    fn default() -> Self {
        let c = FemConfig::default();
        Self {
            nodes: c.nodes,
            diffusion: c.diffusion,
            velocity: c.velocity,
            sigma: c.sigma,
            gamma: c.gamma,
            obs: c.obs,
            squares: default_squares(),
            r_true: FemSetup::default().r_true,
        }
    }
}

/// System matrices read from LRKB binary files. `f` and `mean` are single
/// columns; the initial covariance is `modes · gram · modesᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomModel {
    pub a: PathBuf,
    pub f: PathBuf,
    pub sigma: PathBuf,
    pub h: PathBuf,
    pub gamma: PathBuf,
    #[serde(default)]
    pub mass: Option<PathBuf>,
    pub mean: PathBuf,
    pub modes: PathBuf,
    pub gram: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    pub dt: f64,
    #[serde(alias = "T")]
    pub t_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    Kbp,
    DlrKbp,
    Enkf,
    DlrEnkf,
}

impl FilterKind {
    pub fn label(self) -> &'static str {
        match self {
            FilterKind::Kbp => "kbp",
            FilterKind::DlrKbp => "dlr-kbp",
            FilterKind::Enkf => "enkf",
            FilterKind::DlrEnkf => "dlr-enkf",
        }
    }

    fn is_reduced(self) -> bool {
        matches!(self, FilterKind::DlrKbp | FilterKind::DlrEnkf)
    }

    fn is_ensemble(self) -> bool {
        matches!(self, FilterKind::Enkf | FilterKind::DlrEnkf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub kind: FilterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<Integrator>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    #[default]
    Single,
    RankSweep,
    SigmaSweep,
    Poc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub kind: StudyKind,
    pub replicates: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ranks: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sigmas: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub particles: Vec<usize>,
    /// Row stride of the per-step mean trajectories; 0 picks one that keeps
    /// about 1000 rows.
    pub output_every: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            kind: StudyKind::Single,
            replicates: 1,
            ranks: Vec::new(),
            sigmas: Vec::new(),
            particles: Vec::new(),
            output_every: 0,
        }
    }
}

/// Above this dimension the reduced moment filter skips its full-order
/// reference errors.
pub const REFERENCE_MAX_DIM: usize = 2000;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| locate(text, s.start)).unwrap_or_default();
            ConfigError::new(field, e.message().trim().to_string())
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn has_mass(&self) -> bool {
        match &self.model {
            ModelConfig::Advection(_) => false,
            ModelConfig::Fem(_) => true,
            ModelConfig::Custom(c) => c.mass.is_some(),
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.discretization.t_end / self.discretization.dt).round() as usize
    }

    /// Fills integrator and output stride defaults and checks every
    /// constraint that does not need the matrices.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        let dt = self.discretization.dt;
        let t_end = self.discretization.t_end;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ConfigError::new("discretization.dt", "must be positive and finite"));
        }
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(ConfigError::new("discretization.t_end", "must be positive and finite"));
        }
        let n = t_end / dt;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
            return Err(ConfigError::new("discretization", format!("t_end/dt = {n} is not an integer")));
        }
        self.check_model()?;
        if self.filter.is_empty() {
            return Err(ConfigError::new("filter", "at least one filter is required"));
        }
        let mass = self.has_mass();
        let poc = self.study.kind == StudyKind::Poc;
        let max_rank = match &self.model {
            ModelConfig::Advection(m) => Some(m.r_true),
            _ => None,
        };
        for (i, f) in self.filter.iter_mut().enumerate() {
            let at = |k: &str| format!("filter[{i}].{k}");
            if f.kind.is_reduced() && f.rank.is_none() {
                return Err(ConfigError::new(at("rank"), format!("required for {}", f.kind.label())));
            }
            if !f.kind.is_reduced() && f.rank.is_some() {
                return Err(ConfigError::new(at("rank"), format!("not used by {}", f.kind.label())));
            }
            if f.rank == Some(0) {
                return Err(ConfigError::new(at("rank"), "must be at least 1"));
            }
            if let (FilterKind::DlrKbp, Some(r), Some(max)) = (f.kind, f.rank, max_rank) {
                if r > max {
                    return Err(ConfigError::new(at("rank"), format!("exceeds the initial rank model.r_true = {max}")));
                }
            }
            if f.kind.is_ensemble() && !poc {
                match f.particles {
                    None => return Err(ConfigError::new(at("particles"), format!("required for {}", f.kind.label()))),
                    Some(p) if p < 2 => return Err(ConfigError::new(at("particles"), "need at least 2")),
                    _ => {}
                }
            } else if !f.kind.is_ensemble() && f.particles.is_some() {
                return Err(ConfigError::new(at("particles"), format!("not used by {}", f.kind.label())));
            }
            if mass && matches!(f.kind, FilterKind::Kbp | FilterKind::DlrKbp) {
                return Err(ConfigError::new(
                    at("kind"),
                    format!("{} needs a model without mass matrix; use enkf or dlr-enkf", f.kind.label()),
                ));
            }
            match (f.kind, f.integrator) {
                (FilterKind::DlrEnkf, None) => {
                    f.integrator = Some(if mass { Integrator::Bug } else { Integrator::Em });
                }
                (FilterKind::DlrEnkf, Some(Integrator::Em)) if mass => {
                    return Err(ConfigError::new(at("integrator"), "em needs a model without mass matrix; use bug"));
                }
                (FilterKind::DlrEnkf, Some(_)) => {}
                (_, Some(_)) => {
                    return Err(ConfigError::new(at("integrator"), "only dlr-enkf takes an integrator"));
                }
                (_, None) => {}
            }
        }
        self.check_study()?;
        if self.study.output_every == 0 {
            self.study.output_every = self.n_steps().div_ceil(1000).max(1);
        }
        Ok(self)
    }

    fn check_model(&self) -> Result<(), ConfigError> {
        match &self.model {
            ModelConfig::Advection(m) => {
                if m.d < 2 {
                    return Err(ConfigError::new("model.d", "need at least 2 cells"));
                }
                positive("model.length", m.length)?;
                nonnegative("model.decay", m.decay)?;
                nonnegative("model.sigma", m.sigma)?;
                positive("model.gamma", m.gamma)?;
                if m.r_true == 0 || m.r_true > m.d {
                    return Err(ConfigError::new("model.r_true", format!("must lie in 1..={}", m.d)));
                }
            }
            ModelConfig::Fem(m) => {
                if m.nodes < 2 {
                    return Err(ConfigError::new("model.nodes", "need at least 2 nodes per side"));
                }
                nonnegative("model.diffusion", m.diffusion)?;
                nonnegative("model.sigma", m.sigma)?;
                positive("model.gamma", m.gamma)?;
                if m.obs == ObsMode::Partial && m.squares.is_empty() {
                    return Err(ConfigError::new("model.squares", "partial observation needs squares"));
                }
                for (i, s) in m.squares.iter().enumerate() {
                    positive(&format!("model.squares[{i}].side"), s.side)?;
                }
                let d = m.nodes * (m.nodes - 1);
                if m.r_true == 0 || m.r_true > d {
                    return Err(ConfigError::new("model.r_true", format!("must lie in 1..={d}")));
                }
            }
            ModelConfig::Custom(_) => {}
        }
        Ok(())
    }

    fn check_study(&self) -> Result<(), ConfigError> {
        let s = &self.study;
        if s.replicates == 0 {
            return Err(ConfigError::new("study.replicates", "must be at least 1"));
        }
        let only = |kind: FilterKind| -> Result<&FilterConfig, ConfigError> {
            match self.filter.as_slice() {
                [f] if f.kind == kind => Ok(f),
                _ => Err(ConfigError::new("filter", format!("this study takes exactly one {} filter", kind.label()))),
            }
        };
        match s.kind {
            StudyKind::Single => {
                for (k, empty) in [("ranks", s.ranks.is_empty()), ("sigmas", s.sigmas.is_empty()), ("particles", s.particles.is_empty())] {
                    if !empty {
                        return Err(ConfigError::new(format!("study.{k}"), "not used by a single study"));
                    }
                }
            }
            StudyKind::RankSweep => {
                only(FilterKind::DlrKbp)?;
                if s.ranks.is_empty() {
                    return Err(ConfigError::new("study.ranks", "required for a rank sweep"));
                }
                if s.ranks.contains(&0) {
                    return Err(ConfigError::new("study.ranks", "ranks must be at least 1"));
                }
                let ModelConfig::Advection(m) = &self.model else {
                    return Err(ConfigError::new("model.builtin", "rank sweeps run on the advection model"));
                };
                if s.ranks.iter().any(|&r| r > m.r_true) {
                    return Err(ConfigError::new("study.ranks", format!("ranks may not exceed model.r_true = {}", m.r_true)));
                }
            }
            StudyKind::SigmaSweep => {
                only(FilterKind::DlrKbp)?;
                if s.sigmas.is_empty() {
                    return Err(ConfigError::new("study.sigmas", "required for a sigma sweep"));
                }
                for (i, &v) in s.sigmas.iter().enumerate() {
                    nonnegative(&format!("study.sigmas[{i}]"), v)?;
                }
                if !matches!(self.model, ModelConfig::Advection(_)) {
                    return Err(ConfigError::new("model.builtin", "sigma sweeps run on the advection model"));
                }
            }
            StudyKind::Poc => {
                let f = only(FilterKind::DlrEnkf)?;
                if f.integrator == Some(Integrator::Bug) {
                    return Err(ConfigError::new("filter[0].integrator", "propagation-of-chaos studies use em"));
                }
                let ModelConfig::Advection(m) = &self.model else {
                    return Err(ConfigError::new("model.builtin", "propagation-of-chaos studies run on the advection model"));
                };
                if f.rank != Some(m.r_true) {
                    return Err(ConfigError::new("filter[0].rank", format!("must equal model.r_true = {}", m.r_true)));
                }
                if s.particles.len() < 2 {
                    return Err(ConfigError::new("study.particles", "need at least two ensemble sizes"));
                }
                if s.particles.iter().any(|&p| p < 2) {
                    return Err(ConfigError::new("study.particles", "ensemble sizes must be at least 2"));
                }
            }
        }
        Ok(())
    }

    /// Ensembles too small to resolve their rank reliably.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, f) in self.filter.iter().enumerate() {
            if let (FilterKind::DlrEnkf, Some(r)) = (f.kind, f.rank) {
                let sizes: Vec<usize> = if self.study.kind == StudyKind::Poc {
                    self.study.particles.clone()
                } else {
                    f.particles.into_iter().collect()
                };
                for p in sizes {
                    if p < 4 * r {
                        out.push(format!("filter[{i}]: {p} particles for rank {r} is at most 4R-1; expect sampling noise"));
                    }
                }
            }
        }
        out
    }

    pub fn advection_setup(&self, m: &AdvectionModel) -> AdvectionSetup {
        AdvectionSetup {
            d: m.d,
            length: m.length,
            decay: m.decay,
            forcing: m.forcing,
            sigma: m.sigma,
            gamma: m.gamma,
            dt: self.discretization.dt,
            t_end: self.discretization.t_end,
            r_true: m.r_true,
        }
    }

    pub fn fem_setup(&self, m: &FemModel) -> FemSetup {
        FemSetup {
            config: FemConfig {
                nodes: m.nodes,
                diffusion: m.diffusion,
                velocity: m.velocity,
                sigma: m.sigma,
                gamma: m.gamma,
                obs: m.obs,
                squares: m.squares.clone(),
            },
            r_true: m.r_true,
            dt: self.discretization.dt,
            t_end: self.discretization.t_end,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("must be positive, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("must be non-negative, got {v}")))
    }
}

/// `line N` for a byte offset into the source.
fn locate(text: &str, offset: usize) -> String {
    let line = text[..offset.min(text.len())].matches('\n').count() + 1;
    format!("line {line}")
}

mod one_or_many {
    use super::FilterConfig;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(FilterConfig),
        Many(Vec<FilterConfig>),
    }

    pub fn serialize<S: Serializer>(v: &[FilterConfig], s: S) -> Result<S::Ok, S::Error> {
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<FilterConfig>, D::Error> {
        Ok(match OneOrMany::deserialize(d)? {
            OneOrMany::One(f) => vec![f],
            OneOrMany::Many(v) => v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[model]
builtin = "advection"
d = 20
r_true = 4
[discretization]
dt = 1e-3
t_end = 0.1
[filter]
kind = "dlr-kbp"
rank = 4
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = RunConfig::from_toml(BASE).unwrap().resolve().unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.filter.len(), 1);
        assert_eq!(cfg.study.replicates, 1);
        assert_eq!(cfg.study.output_every, 1);
        let ModelConfig::Advection(m) = &cfg.model else { panic!() };
        assert_eq!(m.length, 10.0);
    }

    #[test]
    fn resolved_round_trips() {
        let cfg = RunConfig::from_toml(BASE).unwrap().resolve().unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap().resolve().unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = BASE.replace("seed = 3", "seed = 3\nsede = 4");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.message.contains("sede"), "{err}");
    }

    #[test]
    fn unknown_model_field_is_rejected() {
        let text = BASE.replace("d = 20", "d = 20\nwidth = 3");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn missing_rank_names_field() {
        let text = BASE.replace("rank = 4\n", "");
        let err = RunConfig::from_toml(&text).unwrap().resolve().unwrap_err();
        assert_eq!(err.field, "filter[0].rank");
    }

    #[test]
    fn non_integer_step_count() {
        let text = BASE.replace("t_end = 0.1", "t_end = 0.10005");
        let err = RunConfig::from_toml(&text).unwrap().resolve().unwrap_err();
        assert_eq!(err.field, "discretization");
    }

    #[test]
    fn moment_filter_rejects_mass_model() {
        let text = BASE.replace("builtin = \"advection\"\nd = 20\nr_true = 4", "builtin = \"fem\"\nnodes = 5\nr_true = 3");
        let err = RunConfig::from_toml(&text).unwrap().resolve().unwrap_err();
        assert_eq!(err.field, "filter[0].kind");
    }

    #[test]
    fn filter_list_and_integrator_default() {
        let text = r#"
[model]
builtin = "fem"
nodes = 5
r_true = 3
[discretization]
dt = 1e-2
T = 0.1
[[filter]]
kind = "enkf"
particles = 10
[[filter]]
kind = "dlr-enkf"
rank = 3
particles = 10
"#;
        let cfg = RunConfig::from_toml(text).unwrap().resolve().unwrap();
        assert_eq!(cfg.filter.len(), 2);
        assert_eq!(cfg.filter[1].integrator, Some(Integrator::Bug));
        assert_eq!(cfg.warnings().len(), 1);
    }

    #[test]
    fn poc_needs_matching_rank() {
        let text = r#"
[model]
builtin = "advection"
r_true = 5
[discretization]
dt = 1e-2
t_end = 0.1
[filter]
kind = "dlr-enkf"
rank = 4
particles = 8
[study]
kind = "poc"
particles = [8, 16]
"#;
        let err = RunConfig::from_toml(text).unwrap().resolve().unwrap_err();
        assert_eq!(err.field, "filter[0].rank");
    }
}
