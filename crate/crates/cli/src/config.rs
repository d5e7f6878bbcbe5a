//! Experiment configuration: one flat TOML document per run.
//!
//! Every table rejects unknown keys. Omitted keys take the defaults
//! documented on each field.

use std::fmt;
use std::sync::Arc;

use mflow_core::measure::Mollifier;
use mflow_core::process::{Coefficient, CoefficientModel, InitialLaw, TimeGrid};
use mflow_core::functional::{measure_functional, mollified, MeasureFunctional};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    MeasureFlow,
    Extended,
    TimeLinear,
    Diagnostic,
    Convergence,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::MeasureFlow => "measure_flow",
            Scenario::Extended => "extended",
            Scenario::TimeLinear => "time_linear",
            Scenario::Diagnostic => "diagnostic",
            Scenario::Convergence => "convergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    /// Required for the formula scenarios and convergence studies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<FunctionalSpec>,
    /// The independent `X` ensemble of the extended formula; the main
    /// `model`/`ensemble` pair drives `ξ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary: Option<AuxiliarySpec>,
    #[serde(default)]
    pub bootstrap: BootstrapSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<DiagnosticSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `b = β`, `σ = sigma · I`. With `β` omitted this is scaled Brownian motion.
    ConstantDrift,
    /// `b_i = β_i cos(x_i)`, `σ = sigma · [diag(1 + sin(t + x_i)/2) | 0.3 cos(x_i)]`.
    Oscillating,
    /// `b = β (2u - 1)` with one uniform `u` drawn per path, `σ = sigma · I`.
    RandomDrift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Default `constant_drift`.
    #[serde(default = "default_preset")]
    pub preset: Preset,
    /// State dimension `d`, default 1.
    #[serde(default = "one")]
    pub dim: usize,
    /// Noise dimension `d₁ >= d`, default `d`. Only `oscillating` uses `d₁ > d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_dim: Option<usize>,
    /// Drift vector `β`, default zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    /// Noise scale, default 1.
    #[serde(default = "unit")]
    pub sigma: f64,
    /// Declared bound `K`; defaults to the preset's analytic bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    /// Declared ellipticity `δ`; defaults to the preset's analytic constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ellipticity: Option<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            preset: Preset::ConstantDrift,
            dim: 1,
            noise_dim: None,
            beta: None,
            sigma: 1.0,
            bound: None,
            ellipticity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Horizon `T`, default 1.
    #[serde(default = "unit")]
    pub horizon: f64,
    /// Default 100.
    #[serde(default = "default_steps")]
    pub n_steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            horizon: 1.0,
            n_steps: default_steps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Point,
    Gaussian,
    Ball,
}

/// Law of `X_0`. `center` defaults to the origin, `std` and `radius` to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub kind: InitKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            kind: InitKind::Point,
            center: None,
            std: None,
            radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    /// Default 1000.
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    /// Default 42.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub init: InitSpec,
    /// Pairs paths with opposite Brownian increments, default false.
    #[serde(default)]
    pub antithetic: bool,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            n_paths: default_paths(),
            seed: default_seed(),
            init: InitSpec::default(),
            antithetic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSpec {
    /// Registry id: a measure functional (`measure_flow`), an extended
    /// functional (`extended`) or a time profile (`time_linear`).
    pub id: String,
    /// Mollifier index `n`; wraps a measure functional as `μ -> u(μ ⋆ ρ_n)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mollifier: Option<usize>,
    /// Gauss-Legendre nodes per axis discretizing `ρ_n`, default 6.
    #[serde(default = "default_nodes")]
    pub mc_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxiliarySpec {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSpec {
    /// Resampling replicates for nonlinear functionals, default 200.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Defaults to the ensemble seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Band half-width in standard errors for the pass rule, default 3.
    #[serde(default = "default_band")]
    pub band: f64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        BootstrapSpec {
            replicates: default_replicates(),
            seed: None,
            band: default_band(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceBase {
    MeasureFlow,
    TimeLinear,
}

/// Expands a grid of runs from list-valued keys: `Δt = T / n_steps` for
/// each entry of `n_steps_list` (increasing) against `n_paths_list`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    #[serde(default = "default_base")]
    pub base: ConvergenceBase,
    pub n_steps_list: Vec<usize>,
    pub n_paths_list: Vec<usize>,
    /// Accepted range for the slope in `n_paths`, default `[-0.65, -0.35]`.
    #[serde(default = "default_slope_range")]
    pub n_paths_slope_range: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    Krylov,
    DensityIntegrability,
    JointIntegrability,
    Contraction,
    MollifyConvergence,
    LpConvolution,
}

/// Parameters of a diagnostic run. Random inputs derive from the
/// ensemble seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticSpec {
    pub kind: DiagnosticKind,
    /// Krylov exponent `p >= d` (default `d`) or Young exponent (default 2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_exp: Option<f64>,
    /// Integrability exponent `k`, default `d + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    /// Power `α` of the first factor, default 1.
    #[serde(default = "unit")]
    pub alpha: f64,
    /// Start-time lag of the second Gaussian flow, default 0.
    #[serde(default)]
    pub lag: f64,
    /// Mollifier indices, default `[2, 4, 8, 16, 32]`.
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    /// Random instances, default 20.
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Maximum atoms per random measure, default 8.
    #[serde(default = "default_atoms")]
    pub atoms: usize,
    /// Nodes per axis for mollifier expansions, default 4.
    #[serde(default = "default_diag_nodes")]
    pub mc_nodes: usize,
    /// Cells per axis of random gridded fields, default 12.
    #[serde(default = "default_cells")]
    pub cells: usize,
    /// Lattice spacing of gridded fields, default 0.25.
    #[serde(default = "default_spacing")]
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Output directory; `--out` overrides it and `MFLOW_OUT` supplies the
    /// default, falling back to `mflow-out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// File stem for `<stem>.csv`, `<stem>.json` and `<stem>.plot.csv`,
    /// default the scenario name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<String>,
}

fn default_preset() -> Preset {
    Preset::ConstantDrift
}
fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn default_steps() -> usize {
    100
}
fn default_paths() -> usize {
    1000
}
fn default_seed() -> u64 {
    42
}
fn default_nodes() -> usize {
    6
}
fn default_replicates() -> usize {
    mflow_core::formula::DEFAULT_REPLICATES
}
fn default_band() -> f64 {
    3.0
}
fn default_base() -> ConvergenceBase {
    ConvergenceBase::MeasureFlow
}
fn default_slope_range() -> [f64; 2] {
    [-0.65, -0.35]
}
fn default_n_list() -> Vec<usize> {
    vec![2, 4, 8, 16, 32]
}
fn default_trials() -> usize {
    20
}
fn default_atoms() -> usize {
    8
}
fn default_diag_nodes() -> usize {
    4
}
fn default_cells() -> usize {
    12
}
fn default_spacing() -> f64 {
    0.25
}

/// One problem found while parsing, located by its dotted key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
        ConfigErrors(vec![ConfigIssue {
            key: "<document>".into(),
            message: e.to_string().trim_end().to_string(),
        }])
    })?;
    let issues = config.validate();
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(ConfigErrors(issues))
    }
}

/// Serializes a configuration back to TOML; `parse_config` inverts it.
pub fn to_toml(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("configuration is always representable in TOML")
}

impl ExperimentConfig {
    /// Every constraint violation, each named by its dotted key.
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut bad = |key: &str, message: String| {
            issues.push(ConfigIssue {
                key: key.into(),
                message,
            })
        };
        check_model("model", &self.model, &mut bad);
        check_ensemble("ensemble", &self.ensemble, self.model.dim, &mut bad);
        if !(self.grid.horizon > 0.0) || !self.grid.horizon.is_finite() {
            bad("grid.horizon", format!("must be positive and finite, got {}", self.grid.horizon));
        }
        if self.grid.n_steps == 0 {
            bad("grid.n_steps", "must be at least 1".into());
        }
        if !(self.bootstrap.band > 0.0) {
            bad("bootstrap.band", "must be positive".into());
        }
        let formula = matches!(
            self.scenario,
            Scenario::MeasureFlow | Scenario::Extended | Scenario::TimeLinear | Scenario::Convergence
        );
        if formula && self.bootstrap.replicates == 0 {
            bad("bootstrap.replicates", "the pass rule needs at least one replicate".into());
        }
        match &self.functional {
            None if formula => bad("functional", "required for this scenario".into()),
            Some(f) => {
                if f.id.trim().is_empty() {
                    bad("functional.id", "must not be empty".into());
                }
                if f.mollifier == Some(0) {
                    bad("functional.mollifier", "index must be at least 1".into());
                }
                if f.mc_nodes == 0 {
                    bad("functional.mc_nodes", "must be at least 1".into());
                }
                if f.mollifier.is_some() && !matches!(self.scenario, Scenario::MeasureFlow | Scenario::Convergence) {
                    bad("functional.mollifier", "only measure functionals can be mollified".into());
                }
            }
            None => {}
        }
        match (&self.auxiliary, self.scenario) {
            (None, Scenario::Extended) => bad("auxiliary", "the extended formula needs an X ensemble".into()),
            (Some(aux), _) => {
                check_model("auxiliary.model", &aux.model, &mut bad);
                check_ensemble("auxiliary.ensemble", &aux.ensemble, aux.model.dim, &mut bad);
                if aux.model.dim != self.model.dim {
                    bad("auxiliary.model.dim", "must match model.dim".into());
                }
                if self.scenario == Scenario::Extended && aux.ensemble.seed == self.ensemble.seed {
                    bad(
                        "auxiliary.ensemble.seed",
                        "must differ from ensemble.seed: the two ensembles must be independent".into(),
                    );
                }
            }
            _ => {}
        }
        match (&self.convergence, self.scenario) {
            (None, Scenario::Convergence) => bad("convergence", "required for this scenario".into()),
            (Some(c), _) => {
                if c.n_steps_list.is_empty() || c.n_steps_list.windows(2).any(|w| w[1] <= w[0]) || c.n_steps_list.contains(&0) {
                    bad("convergence.n_steps_list", "must be nonempty, positive and strictly increasing".into());
                }
                if c.n_paths_list.is_empty() || c.n_paths_list.windows(2).any(|w| w[1] <= w[0]) || c.n_paths_list.contains(&0) {
                    bad("convergence.n_paths_list", "must be nonempty, positive and strictly increasing".into());
                }
                if !(c.n_paths_slope_range[0] <= c.n_paths_slope_range[1]) {
                    bad("convergence.n_paths_slope_range", "lower end exceeds upper end".into());
                }
            }
            _ => {}
        }
        match (&self.diagnostic, self.scenario) {
            (None, Scenario::Diagnostic) => bad("diagnostic", "required for this scenario".into()),
            (Some(d), _) => {
                if d.n_list.is_empty() || d.n_list.windows(2).any(|w| w[1] <= w[0]) || d.n_list.contains(&0) {
                    bad("diagnostic.n_list", "must be nonempty, positive and strictly increasing".into());
                }
                if d.trials == 0 {
                    bad("diagnostic.trials", "must be at least 1".into());
                }
                if d.atoms == 0 {
                    bad("diagnostic.atoms", "must be at least 1".into());
                }
                if d.mc_nodes == 0 {
                    bad("diagnostic.mc_nodes", "must be at least 1".into());
                }
                if d.cells == 0 {
                    bad("diagnostic.cells", "must be at least 1".into());
                }
                if !(d.spacing > 0.0) {
                    bad("diagnostic.spacing", "must be positive".into());
                }
                if !(d.alpha >= 0.0) {
                    bad("diagnostic.alpha", "must be nonnegative".into());
                }
                if !(d.lag >= 0.0) {
                    bad("diagnostic.lag", "must be nonnegative".into());
                }
            }
            _ => {}
        }
        issues
    }

    /// File stem of the outputs.
    pub fn stem(&self) -> String {
        self.output
            .stem
            .clone()
            .unwrap_or_else(|| self.scenario.as_str().to_string())
    }
}

fn check_model(prefix: &str, m: &ModelSpec, bad: &mut impl FnMut(&str, String)) {
    let key = |k: &str| format!("{prefix}.{k}");
    if m.dim == 0 {
        bad(&key("dim"), "must be at least 1".into());
    }
    if let Some(d1) = m.noise_dim {
        if d1 < m.dim {
            bad(&key("noise_dim"), format!("must be at least dim = {}", m.dim));
        }
        if d1 != m.dim && m.preset != Preset::Oscillating {
            bad(&key("noise_dim"), "only the oscillating preset uses extra noise".into());
        }
    }
    if let Some(b) = &m.beta {
        if b.len() != m.dim {
            bad(&key("beta"), format!("needs {} entries, got {}", m.dim, b.len()));
        }
        if b.iter().any(|v| !v.is_finite()) {
            bad(&key("beta"), "entries must be finite".into());
        }
    }
    if !(m.sigma > 0.0) || !m.sigma.is_finite() {
        bad(&key("sigma"), format!("must be positive and finite, got {}", m.sigma));
    }
    if let Some(k) = m.bound {
        if !(k > 0.0) || !k.is_finite() {
            bad(&key("bound"), format!("bound K must be positive, got {k}"));
        }
    }
    if let Some(delta) = m.ellipticity {
        if !(delta > 0.0) || !delta.is_finite() {
            bad(&key("ellipticity"), format!("ellipticity δ must be positive, got {delta}"));
        }
    }
}

fn check_ensemble(prefix: &str, e: &EnsembleSpec, dim: usize, bad: &mut impl FnMut(&str, String)) {
    let key = |k: &str| format!("{prefix}.{k}");
    if e.n_paths == 0 {
        bad(&key("n_paths"), "must be at least 1".into());
    }
    if let Some(c) = &e.init.center {
        if c.len() != dim {
            bad(&key("init.center"), format!("needs {dim} entries, got {}", c.len()));
        }
    }
    match e.init.kind {
        InitKind::Point => {
            if e.init.std.is_some() || e.init.radius.is_some() {
                bad(&key("init"), "a point mass takes only a center".into());
            }
        }
        InitKind::Gaussian => {
            if e.init.radius.is_some() {
                bad(&key("init.radius"), "not used by a Gaussian law".into());
            }
            if let Some(s) = e.init.std {
                if !(s >= 0.0) || !s.is_finite() {
                    bad(&key("init.std"), "must be nonnegative and finite".into());
                }
            }
        }
        InitKind::Ball => {
            if e.init.std.is_some() {
                bad(&key("init.std"), "not used by a uniform ball".into());
            }
            if let Some(r) = e.init.radius {
                if !(r > 0.0) || !r.is_finite() {
                    bad(&key("init.radius"), "must be positive and finite".into());
                }
            }
        }
    }
}

impl ModelSpec {
    /// Builds the coefficient model with its declared `K` and `δ`.
    pub fn build(&self) -> mflow_core::Result<CoefficientModel> {
        let d = self.dim;
        let beta = self.beta.clone().unwrap_or_else(|| vec![0.0; d]);
        let s = self.sigma;
        let beta_norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        let model = match self.preset {
            Preset::ConstantDrift => CoefficientModel::constant_drift(&beta, s)?,
            Preset::Oscillating => {
                let d1 = self.noise_dim.unwrap_or(d);
                let b = beta.clone();
                let drift = Coefficient::Field(Arc::new(move |_t, x: &[f64], _aux: &[f64], out: &mut [f64]| {
                    for i in 0..x.len() {
                        out[i] = b[i] * x[i].cos();
                    }
                }));
                let diffusion = Coefficient::Field(Arc::new(move |t, x: &[f64], _aux: &[f64], out: &mut [f64]| {
                    out.iter_mut().for_each(|v| *v = 0.0);
                    for i in 0..d {
                        out[i * d1 + i] = s * (1.0 + 0.5 * (t + x[i]).sin());
                        for j in d..d1 {
                            out[i * d1 + j] = 0.3 * s * x[i].cos();
                        }
                    }
                }));
                // |σ|_F <= s sqrt(d (1.5² + 0.09 (d₁ - d))), a >= (s/2)² I
                let sigma_max = s * (d as f64 * (2.25 + 0.09 * (d1 - d) as f64)).sqrt();
                CoefficientModel::new("oscillating", d, d1, drift, diffusion, beta_norm + sigma_max, 0.25 * s * s)?
            }
            Preset::RandomDrift => {
                let b = beta.clone();
                let drift = Coefficient::Field(Arc::new(move |_t, _x: &[f64], aux: &[f64], out: &mut [f64]| {
                    let u = 2.0 * aux[0] - 1.0;
                    for i in 0..out.len() {
                        out[i] = b[i] * u;
                    }
                }));
                let mut sigma = vec![0.0; d * d];
                for i in 0..d {
                    sigma[i * d + i] = s;
                }
                let sigma_norm = sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
                CoefficientModel::new(
                    "random_drift",
                    d,
                    d,
                    drift,
                    Coefficient::Constant(sigma),
                    (beta_norm + sigma_norm).max(f64::MIN_POSITIVE),
                    s * s,
                )?
                .with_aux(1)
            }
        };
        let (k, delta) = (
            self.bound.unwrap_or(model.bound()),
            self.ellipticity.unwrap_or(model.ellipticity()),
        );
        Ok(model.with_declared(k, delta))
    }
}

impl EnsembleSpec {
    pub fn initial_law(&self, dim: usize) -> InitialLaw {
        let center = self.init.center.clone().unwrap_or_else(|| vec![0.0; dim]);
        match self.init.kind {
            InitKind::Point => InitialLaw::PointMass(center),
            InitKind::Gaussian => InitialLaw::Gaussian {
                mean: center,
                std: self.init.std.unwrap_or(1.0),
            },
            InitKind::Ball => InitialLaw::UniformBall {
                center,
                radius: self.init.radius.unwrap_or(1.0),
            },
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> mflow_core::Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.n_steps)
    }
}

impl FunctionalSpec {
    /// The measure functional, mollified when an index is given.
    pub fn measure(&self, dim: usize) -> mflow_core::Result<Arc<dyn MeasureFunctional>> {
        let inner = measure_functional(&self.id, dim)?;
        match self.mollifier {
            None => Ok(inner),
            Some(n) => {
                let rho = Mollifier::new(n, dim)?;
                Ok(Arc::new(mollified(inner, &rho, self.mc_nodes)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "scenario = \"measure_flow\"\n[functional]\nid = \"second_moment\"\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.model, ModelSpec::default());
        assert_eq!(c.grid, GridSpec::default());
        assert_eq!(c.ensemble.seed, 42);
        assert_eq!(c.bootstrap.replicates, 200);
        assert_eq!(c.functional.as_ref().unwrap().mc_nodes, 6);
        assert_eq!(c.stem(), "measure_flow");
    }

    #[test]
    fn zero_ellipticity_is_rejected_with_its_key() {
        let text = format!("{MINIMAL}[model]\nellipticity = 0.0\n");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert_eq!(err.0[0].key, "model.ellipticity");
        assert!(err.0[0].message.contains("δ"));
    }

    #[test]
    fn unknown_keys_and_type_errors_are_reported() {
        let err = parse_config(&format!("{MINIMAL}[grid]\nsteps = 10\n")).unwrap_err();
        assert!(err.to_string().contains("steps"), "{err}");
        let err = parse_config(&format!("{MINIMAL}[grid]\nn_steps = \"ten\"\n")).unwrap_err();
        assert!(err.to_string().contains("n_steps"), "{err}");
    }

    #[test]
    fn collects_every_violation() {
        let text = "scenario = \"extended\"\n[ensemble]\nn_paths = 0\n[auxiliary.ensemble]\nseed = 42\n";
        let keys: Vec<String> = parse_config(text).unwrap_err().0.into_iter().map(|i| i.key).collect();
        assert!(keys.contains(&"ensemble.n_paths".to_string()));
        assert!(keys.contains(&"functional".to_string()));
        assert!(keys.contains(&"auxiliary.ensemble.seed".to_string()));
    }

    #[test]
    fn round_trip_is_identity() {
        let text = r#"
scenario = "diagnostic"
[model]
preset = "oscillating"
dim = 2
noise_dim = 3
beta = [0.5, -0.25]
sigma = 0.8
[ensemble]
n_paths = 64
seed = 7
antithetic = true
[ensemble.init]
kind = "gaussian"
center = [1.0, 0.0]
std = 0.3
[diagnostic]
kind = "krylov"
p_exp = 2.5
[output]
stem = "probe"
"#;
        let c = parse_config(text).unwrap();
        let again = parse_config(&to_toml(&c)).unwrap();
        assert_eq!(c, again);
        assert_eq!(to_toml(&again), to_toml(&c));
    }

    #[test]
    fn presets_satisfy_their_declared_constants() {
        use mflow_core::process::{default_probe, validate_coefficients};
        let grid = TimeGrid::new(1.0, 10).unwrap();
        for preset in [Preset::ConstantDrift, Preset::Oscillating, Preset::RandomDrift] {
            let spec = ModelSpec {
                preset,
                dim: 2,
                noise_dim: (preset == Preset::Oscillating).then_some(3),
                beta: Some(vec![0.7, -0.2]),
                sigma: 0.9,
                bound: None,
                ellipticity: None,
            };
            let model = spec.build().unwrap();
            let probe = default_probe(&model, &grid, 500, 5.0, 1);
            let v = validate_coefficients(&model, &probe).unwrap();
            assert!(v.pass(), "{preset:?}: {v:?}");
        }
    }
}
