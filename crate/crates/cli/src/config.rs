//! Strict TOML run configuration.
//!
//! Every key is checked on its own, so a file with several typos or type
//! mismatches reports all of them at once.

use std::path::Path;
use std::sync::Arc;

use jumpbsde::levy::{AxisDensity, LevyMeasure, RadialDensity, TableBin};
use jumpbsde::models::{
    additive_jumps, constant_diffusion, constant_drift, gamma_min1, gamma_zero, manufactured_model, ou_drift,
    scalar_diffusion, state_scaled_jumps, terminal_constant, terminal_sum, zero_drift,
};
use jumpbsde::paths::{Driver, ForwardJumps, LinearDriver, ModelCoefficients, ScalarMap, TimeGrid, ZeroDriver};
use jumpbsde::reference::operators::{CosineSolution, EquationSpec};
use jumpbsde::reference::IntermediateConfig;
use jumpbsde::solver::SolverConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub levy: LevyConfig,
    pub model: ModelConfig,
    pub numerics: NumericsConfig,
    pub training: TrainingConfig,
    pub oracle: OracleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: "out".into(),
            levy: LevyConfig::default(),
            model: ModelConfig::default(),
            numerics: NumericsConfig::default(),
            training: TrainingConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevyKind {
    PowerLaw,
    TemperedPowerLaw,
    FiniteActivityTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevyConfig {
    pub kind: LevyKind,
    pub dim: usize,
    pub alpha: f64,
    /// Density constant `C`.
    pub scale: f64,
    pub r_max: f64,
    /// Tempering rate of the tempered law.
    pub tempering: f64,
    /// `[lo, hi, density]` triples of the finite-activity table.
    pub bins: Vec<[f64; 3]>,
}

impl Default for LevyConfig {
    fn default() -> Self {
        LevyConfig {
            kind: LevyKind::PowerLaw,
            dim: 1,
            alpha: 0.5,
            scale: 1.0,
            r_max: 1.0,
            tempering: 1.0,
            bins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftKind {
    Zero,
    Constant,
    Ou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaKind {
    Additive,
    StateScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaKind {
    Min1,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriverKind {
    Zero,
    Linear,
    Manufactured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalKind {
    Identity,
    Constant,
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub drift: DriftKind,
    /// `constant`: one value per coordinate; `ou`: `[rate, mean]`.
    pub drift_params: Vec<f64>,
    /// `σ = sigma·I`.
    pub sigma: f64,
    pub beta: BetaKind,
    /// `additive`: `[c]`; `state-scaled`: `[a, c]`.
    pub beta_params: Vec<f64>,
    pub gamma: GammaKind,
    pub driver: DriverKind,
    /// `linear`: `[a_y, a_z.., a_p, c]`.
    pub driver_params: Vec<f64>,
    pub terminal: TerminalKind,
    /// `constant`: `[k]`.
    pub terminal_params: Vec<f64>,
    pub x0: Vec<f64>,
    pub manufactured: ManufacturedConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            drift: DriftKind::Zero,
            drift_params: Vec::new(),
            sigma: 0.3,
            beta: BetaKind::Additive,
            beta_params: vec![1.0],
            gamma: GammaKind::Min1,
            driver: DriverKind::Zero,
            driver_params: Vec::new(),
            terminal: TerminalKind::Identity,
            terminal_params: Vec::new(),
            x0: vec![1.0],
            manufactured: ManufacturedConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquationKind {
    /// The ε-truncated equation the solver targets.
    Truncated,
    /// The untruncated equation.
    Full,
}

/// `u*(t, x) = offset + amplitude·cos(frequency·Σx + time_rate·t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManufacturedConfig {
    pub offset: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub time_rate: f64,
    pub kappa: f64,
    pub equation: EquationKind,
}

impl Default for ManufacturedConfig {
    fn default() -> Self {
        ManufacturedConfig {
            offset: 1.0,
            amplitude: 0.5,
            frequency: 1.3,
            time_rate: 0.4,
            kappa: 0.5,
            equation: EquationKind::Truncated,
        }
    }
}

impl ManufacturedConfig {
    pub fn solution(&self) -> CosineSolution {
        CosineSolution {
            offset: self.offset,
            amplitude: self.amplitude,
            frequency: self.frequency,
            time_rate: self.time_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardJumpsKind {
    Exact,
    Representatives,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsConfig {
    pub horizon: f64,
    pub steps: usize,
    pub epsilon: f64,
    pub zeta: u8,
    pub h: f64,
    /// Defaults to the radius holding all but `10⁻⁶` of the mass beyond ε.
    pub r_work: Option<f64>,
    pub batch: usize,
    pub forward_jumps: ForwardJumpsKind,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        NumericsConfig {
            horizon: 1.0,
            steps: 20,
            epsilon: 0.05,
            zeta: 1,
            h: 0.5,
            r_work: None,
            batch: 8192,
            forward_jumps: ForwardJumpsKind::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub warm_epochs: Option<usize>,
    pub minibatch: usize,
    pub lr: f64,
    pub validation_fraction: f64,
    pub resample: bool,
    pub shard_size: usize,
    pub hidden_layers: usize,
    /// Defaults to `20 + q`.
    pub width: Option<usize>,
    pub warm_start: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let s = SolverConfig::default();
        TrainingConfig {
            epochs: s.epochs,
            warm_epochs: s.warm_epochs,
            minibatch: s.minibatch,
            lr: s.lr,
            validation_fraction: s.validation_fraction,
            resample: s.resample,
            shard_size: s.shard_size,
            hidden_layers: s.hidden_layers,
            width: s.width,
            warm_start: s.warm_start,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuationKind {
    SelfReferential,
    Networks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub degree: u32,
    pub ridge: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub continuation: ContinuationKind,
    pub rate_epsilons: Vec<f64>,
    /// Defaults to an eighth of the smallest tested level.
    pub reference_epsilon: Option<f64>,
    pub rate_batch: usize,
    pub fine_factor: usize,
    pub projection_batch: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        let i = IntermediateConfig::default();
        OracleConfig {
            degree: i.degree,
            ridge: i.ridge,
            max_iterations: i.max_iterations,
            tolerance: i.tolerance,
            continuation: ContinuationKind::SelfReferential,
            rate_epsilons: vec![0.2, 0.1, 0.05, 0.025],
            reference_epsilon: None,
            rate_batch: 100_000,
            fine_factor: 8,
            projection_batch: 4096,
        }
    }
}

/// Configuration problems, all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Violations(pub Vec<String>);

impl std::fmt::Display for Violations {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} configuration error(s):", self.0.len())?;
        for v in &self.0 {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Violations {}

/// A validated configuration with its warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub config: RunConfig,
    pub warnings: Vec<String>,
}

fn check_keys<T: DeserializeOwned>(prefix: &str, table: &toml::Table, skip: &[&str], out: &mut Vec<String>) {
    for (k, v) in table {
        if skip.contains(&k.as_str()) {
            continue;
        }
        let mut single = toml::Table::new();
        single.insert(k.clone(), v.clone());
        if let Err(e) = toml::Value::Table(single).try_into::<T>() {
            out.push(format!("{prefix}{k}: {}", e.message().trim()));
        }
    }
}

fn section<'a>(name: &str, table: &'a toml::Table, out: &mut Vec<String>) -> Option<&'a toml::Table> {
    match table.get(name) {
        Some(toml::Value::Table(t)) => Some(t),
        Some(other) => {
            out.push(format!("{name}: expected a table, found {}", other.type_str()));
            None
        }
        None => None,
    }
}

pub fn parse_str(text: &str) -> Result<Parsed, Violations> {
    let root: toml::Table = text.parse().map_err(|e: toml::de::Error| Violations(vec![e.message().trim().to_string()]))?;
    let mut v = Vec::new();
    let sections = ["levy", "model", "numerics", "training", "oracle"];
    check_keys::<RunConfig>("", &root, &sections, &mut v);
    if let Some(t) = section("levy", &root, &mut v) {
        check_keys::<LevyConfig>("levy.", t, &[], &mut v);
    }
    if let Some(t) = section("model", &root, &mut v) {
        check_keys::<ModelConfig>("model.", t, &["manufactured"], &mut v);
        if let Some(m) = section("manufactured", t, &mut v) {
            check_keys::<ManufacturedConfig>("model.manufactured.", m, &[], &mut v);
        }
    }
    if let Some(t) = section("numerics", &root, &mut v) {
        check_keys::<NumericsConfig>("numerics.", t, &[], &mut v);
    }
    if let Some(t) = section("training", &root, &mut v) {
        check_keys::<TrainingConfig>("training.", t, &[], &mut v);
    }
    if let Some(t) = section("oracle", &root, &mut v) {
        check_keys::<OracleConfig>("oracle.", t, &[], &mut v);
    }
    if !v.is_empty() {
        return Err(Violations(v));
    }
    let config: RunConfig = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| Violations(vec![e.message().to_string()]))?;
    let warnings = validate(&config)?;
    Ok(Parsed { config, warnings })
}

pub fn parse_config(path: &Path) -> anyhow::Result<Parsed> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    Ok(parse_str(&text)?)
}

/// Semantic checks; returns warnings or every violation found.
pub fn validate(c: &RunConfig) -> Result<Vec<String>, Violations> {
    let mut v = Vec::new();
    let mut warnings = Vec::new();
    let q = c.levy.dim;
    let n = &c.numerics;
    let m = &c.model;
    let positive = |v: &mut Vec<String>, name: &str, x: f64| {
        if !(x > 0.0 && x.is_finite()) {
            v.push(format!("{name} must be positive and finite, got {x}"));
        }
    };
    if q == 0 {
        v.push("levy.dim must be at least 1".into());
    }
    match c.levy.kind {
        LevyKind::PowerLaw | LevyKind::TemperedPowerLaw => {
            if !(c.levy.alpha > 0.0 && c.levy.alpha < 2.0) {
                v.push(format!("levy.alpha must lie in (0, 2), got {}", c.levy.alpha));
            }
            positive(&mut v, "levy.scale", c.levy.scale);
            if !(c.levy.r_max > 0.0) {
                v.push(format!("levy.r_max must be positive, got {}", c.levy.r_max));
            }
            if c.levy.kind == LevyKind::TemperedPowerLaw {
                positive(&mut v, "levy.tempering", c.levy.tempering);
            }
        }
        LevyKind::FiniteActivityTable => {
            if c.levy.bins.is_empty() {
                v.push("levy.bins must list at least one [lo, hi, density] bin".into());
            }
            for (k, b) in c.levy.bins.iter().enumerate() {
                if !(b[0] >= 0.0 && b[1] > b[0] && b[2] >= 0.0) {
                    v.push(format!("levy.bins[{k}] must satisfy 0 <= lo < hi and density >= 0, got {b:?}"));
                }
            }
        }
    }
    positive(&mut v, "numerics.horizon", n.horizon);
    if n.steps < 1 {
        v.push("numerics.steps must be at least 1".into());
    }
    positive(&mut v, "numerics.epsilon", n.epsilon);
    if n.zeta > 1 {
        v.push(format!("numerics.zeta must be 0 or 1, got {}", n.zeta));
    }
    positive(&mut v, "numerics.h", n.h);
    if let Some(r) = n.r_work {
        if !(r > n.epsilon) {
            v.push(format!("numerics.r_work must exceed numerics.epsilon, got {r}"));
        }
    }
    if n.batch < 2 {
        v.push("numerics.batch must be at least 2".into());
    }
    if m.x0.len() != q {
        v.push(format!("model.x0 has {} entries, levy.dim is {q}", m.x0.len()));
    }
    if !(m.sigma >= 0.0) {
        v.push(format!("model.sigma must be non-negative, got {}", m.sigma));
    }
    match (m.drift, m.drift_params.len()) {
        (DriftKind::Zero, 0) => {}
        (DriftKind::Constant, k) if k == q => {}
        (DriftKind::Ou, 2) => {}
        (kind, k) => v.push(format!("model.drift_params: {k} values do not fit drift {kind:?}")),
    }
    match (m.beta, m.beta_params.len()) {
        (BetaKind::Additive, 1) | (BetaKind::StateScaled, 2) => {}
        (kind, k) => v.push(format!("model.beta_params: {k} values do not fit beta {kind:?}")),
    }
    match (m.driver, m.driver_params.len()) {
        (DriverKind::Zero | DriverKind::Manufactured, 0) => {}
        (DriverKind::Linear, k) if k == q + 3 => {}
        (kind, k) => v.push(format!("model.driver_params: {k} values do not fit driver {kind:?}")),
    }
    match (m.terminal, m.terminal_params.len()) {
        (TerminalKind::Identity | TerminalKind::Square, 0) | (TerminalKind::Constant, 1) => {}
        (kind, k) => v.push(format!("model.terminal_params: {k} values do not fit terminal {kind:?}")),
    }
    if m.driver == DriverKind::Manufactured {
        if m.drift != DriftKind::Zero || m.beta != BetaKind::Additive || m.beta_params != [1.0] || m.gamma != GammaKind::Min1 {
            v.push("model.driver = \"manufactured\" requires drift = \"zero\", beta = \"additive\" with [1.0] and gamma = \"min1\"".into());
        }
        if q != 1 {
            v.push("model.driver = \"manufactured\" is one-dimensional".into());
        }
    }
    let t = &c.training;
    for (name, val) in [("training.minibatch", t.minibatch), ("training.shard_size", t.shard_size)] {
        if val == 0 {
            v.push(format!("{name} must be at least 1"));
        }
    }
    positive(&mut v, "training.lr", t.lr);
    if !(0.0..1.0).contains(&t.validation_fraction) {
        v.push(format!("training.validation_fraction must lie in [0, 1), got {}", t.validation_fraction));
    }
    if t.width == Some(0) {
        v.push("training.width must be at least 1".into());
    }
    let o = &c.oracle;
    if o.rate_epsilons.is_empty() || o.rate_epsilons.iter().any(|e| !(*e > 0.0)) {
        v.push("oracle.rate_epsilons must be a non-empty list of positive levels".into());
    }
    if let Some(r) = o.reference_epsilon {
        if !(r > 0.0) || o.rate_epsilons.iter().any(|e| *e < r) {
            v.push(format!("oracle.reference_epsilon must be positive and at most every tested level, got {r}"));
        }
    }
    if o.fine_factor == 0 {
        v.push("oracle.fine_factor must be at least 1".into());
    }
    if o.rate_batch < 2 || o.projection_batch < 2 {
        v.push("oracle batches must be at least 2".into());
    }
    if o.degree > 6 {
        v.push(format!("oracle.degree {} is above the supported maximum 6", o.degree));
    }
    if v.is_empty() {
        if let Ok(measure) = build_measure(&c.levy) {
            if n.epsilon >= measure.support_max() {
                warnings.push(format!(
                    "truncation removes all jumps: epsilon {} >= R_max {}; running without a jump partition",
                    n.epsilon,
                    measure.support_max()
                ));
            }
        }
    }
    if v.is_empty() { Ok(warnings) } else { Err(Violations(v)) }
}

pub fn build_measure(c: &LevyConfig) -> jumpbsde::Result<LevyMeasure> {
    match c.kind {
        LevyKind::PowerLaw => LevyMeasure::symmetric_power_law(c.dim, c.scale, c.alpha, c.r_max),
        LevyKind::TemperedPowerLaw => LevyMeasure::symmetric_tempered(c.dim, c.scale, c.alpha, c.tempering, c.r_max),
        LevyKind::FiniteActivityTable => {
            let bins: Vec<TableBin> = c.bins.iter().map(|b| TableBin { lo: b[0], hi: b[1], density: b[2] }).collect();
            let axis = AxisDensity::symmetric(RadialDensity::Table { bins });
            LevyMeasure::new(vec![axis; c.dim], None)
        }
    }
}

impl RunConfig {
    pub fn zeta(&self) -> bool {
        self.numerics.zeta == 1
    }

    pub fn grid(&self) -> jumpbsde::Result<TimeGrid> {
        TimeGrid::uniform(self.numerics.horizon, self.numerics.steps)
    }

    pub fn gamma(&self) -> ScalarMap {
        match self.model.gamma {
            GammaKind::Min1 => gamma_min1(1.0),
            GammaKind::Zero => gamma_zero(),
        }
    }

    pub fn solver(&self) -> SolverConfig {
        let t = &self.training;
        SolverConfig {
            batch: self.numerics.batch,
            epochs: t.epochs,
            warm_epochs: t.warm_epochs,
            minibatch: t.minibatch,
            lr: t.lr,
            validation_fraction: t.validation_fraction,
            resample: t.resample,
            shard_size: t.shard_size,
            hidden_layers: t.hidden_layers,
            width: t.width,
            warm_start: t.warm_start,
        }
    }

    pub fn intermediate(&self) -> IntermediateConfig {
        let o = &self.oracle;
        IntermediateConfig { degree: o.degree, ridge: o.ridge, max_iterations: o.max_iterations, tolerance: o.tolerance }
    }

    /// Model coefficients from the registry names.
    pub fn model(&self, measure: &LevyMeasure) -> jumpbsde::Result<ModelCoefficients> {
        let m = &self.model;
        let q = self.levy.dim;
        let zeta = self.zeta();
        let mut coeffs = if m.driver == DriverKind::Manufactured {
            let spec = match m.manufactured.equation {
                EquationKind::Truncated => EquationSpec::truncated(self.numerics.epsilon, zeta),
                EquationKind::Full => EquationSpec::full(),
            };
            manufactured_model(measure, m.sigma, zeta, m.manufactured.solution(), m.manufactured.kappa, self.numerics.horizon, spec)?
        } else {
            let d_gamma0 = Some(vec![0.0; q]);
            let jump = match m.beta {
                BetaKind::Additive => additive_jumps(measure, m.beta_params[0], self.gamma(), d_gamma0),
                BetaKind::StateScaled => state_scaled_jumps(measure, m.beta_params[0], m.beta_params[1], self.gamma(), d_gamma0),
            };
            let driver: Arc<dyn Driver> = match m.driver {
                DriverKind::Linear => {
                    let p = &m.driver_params;
                    Arc::new(LinearDriver { a_y: p[0], a_z: p[1..1 + q].to_vec(), a_p: p[q + 1], c: p[q + 2] })
                }
                _ => Arc::new(ZeroDriver),
            };
            ModelCoefficients {
                q,
                d: q,
                drift: match m.drift {
                    DriftKind::Zero => zero_drift(),
                    DriftKind::Constant => constant_drift(m.drift_params.clone()),
                    DriftKind::Ou => ou_drift(m.drift_params[0], m.drift_params[1]),
                },
                diffusion: if q == 1 { constant_diffusion(vec![m.sigma]) } else { scalar_diffusion(q, m.sigma) },
                jump,
                driver,
                terminal: match m.terminal {
                    TerminalKind::Identity => terminal_sum(),
                    TerminalKind::Constant => terminal_constant(m.terminal_params[0]),
                    TerminalKind::Square => Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum()),
                },
                zeta,
                forward_jumps: ForwardJumps::Exact,
            }
        };
        coeffs.forward_jumps = match self.numerics.forward_jumps {
            ForwardJumpsKind::Exact => ForwardJumps::Exact,
            ForwardJumpsKind::Representatives => ForwardJumps::Representatives,
        };
        Ok(coeffs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let p = parse_str("").unwrap();
        assert_eq!(p.config, RunConfig::default());
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn all_violations_are_listed() {
        let err = parse_str("sede = 3\n[numerics]\nzeta = 2\nsteps = \"ten\"\nepsilonn = 0.1\n[training]\nlr = -1.0\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("sede"), "{text}");
        assert!(text.contains("numerics.steps"), "{text}");
        assert!(text.contains("numerics.epsilonn"), "{text}");
        // semantic checks run only once the shape is right
        assert_eq!(err.0.len(), 3);
        let err = parse_str("[numerics]\nzeta = 2\n[training]\nlr = -1.0\n").unwrap_err();
        assert_eq!(err.0.len(), 2);
        assert!(err.0[0].contains("numerics.zeta"));
    }
}
