//! Experiment configuration: a JSON document validated key by key so that
//! every problem is reported at once.

use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::chaos::{index_count, BasisSpec, IndexSet, DEFAULT_CARDINALITY_CAP};
use crate::error::Result;
use crate::grid::TimeGrid;
use crate::models::{Generator, GeneratorSpec, TerminalFamily, TerminalSpec};
use crate::regression::Variant;
use crate::scheme::{LinearConfig, Problem, RegressorConfig};

/// Truncation of the chaos expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosConfig {
    #[serde(default = "default_order")]
    pub order: u32,
    /// Intervals of the basis partition; defaults to the scheme steps.
    #[serde(default)]
    pub partition_steps: Option<usize>,
}

fn default_order() -> u32 {
    2
}

impl Default for ChaosConfig {
    fn default() -> Self {
        Self {
            order: 2,
            partition_steps: None,
        }
    }
}

/// One swept terminal parameter: `points` equally spaced values on `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterAxis {
    pub name: String,
    pub min: f64,
    pub max: f64,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_points() -> usize {
    11
}

impl ParameterAxis {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        (0..self.points)
            .map(|i| self.min + (self.max - self.min) * i as f64 / (self.points - 1) as f64)
            .collect()
    }
}

/// Monte Carlo settings for estimating the coefficient box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoxConfig {
    pub samples: usize,
    pub antithetic: bool,
}

impl Default for BoxConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            antithetic: false,
        }
    }
}

/// Which terminal values the per-terminal baseline regresses on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineTerminal {
    #[default]
    Raw,
    Projected,
}

fn default_mc_paths() -> usize {
    1_000_000
}

fn default_bump() -> f64 {
    0.01
}

fn default_baseline_regressor() -> RegressorConfig {
    RegressorConfig::Linear(LinearConfig::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineConfig {
    /// Discounted risk-neutral prices and bump deltas; linear generators only.
    MonteCarlo {
        #[serde(default = "default_mc_paths")]
        paths: usize,
        #[serde(default)]
        antithetic: bool,
        #[serde(default = "default_bump")]
        bump: f64,
    },
    /// The backward Euler scheme run separately for every terminal condition.
    BackwardEuler {
        #[serde(default = "default_baseline_regressor")]
        regressor: RegressorConfig,
        #[serde(default)]
        terminal: BaselineTerminal,
    },
}

/// A mesh-refinement study for the base terminal condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Step counts of the nested scheme grids.
    pub steps: Vec<usize>,
    /// Steps of the reference grid; must be a multiple of every entry of
    /// `steps`.
    pub reference_steps: usize,
    #[serde(default = "default_eval_paths")]
    pub evaluation_paths: usize,
    /// Regressor for the reference solution; defaults to the experiment's.
    #[serde(default)]
    pub reference_regressor: Option<RegressorConfig>,
}

fn default_eval_paths() -> usize {
    10_000
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub horizon: f64,
    pub steps: usize,
    pub dimension: usize,
    pub correlation: f64,
    pub chaos: ChaosConfig,
    pub generator: GeneratorSpec,
    pub terminal: TerminalFamily,
    /// Steps of the payoff monitoring grid; defaults to `steps`.
    pub monitoring_steps: usize,
    pub parameters: Vec<ParameterAxis>,
    #[serde(rename = "box")]
    pub coefficient_box: BoxConfig,
    pub regressor: RegressorConfig,
    pub variant: Variant,
    pub baseline: BaselineConfig,
    pub convergence: Option<ConvergenceConfig>,
    pub seed: u64,
    pub output: String,
}

const REQUIRED: &[&str] = &["name", "generator", "terminal", "regressor", "baseline"];
const OPTIONAL: &[&str] = &[
    "horizon",
    "steps",
    "dimension",
    "correlation",
    "chaos",
    "monitoring_steps",
    "parameters",
    "box",
    "variant",
    "convergence",
    "seed",
    "output",
];

fn take<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, errors: &mut Vec<String>) -> Option<T> {
    let v = obj.get(key)?;
    match serde_json::from_value(v.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            errors.push(format!("{key}: {e}"));
            None
        }
    }
}

/// Parses and checks a config document, returning every problem found.
pub fn validate_config(text: &str) -> std::result::Result<ExperimentConfig, Vec<String>> {
    let value: Value = if text.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(text).map_err(|e| vec![format!("not valid JSON: {e}")])?
    };
    validate_value(&value)
}

pub fn validate_value(value: &Value) -> std::result::Result<ExperimentConfig, Vec<String>> {
    let obj = match value {
        Value::Object(o) => o,
        _ => return Err(vec!["config must be a JSON object".into()]),
    };
    let mut errors = Vec::new();
    for key in REQUIRED {
        if !obj.contains_key(*key) {
            errors.push(format!("missing required key `{key}`"));
        }
    }
    for key in obj.keys() {
        if !REQUIRED.contains(&key.as_str()) && !OPTIONAL.contains(&key.as_str()) {
            errors.push(format!(
                "unknown key `{key}` (expected one of: {})",
                REQUIRED.iter().chain(OPTIONAL).copied().collect::<Vec<_>>().join(", ")
            ));
        }
    }
    let name: Option<String> = take(obj, "name", &mut errors);
    let generator: Option<GeneratorSpec> = take(obj, "generator", &mut errors);
    let terminal: Option<TerminalFamily> = take(obj, "terminal", &mut errors);
    let regressor: Option<RegressorConfig> = take(obj, "regressor", &mut errors);
    let baseline: Option<BaselineConfig> = take(obj, "baseline", &mut errors);
    let horizon: f64 = take(obj, "horizon", &mut errors).unwrap_or(1.0);
    let steps: usize = take(obj, "steps", &mut errors).unwrap_or(10);
    let dimension: Option<usize> = take(obj, "dimension", &mut errors);
    let correlation: f64 = take(obj, "correlation", &mut errors).unwrap_or(0.0);
    let chaos: ChaosConfig = take(obj, "chaos", &mut errors).unwrap_or_default();
    let monitoring_steps: Option<usize> = take(obj, "monitoring_steps", &mut errors);
    let parameters: Vec<ParameterAxis> = take(obj, "parameters", &mut errors).unwrap_or_default();
    let coefficient_box: BoxConfig = take(obj, "box", &mut errors).unwrap_or_default();
    let variant: Variant = take(obj, "variant", &mut errors).unwrap_or_default();
    let convergence: Option<ConvergenceConfig> = take(obj, "convergence", &mut errors);
    let seed: u64 = take(obj, "seed", &mut errors).unwrap_or(0);
    let output: Option<String> = take(obj, "output", &mut errors);

    let (Some(name), Some(generator), Some(terminal), Some(regressor), Some(baseline)) =
        (name, generator, terminal, regressor, baseline)
    else {
        return Err(errors);
    };
    let dimension = dimension.unwrap_or_else(|| default_dimension(&generator, &terminal));
    let cfg = ExperimentConfig {
        output: output.unwrap_or_else(|| format!("out/{name}")),
        name,
        horizon,
        steps,
        dimension,
        correlation,
        chaos,
        generator,
        terminal,
        monitoring_steps: monitoring_steps.unwrap_or(steps),
        parameters,
        coefficient_box,
        regressor,
        variant,
        baseline,
        convergence,
        seed,
    };
    errors.extend(semantic_errors(&cfg));
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

fn default_dimension(generator: &GeneratorSpec, terminal: &TerminalFamily) -> usize {
    let from_generator = match generator {
        GeneratorSpec::BorrowingRate { drift, .. } => drift.len(),
        GeneratorSpec::LinearRate { theta, .. } => theta.len(),
        _ => 1,
    };
    let from_terminal = match terminal {
        TerminalFamily::AsianBasket { spot, .. } => spot.len(),
        TerminalFamily::BrownianPower { component, .. } => component + 1,
        TerminalFamily::ChaosSynthetic { dimension, .. } => *dimension,
        _ => 1,
    };
    from_generator.max(from_terminal).max(1)
}

fn semantic_errors(cfg: &ExperimentConfig) -> Vec<String> {
    let mut errors = Vec::new();
    if !(cfg.horizon.is_finite() && cfg.horizon > 0.0) {
        errors.push(format!("horizon: must be positive, got {}", cfg.horizon));
    }
    if cfg.steps == 0 {
        errors.push("steps: must be at least 1".into());
    }
    if cfg.monitoring_steps == 0 {
        errors.push("monitoring_steps: must be at least 1".into());
    }
    if cfg.chaos.partition_steps == Some(0) {
        errors.push("chaos.partition_steps: must be at least 1".into());
    }
    if cfg.dimension == 0 {
        errors.push("dimension: must be at least 1".into());
    }
    if !(cfg.correlation.abs() < 1.0) && cfg.dimension > 1 {
        errors.push(format!("correlation: must lie in (-1, 1), got {}", cfg.correlation));
    }
    if cfg.output.trim().is_empty() {
        errors.push("output: must not be empty".into());
    }
    if cfg.coefficient_box.samples < 2 {
        errors.push("box.samples: must be at least 2".into());
    }
    match &cfg.regressor {
        RegressorConfig::Linear(l) if l.paths < 2 => errors.push("regressor.paths: must be at least 2".into()),
        RegressorConfig::Mlp(m) => {
            if m.batch_size == 0 {
                errors.push("regressor.batch_size: must be at least 1".into());
            }
            if !(m.learning_rate > 0.0) {
                errors.push("regressor.learning_rate: must be positive".into());
            }
            if m.hidden_multiplier == 0 {
                errors.push("regressor.hidden_multiplier: must be at least 1".into());
            }
        }
        _ => {}
    }
    if !errors.is_empty() {
        return errors;
    }

    let generator = match Generator::new(cfg.generator.clone(), cfg.dimension) {
        Ok(g) => Some(g),
        Err(e) => {
            errors.push(format!("generator: {e}"));
            None
        }
    };
    if let Some(g) = &generator {
        let mesh = cfg.horizon / cfg.steps as f64;
        if mesh * g.lipschitz() >= 1.0 {
            errors.push(format!(
                "steps: mesh {mesh} with generator Lipschitz constant {} violates the well-posedness bound |pi| < 1/[g]_L",
                g.lipschitz()
            ));
        }
        if let Some(conv) = &cfg.convergence {
            if let Some(&n) = conv.steps.iter().min() {
                let coarse = cfg.horizon / n as f64;
                if n > 0 && coarse * g.lipschitz() >= 1.0 {
                    errors.push(format!(
                        "convergence.steps: mesh {coarse} violates the well-posedness bound |pi| < 1/[g]_L = {}",
                        1.0 / g.lipschitz()
                    ));
                }
            }
        }
    }

    let slots = partition_steps(cfg) * cfg.dimension;
    match index_count(cfg.chaos.order, slots) {
        Some(c) if c <= DEFAULT_CARDINALITY_CAP as u128 => {}
        Some(c) => errors.push(format!(
            "chaos: order {} over {slots} basis slots gives {c} indices, above the cap {DEFAULT_CARDINALITY_CAP}",
            cfg.chaos.order
        )),
        None => errors.push("chaos: index count overflows".into()),
    }

    match cfg.base_terminal() {
        Ok(spec) => {
            if spec.min_dimension() > cfg.dimension {
                errors.push(format!(
                    "terminal: needs {} Brownian components but dimension is {}",
                    spec.min_dimension(),
                    cfg.dimension
                ));
            }
            for axis in &cfg.parameters {
                if spec.parameter(&axis.name).is_none() && spec.with_parameter(&axis.name, axis.min).is_err() {
                    errors.push(format!("parameters: {} has no parameter `{}`", spec.name(), axis.name));
                    continue;
                }
                if !(axis.min.is_finite() && axis.max.is_finite()) || axis.min > axis.max {
                    errors.push(format!("parameters.{}: need finite min <= max", axis.name));
                }
                if axis.points == 0 {
                    errors.push(format!("parameters.{}: points must be at least 1", axis.name));
                }
                for v in [axis.min, axis.max] {
                    if let Err(e) = spec.with_parameter(&axis.name, v) {
                        errors.push(format!("parameters.{}: {e}", axis.name));
                    }
                }
            }
            if let BaselineConfig::MonteCarlo { paths, bump, .. } = cfg.baseline {
                check_monte_carlo(cfg, &spec, paths, bump, &mut errors);
            }
        }
        Err(e) => errors.push(format!("terminal: {e}")),
    }

    if let Some(conv) = &cfg.convergence {
        if conv.steps.is_empty() {
            errors.push("convergence.steps: must not be empty".into());
        }
        if conv.evaluation_paths < 2 {
            errors.push("convergence.evaluation_paths: must be at least 2".into());
        }
        for &n in &conv.steps {
            if n == 0 || conv.reference_steps % n != 0 {
                errors.push(format!(
                    "convergence.steps: {n} does not divide reference_steps {}",
                    conv.reference_steps
                ));
            }
        }
        let mut sorted = conv.steps.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] || w[1] % w[0] != 0 {
                errors.push(format!("convergence.steps: grids {} and {} are not nested", w[0], w[1]));
            }
        }
    }
    errors
}

fn check_monte_carlo(cfg: &ExperimentConfig, spec: &TerminalSpec, paths: usize, bump: f64, errors: &mut Vec<String>) {
    if paths < 2 {
        errors.push("baseline.paths: must be at least 2".into());
    }
    if !(bump > 0.0 && bump < 1.0) {
        errors.push(format!("baseline.bump: must lie in (0, 1), got {bump}"));
    }
    let GeneratorSpec::LinearRate { rate, theta } = &cfg.generator else {
        errors.push("baseline: monte_carlo requires a linear_rate generator".into());
        return;
    };
    if spec.single_asset().is_none() && spec.name() != "constant" {
        errors.push(format!(
            "baseline: monte_carlo deltas need a single-asset payoff, {} is not",
            spec.name()
        ));
        return;
    }
    if let TerminalFamily::BarrierCall { drift, volatility, .. } = &cfg.terminal {
        let expected = (drift - rate) / volatility;
        let given = theta.first().copied().unwrap_or(0.0);
        if (given - expected).abs() > 1e-12 * (1.0 + expected.abs()) {
            errors.push(format!(
                "generator: theta {given} differs from (drift - rate) / volatility = {expected} of the terminal"
            ));
        }
    }
}

fn partition_steps(cfg: &ExperimentConfig) -> usize {
    cfg.chaos.partition_steps.unwrap_or(cfg.steps)
}

impl ExperimentConfig {
    pub fn scheme_grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.horizon, self.steps)
    }

    pub fn basis(&self) -> Result<BasisSpec> {
        BasisSpec::new(TimeGrid::uniform(self.horizon, partition_steps(self))?, self.dimension)
    }

    pub fn index_set(&self) -> Result<Arc<IndexSet>> {
        Ok(Arc::new(IndexSet::new(self.chaos.order, self.basis()?.slots())?))
    }

    /// The driver correlation matrix, `None` when independent.
    pub fn correlation_matrix(&self) -> Option<Vec<f64>> {
        if self.correlation == 0.0 || self.dimension == 1 {
            return None;
        }
        let d = self.dimension;
        Some(
            (0..d * d)
                .map(|k| if k / d == k % d { 1.0 } else { self.correlation })
                .collect(),
        )
    }

    pub fn base_terminal(&self) -> Result<TerminalSpec> {
        TerminalSpec::new(
            self.terminal.clone(),
            TimeGrid::uniform(self.horizon, self.monitoring_steps)?,
        )
    }

    /// Every point of the parameter grid (first axis outermost) with its
    /// terminal condition.
    pub fn parameter_grid(&self) -> Result<Vec<(Vec<f64>, TerminalSpec)>> {
        let base = self.base_terminal()?;
        let mut out = vec![(Vec::new(), base)];
        for axis in &self.parameters {
            let mut next = Vec::with_capacity(out.len() * axis.points);
            for (values, spec) in &out {
                for v in axis.values() {
                    let mut vals = values.clone();
                    vals.push(v);
                    next.push((vals, spec.with_parameter(&axis.name, v)?));
                }
            }
            out = next;
        }
        Ok(out)
    }

    pub fn problem(&self, grid: TimeGrid) -> Result<Problem> {
        let basis = self.basis()?;
        let index_set = Arc::new(IndexSet::new(self.chaos.order, basis.slots())?);
        let generator = Generator::new(self.generator.clone(), self.dimension)?;
        Problem::new(grid, basis, index_set, generator, self.correlation_matrix())
    }
}
