//! The backward recursion shared by the operator scheme and the per-terminal
//! baseline.
//!
//! Step `i` regresses `(Y_{i+1}, Y_{i+1} dB_i / dt_i)` on features built from
//! `X_{t_i}` (plus the chaos coefficients for the operator) and solves the
//! implicit step `Y_i = E_i[Y_{i+1}] + dt_i g(t_i, Y_i, Z_i)`.
//!
//! Sample `k` of batch `b` at step `i` always uses the path stream
//! `(seed, [tag, i, b, k])`, independent of whether coefficient features are
//! present, so an operator trained on a single-point box and the baseline see
//! the same paths.

use std::sync::Arc;

use log::{debug, info};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::chaos::{BasisSpec, ChaosCoefficients, IndexSet};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::TimeGrid;
use crate::models::{Generator, TerminalSpec};
use crate::regression::linear::{to_array, LinearFitter};
use crate::regression::mlp::{column_mean, column_std, StepProblem};
use crate::regression::{
    loss_and_gradient, AdamConfig, AdamState, FeatureScaler, LossBatch, MlpModel, StepModel, Variant,
};
use crate::rng::{self, domain};
use crate::simulation::{ForwardMap, PathSampler};
use crate::stats::Moments;

/// Rows per block when simulating a batch.
const SAMPLE_BLOCK: usize = 256;

/// Budgets for the least-squares regressor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    /// Paths simulated per time step.
    pub paths: usize,
    pub picard_tolerance: f64,
    pub picard_max_iterations: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            paths: 100_000,
            picard_tolerance: 1e-12,
            picard_max_iterations: 50,
        }
    }
}

/// Budgets and hyperparameters for the network regressor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub batch_size: usize,
    /// Adam steps per time step.
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Hidden width as a multiple of `|A|`.
    pub hidden_multiplier: usize,
    /// Samples used to fit the feature and output standardisation.
    pub pilot_size: usize,
    /// Initialise step `i` from the trained step `i + 1`.
    pub warm_start: bool,
    /// Samples used for the post-training step report.
    pub diagnostic_paths: usize,
    /// Log the loss every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 50_000,
            steps: 3000,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            hidden_multiplier: 3,
            pilot_size: 10_000,
            warm_start: true,
            diagnostic_paths: 10_000,
            log_every: 0,
        }
    }
}

impl MlpConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressorConfig {
    Linear(LinearConfig),
    Mlp(MlpConfig),
}

impl RegressorConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RegressorConfig::Linear(_) => "linear",
            RegressorConfig::Mlp(_) => "mlp",
        }
    }
}

/// Everything besides the problem that determines a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub regressor: RegressorConfig,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl SchemeConfig {
    pub fn linear(paths: usize, seed: u64) -> Self {
        Self {
            regressor: RegressorConfig::Linear(LinearConfig {
                paths,
                ..LinearConfig::default()
            }),
            variant: Variant::Implicit,
            seed,
            execution: Execution::default(),
        }
    }

    pub fn mlp(config: MlpConfig, seed: u64) -> Self {
        Self {
            regressor: RegressorConfig::Mlp(config),
            variant: Variant::Implicit,
            seed,
            execution: Execution::default(),
        }
    }
}

/// Rejects grids violating `|pi| [g]_L < 1`.
pub fn check_well_posed(grid: &TimeGrid, generator: &Generator) -> Result<()> {
    let l = generator.lipschitz();
    if grid.mesh() * l >= 1.0 {
        return Err(Error::IllPosedMesh {
            mesh: grid.mesh(),
            lipschitz: l,
        });
    }
    Ok(())
}

/// The BSDE discretisation: time grid, chaos truncation, generator and the
/// correlation of the driving Brownian motion.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: TimeGrid,
    pub basis: BasisSpec,
    pub index_set: Arc<IndexSet>,
    pub generator: Generator,
    pub correlation: Option<Vec<f64>>,
}

impl Problem {
    pub fn new(
        grid: TimeGrid,
        basis: BasisSpec,
        index_set: Arc<IndexSet>,
        generator: Generator,
        correlation: Option<Vec<f64>>,
    ) -> Result<Self> {
        if (grid.horizon() - basis.horizon()).abs() > 1e-10 * grid.horizon().max(1.0) {
            return Err(Error::InvalidGrid(format!(
                "scheme horizon {} differs from basis horizon {}",
                grid.horizon(),
                basis.horizon()
            )));
        }
        if index_set.slots() != basis.slots() {
            return Err(Error::ShapeMismatch {
                context: "index set slots vs basis size",
                expected: basis.slots(),
                found: index_set.slots(),
            });
        }
        if generator.dimension() != basis.dimension() {
            return Err(Error::ShapeMismatch {
                context: "generator dimension",
                expected: basis.dimension(),
                found: generator.dimension(),
            });
        }
        check_well_posed(&grid, &generator)?;
        Ok(Self {
            grid,
            basis,
            index_set,
            generator,
            correlation,
        })
    }

    pub fn dimension(&self) -> usize {
        self.basis.dimension()
    }

    /// The common refinement of the scheme grid, the basis partition and any
    /// extra grid a payoff needs.
    pub fn simulation_grid(&self, extra: Option<&TimeGrid>) -> Result<TimeGrid> {
        let g = self.grid.union(self.basis.partition())?;
        match extra {
            Some(e) => g.union(e),
            None => Ok(g),
        }
    }

    pub fn sampler(&self, extra: Option<&TimeGrid>) -> Result<PathSampler> {
        PathSampler::new(
            self.simulation_grid(extra)?,
            self.dimension(),
            self.correlation.as_deref(),
        )
    }
}

/// Terminal values for the per-terminal scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalSource {
    /// `xi(path)` itself.
    Raw(TerminalSpec),
    /// `Pi_{p,M} xi` from given coefficients.
    Projected(ChaosCoefficients),
}

impl TerminalSource {
    pub fn label(&self) -> &'static str {
        match self {
            TerminalSource::Raw(_) => "raw",
            TerminalSource::Projected(_) => "projected",
        }
    }
}

/// Uniform coefficient sampler for the operator scheme.
pub(crate) trait CoefficientDraw: Sync {
    fn width(&self) -> usize;
    fn draw(&self, rng: &mut rng::StreamRng, out: &mut [f64]);
}

/// What happens at the terminal time and which features enter the regressors.
pub(crate) enum Terminal<'a> {
    Operator(&'a dyn CoefficientDraw),
    Fixed(&'a TerminalSource),
}

/// Summary of one trained step, evaluated on a held-out batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub t: f64,
    pub samples: usize,
    /// Adam steps or Picard iterations used.
    pub iterations: usize,
    /// Mean squared residual of the joint loss.
    pub loss: f64,
    pub y_model_mean: f64,
    /// Mean and standard error of `Y_{i+1} + dt g(t_i, Y_i, Z_i)`.
    pub y_target_mean: f64,
    pub y_target_se: f64,
    pub z_model_mean: Vec<f64>,
    /// Mean and standard error of `Y_{i+1} dB_i / dt_i`.
    pub z_target_mean: Vec<f64>,
    pub z_target_se: Vec<f64>,
}

pub(crate) struct Batch {
    pub features: Array2<f64>,
    pub next_features: Array2<f64>,
    pub terminal: Option<Array1<f64>>,
    pub dw: Array2<f64>,
}

struct BlockRows {
    features: Vec<f64>,
    next_features: Vec<f64>,
    terminal: Vec<f64>,
    dw: Vec<f64>,
}

pub(crate) struct Engine<'a> {
    pub problem: &'a Problem,
    terminal: Terminal<'a>,
    sampler: PathSampler,
    map: ForwardMap,
    knots: Vec<usize>,
    seed: u64,
    execution: Execution,
    coefficient_width: usize,
}

impl<'a> Engine<'a> {
    pub fn new(problem: &'a Problem, terminal: Terminal<'a>, seed: u64, execution: Execution) -> Result<Self> {
        let extra = match &terminal {
            Terminal::Fixed(TerminalSource::Raw(spec)) => {
                if spec.min_dimension() > problem.dimension() {
                    return Err(Error::ShapeMismatch {
                        context: "payoff dimension",
                        expected: problem.dimension(),
                        found: spec.min_dimension(),
                    });
                }
                Some(spec.required_grid()?)
            }
            Terminal::Fixed(TerminalSource::Projected(c)) => {
                if c.index_set().fingerprint() != problem.index_set.fingerprint() || c.basis() != &problem.basis {
                    return Err(Error::IndexSetMismatch(
                        "projected terminal uses a different chaos truncation".into(),
                    ));
                }
                None
            }
            Terminal::Operator(draw) => {
                if draw.width() != problem.index_set.len() {
                    return Err(Error::IndexSetMismatch(
                        "coefficient box does not match the index set".into(),
                    ));
                }
                None
            }
        };
        let sampler = problem.sampler(extra.as_ref())?;
        let map = ForwardMap::new(&problem.basis, problem.index_set.clone(), sampler.grid())?;
        let knots = problem
            .grid
            .points()
            .iter()
            .map(|&t| sampler.grid().require_index(t))
            .collect::<Result<Vec<_>>>()?;
        let coefficient_width = match terminal {
            Terminal::Operator(_) => problem.index_set.len(),
            Terminal::Fixed(_) => 0,
        };
        Ok(Self {
            problem,
            terminal,
            sampler,
            map,
            knots,
            seed,
            execution,
            coefficient_width,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.problem.index_set.len() + self.coefficient_width
    }

    pub fn steps(&self) -> usize {
        self.problem.grid.steps()
    }

    /// `n` samples for step `i`, batch `b`, from streams tagged `tag`.
    pub fn draw(&self, tag: u64, i: usize, b: u64, n: usize) -> Result<Batch> {
        let width = self.feature_width();
        let ax = self.problem.index_set.len();
        let d = self.problem.dimension();
        let last = i + 1 == self.steps();
        let (ki, kn) = (self.knots[i], self.knots[i + 1]);
        let blocks = self.execution.map_blocks(n, SAMPLE_BLOCK, |range| -> Result<BlockRows> {
            let rows = range.len();
            let mut out = BlockRows {
                features: vec![0.0; rows * width],
                next_features: vec![0.0; rows * width],
                terminal: Vec::with_capacity(if last { rows } else { 0 }),
                dw: vec![0.0; rows * d],
            };
            let mut scratch = Vec::new();
            for (r, k) in range.enumerate() {
                let key = [tag, i as u64, b, k as u64];
                let path = self.sampler.sample_stream(self.seed, &key);
                let f = &mut out.features[r * width..(r + 1) * width];
                self.map.values_into(&path, ki, &mut f[..ax], &mut scratch)?;
                let nf = &mut out.next_features[r * width..(r + 1) * width];
                self.map.values_into(&path, kn, &mut nf[..ax], &mut scratch)?;
                for j in 0..d {
                    out.dw[r * d + j] = path.value(kn, j) - path.value(ki, j);
                }
                if let Terminal::Operator(draw) = &self.terminal {
                    let mut crng = rng::stream(self.seed, &[domain::COEFFICIENTS, tag, i as u64, b, k as u64]);
                    draw.draw(&mut crng, &mut f[ax..]);
                    nf[ax..].copy_from_slice(&f[ax..]);
                }
                if last {
                    let value = match &self.terminal {
                        Terminal::Operator(_) => dot(&nf[ax..], &nf[..ax]),
                        Terminal::Fixed(TerminalSource::Projected(c)) => c.project_values(&nf[..ax]),
                        Terminal::Fixed(TerminalSource::Raw(spec)) => spec.eval(&path)?,
                    };
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!("terminal value for sample {k}")));
                    }
                    out.terminal.push(value);
                }
            }
            Ok(out)
        });
        let mut features = Vec::with_capacity(n * width);
        let mut next_features = Vec::with_capacity(n * width);
        let mut terminal = Vec::with_capacity(if last { n } else { 0 });
        let mut dw = Vec::with_capacity(n * d);
        for block in blocks {
            let block = block?;
            features.extend_from_slice(&block.features);
            next_features.extend_from_slice(&block.next_features);
            terminal.extend_from_slice(&block.terminal);
            dw.extend_from_slice(&block.dw);
        }
        Ok(Batch {
            features: Array2::from_shape_vec((n, width), features).unwrap(),
            next_features: Array2::from_shape_vec((n, width), next_features).unwrap(),
            terminal: last.then(|| Array1::from(terminal)),
            dw: Array2::from_shape_vec((n, d), dw).unwrap(),
        })
    }

    /// `Y_{i+1}` for every row of the batch.
    pub fn targets(&self, batch: &Batch, next: Option<&StepModel>) -> Result<Array1<f64>> {
        match (&batch.terminal, next) {
            (Some(t), _) => Ok(t.clone()),
            (None, Some(model)) => Ok(model.predict(batch.next_features.view()).column(0).to_owned()),
            (None, None) => Err(Error::Format("missing model for the next step".into())),
        }
    }

    /// Features at `t = 0` for given coefficient values.
    pub fn initial_features(&self, coefficients: &[f64]) -> Vec<f64> {
        let mut x = self.map.initial();
        x.extend_from_slice(coefficients);
        x
    }

    pub fn run(&self, config: &SchemeConfig) -> Result<(Vec<StepModel>, Vec<StepReport>)> {
        let n = self.steps();
        let mut models: Vec<Option<StepModel>> = vec![None; n];
        let mut reports = vec![None; n];
        for i in (0..n).rev() {
            let next = models.get(i + 1).and_then(|m| m.as_ref());
            let (model, report) = match &config.regressor {
                RegressorConfig::Linear(lc) => self.linear_step(i, next, lc, config.variant)?,
                RegressorConfig::Mlp(mc) => self.mlp_step(i, next, mc, config.variant)?,
            };
            info!(
                "step {i}: loss {:.3e}, Y mean {:.6}, Z mean {:?}",
                report.loss, report.y_model_mean, report.z_model_mean
            );
            models[i] = Some(model);
            reports[i] = Some(report);
        }
        Ok((
            models.into_iter().map(Option::unwrap).collect(),
            reports.into_iter().map(Option::unwrap).collect(),
        ))
    }

    fn step_problem(&self, i: usize, variant: Variant) -> StepProblem<'_> {
        StepProblem {
            generator: &self.problem.generator,
            t: self.problem.grid.time(i),
            dt: self.problem.grid.dt(i),
            variant,
        }
    }

    fn linear_step(
        &self,
        i: usize,
        next: Option<&StepModel>,
        config: &LinearConfig,
        variant: Variant,
    ) -> Result<(StepModel, StepReport)> {
        let d = self.problem.dimension();
        let (t, dt) = (self.problem.grid.time(i), self.problem.grid.dt(i));
        let g = &self.problem.generator;
        let batch = self.draw(domain::PATH, i, 0, config.paths)?;
        let y = self.targets(&batch, next)?;
        let n = y.len();
        let fitter = LinearFitter::new(batch.features.view())?;
        let z_rhs = DMatrix::from_fn(n, d, |k, j| y[k] * batch.dw[[k, j]] / dt);
        let wz = fitter.solve(&z_rhs)?;
        let z_fit = fitter.fitted(&wz);
        let mut zrow = vec![0.0; d];
        let rhs_for = |u: &DMatrix<f64>, zrow: &mut Vec<f64>, explicit: bool| {
            DMatrix::from_fn(n, 1, |k, _| {
                for j in 0..d {
                    zrow[j] = z_fit[(k, j)];
                }
                let y_in = if explicit { y[k] } else { u[(k, 0)] };
                y[k] + dt * g.eval(t, y_in, zrow)
            })
        };
        let y_col = DMatrix::from_fn(n, 1, |k, _| y[k]);
        let mut iterations = 0;
        let wy = match variant {
            Variant::Explicit => fitter.solve(&rhs_for(&y_col, &mut zrow, true))?,
            Variant::Implicit => {
                let mut wy = fitter.solve(&y_col)?;
                let mut u = fitter.fitted(&wy);
                for it in 0..config.picard_max_iterations {
                    iterations = it + 1;
                    let w_new = fitter.solve(&rhs_for(&u, &mut zrow, false))?;
                    let u_new = fitter.fitted(&w_new);
                    let diff = (&u_new - &u).amax();
                    let scale = 1.0 + u_new.amax();
                    wy = w_new;
                    u = u_new;
                    if diff <= config.picard_tolerance * scale {
                        break;
                    }
                }
                debug!("step {i}: Picard stopped after {iterations} iterations");
                wy
            }
        };
        let mut weights = DMatrix::zeros(wy.nrows(), 1 + d);
        weights.column_mut(0).copy_from(&wy.column(0));
        for j in 0..d {
            weights.column_mut(j + 1).copy_from(&wz.column(j));
        }
        let model = StepModel::Linear(fitter.model(&weights)?);
        let outputs = to_array(&fitter.fitted(&weights));
        let report = self.report(i, &batch, y.view(), &outputs, iterations, variant);
        Ok((model, report))
    }

    fn mlp_step(
        &self,
        i: usize,
        next: Option<&StepModel>,
        config: &MlpConfig,
        variant: Variant,
    ) -> Result<(StepModel, StepReport)> {
        let d = self.problem.dimension();
        let ax = self.problem.index_set.len();
        let width = self.feature_width();
        let t_next = self.problem.grid.time(i + 1);

        let pilot = self.draw(domain::PILOT, i, 0, config.pilot_size.max(2))?;
        let y_pilot = self.targets(&pilot, next)?;
        let scaler = FeatureScaler::fit(pilot.features.view());
        let y_mean = column_mean(y_pilot.view());
        let y_sd = column_std(y_pilot.view());
        let y_scale = if y_sd > 1e-12 * (1.0 + y_mean.abs()) { y_sd } else { 1.0 };
        let z_scale = y_scale / t_next.sqrt();
        let mut shift = vec![0.0; 1 + d];
        shift[0] = y_mean;
        let mut scale = vec![z_scale; 1 + d];
        scale[0] = y_scale;

        let mut model = match (next, config.warm_start) {
            (Some(StepModel::Mlp(prev)), true) => prev.restandardized(scaler, shift, scale)?,
            _ => {
                let hidden = config.hidden_multiplier.max(1) * ax;
                let mut m = MlpModel::he_uniform(
                    width,
                    hidden,
                    1 + d,
                    &mut rng::stream(self.seed, &[domain::INIT, i as u64]),
                );
                m.set_scaler(scaler)?;
                m.set_output_affine(shift, scale)?;
                m
            }
        };

        let step_problem = self.step_problem(i, variant);
        let mut adam = AdamState::new(config.adam(), model.params().len());
        let mut last_loss = f64::NAN;
        for s in 0..config.steps {
            let batch = self.draw(domain::PATH, i, s as u64, config.batch_size)?;
            let y = self.targets(&batch, next)?;
            let lb = LossBatch {
                features: batch.features.view(),
                y_next: y.view(),
                dw: batch.dw.view(),
            };
            let (loss, grad) = loss_and_gradient(&model, &lb, &step_problem, self.execution)
                .map_err(|e| Error::TrainingDiverged {
                    step: i,
                    detail: format!("Adam step {s}: {e}"),
                })?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: i,
                    detail: format!("loss {loss} at Adam step {s}"),
                });
            }
            last_loss = loss;
            if config.log_every > 0 && s % config.log_every == 0 {
                debug!("step {i}, Adam {s}: loss {loss:.6e}");
            }
            adam.update(model.params_mut(), &grad)?;
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged {
                step: i,
                detail: "non-finite parameters after training".into(),
            });
        }
        debug!("step {i}: final training loss {last_loss:.6e}");
        let diag = self.draw(domain::DIAGNOSTIC, i, 0, config.diagnostic_paths.max(2))?;
        let y = self.targets(&diag, next)?;
        let outputs = model.forward_batch(diag.features.view());
        let report = self.report(i, &diag, y.view(), &outputs, config.steps, variant);
        Ok((StepModel::Mlp(model), report))
    }

    fn report(
        &self,
        i: usize,
        batch: &Batch,
        y_next: ArrayView1<f64>,
        outputs: &Array2<f64>,
        iterations: usize,
        variant: Variant,
    ) -> StepReport {
        let d = self.problem.dimension();
        let (t, dt) = (self.problem.grid.time(i), self.problem.grid.dt(i));
        let g = &self.problem.generator;
        let n = y_next.len();
        let mut y_target = Moments::new(1);
        let mut z_target = Moments::new(d);
        let mut loss = 0.0;
        let mut zrow = vec![0.0; d];
        let mut zt = vec![0.0; d];
        for k in 0..n {
            let u = outputs[[k, 0]];
            for j in 0..d {
                zrow[j] = outputs[[k, j + 1]];
                zt[j] = y_next[k] * batch.dw[[k, j]] / dt;
            }
            let y_in = match variant {
                Variant::Implicit => u,
                Variant::Explicit => y_next[k],
            };
            let gv = g.eval(t, y_in, &zrow);
            y_target.push(&[y_next[k] + dt * gv]);
            z_target.push(&zt);
            let mut r = u - y_next[k] - dt * gv;
            for j in 0..d {
                r += zrow[j] * batch.dw[[k, j]];
            }
            loss += r * r;
        }
        let model_means = outputs.mean_axis(Axis(0)).unwrap();
        StepReport {
            step: i,
            t,
            samples: n,
            iterations,
            loss: loss / n as f64,
            y_model_mean: model_means[0],
            y_target_mean: y_target.mean()[0],
            y_target_se: y_target.stderr()[0],
            z_model_mean: model_means.iter().skip(1).copied().collect(),
            z_target_mean: z_target.mean().to_vec(),
            z_target_se: z_target.stderr(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
