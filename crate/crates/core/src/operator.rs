//! The operator Euler scheme: per-step maps `(X_{t_i}, d) -> (Y_i, Z_i)`
//! trained over terminal conditions drawn uniformly from a coefficient box.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chaos::{estimate_coefficients, BasisSpec, ChaosCoefficients, EstimateOptions, IndexSet};
use crate::error::{Error, Result};
use crate::exec::{Execution, BLOCK};
use crate::grid::TimeGrid;
use crate::models::{Generator, GeneratorSpec, TerminalSpec};
use crate::regression::io::{read_model, write_model};
use crate::regression::StepModel;
use crate::rng::{self, domain, StreamRng};
use crate::scheme::{CoefficientDraw, Engine, Problem, SchemeConfig, StepReport, Terminal};
use crate::simulation::{initial_values, BrownianPath, ForwardMap, ForwardState, PathSampler};
use crate::stats::Moments;

/// A product of intervals `[lower_a, upper_a]`, one per chaos index.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBox {
    index_set: Arc<IndexSet>,
    basis: BasisSpec,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl CoefficientBox {
    pub fn new(index_set: Arc<IndexSet>, basis: BasisSpec, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != index_set.len() || upper.len() != index_set.len() {
            return Err(Error::ShapeMismatch {
                context: "coefficient box bounds",
                expected: index_set.len(),
                found: lower.len().min(upper.len()),
            });
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::NonFinite(format!("box bound for index {i}")));
            }
            if lo > hi {
                return Err(crate::error::param(
                    "box",
                    format!("interval {i} has lower {lo} above upper {hi}"),
                ));
            }
        }
        Ok(Self {
            index_set,
            basis,
            lower,
            upper,
        })
    }

    /// The single-point box `{c}`.
    pub fn degenerate(c: &ChaosCoefficients) -> Self {
        Self {
            index_set: c.index_set().clone(),
            basis: c.basis().clone(),
            lower: c.values().to_vec(),
            upper: c.values().to_vec(),
        }
    }

    /// The smallest box containing every member.
    pub fn envelope(members: &[ChaosCoefficients]) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| crate::error::param("family", "must not be empty"))?;
        let mut b = Self::degenerate(first);
        for c in &members[1..] {
            if c.index_set().fingerprint() != b.index_set.fingerprint() {
                return Err(Error::IndexSetMismatch("family members use different index sets".into()));
            }
            for (i, v) in c.values().iter().enumerate() {
                b.lower[i] = b.lower[i].min(*v);
                b.upper[i] = b.upper[i].max(*v);
            }
        }
        Ok(b)
    }

    pub fn index_set(&self) -> &Arc<IndexSet> {
        &self.index_set
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == self.lower.len()
            && values
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for ((o, lo), hi) in out.iter_mut().zip(&self.lower).zip(&self.upper) {
            *o = if lo == hi {
                *lo
            } else {
                let u: f64 = rng.random();
                (lo + (hi - lo) * u).clamp(*lo, *hi)
            };
        }
    }
}

impl CoefficientDraw for CoefficientBox {
    fn width(&self) -> usize {
        self.lower.len()
    }

    fn draw(&self, rng: &mut StreamRng, out: &mut [f64]) {
        self.fill(rng, out)
    }
}

/// One draw from the uniform law on the box.
pub fn sample_coefficients<R: Rng + ?Sized>(cbox: &CoefficientBox, rng: &mut R) -> ChaosCoefficients {
    let mut values = vec![0.0; cbox.lower.len()];
    cbox.fill(rng, &mut values);
    ChaosCoefficients::new(cbox.index_set.clone(), cbox.basis.clone(), values)
        .expect("box bounds are finite and sized to the index set")
}

/// Estimates the coefficients of every family member with common random
/// numbers and returns their envelope together with the estimates.
pub fn box_from_family(
    family: &[TerminalSpec],
    index_set: &Arc<IndexSet>,
    basis: &BasisSpec,
    correlation: Option<&[f64]>,
    options: &EstimateOptions,
) -> Result<(CoefficientBox, Vec<ChaosCoefficients>)> {
    if family.is_empty() {
        return Err(crate::error::param("family", "parameter grid must not be empty"));
    }
    let mut grid = basis.partition().clone();
    for spec in family {
        grid = grid.union(&spec.required_grid()?)?;
    }
    let d = basis.dimension();
    let sampler = PathSampler::new(grid, d, correlation)?;
    let estimates = family
        .iter()
        .map(|spec| estimate_coefficients(spec, index_set, basis, &sampler, options))
        .collect::<Result<Vec<_>>>()?;
    Ok((CoefficientBox::envelope(&estimates)?, estimates))
}

/// Trained per-step regressors for the operator scheme.
#[derive(Debug, Clone)]
pub struct OperatorSolution {
    pub problem: Problem,
    pub models: Vec<StepModel>,
    pub reports: Vec<StepReport>,
    pub coefficient_box: CoefficientBox,
    pub config: SchemeConfig,
}

/// Runs the operator scheme backwards from the terminal time.
pub fn train_operator(problem: &Problem, cbox: &CoefficientBox, config: &SchemeConfig) -> Result<OperatorSolution> {
    if cbox.index_set().fingerprint() != problem.index_set.fingerprint() || cbox.basis() != &problem.basis {
        return Err(Error::IndexSetMismatch(
            "coefficient box was built for a different chaos truncation".into(),
        ));
    }
    let engine = Engine::new(problem, Terminal::Operator(cbox), config.seed, config.execution)?;
    let (models, reports) = engine.run(config)?;
    Ok(OperatorSolution {
        problem: problem.clone(),
        models,
        reports,
        coefficient_box: cbox.clone(),
        config: *config,
    })
}

impl OperatorSolution {
    pub fn steps(&self) -> usize {
        self.problem.grid.steps()
    }

    fn check_coefficients(&self, coefficients: &ChaosCoefficients) -> Result<()> {
        if coefficients.index_set().fingerprint() != self.problem.index_set.fingerprint()
            || coefficients.basis() != &self.problem.basis
        {
            return Err(Error::IndexSetMismatch(
                "coefficients use a different chaos truncation than the operator".into(),
            ));
        }
        Ok(())
    }

    /// `(Y_i, Z_i)` from a forward state vector and coefficient values.
    pub fn evaluate_values(&self, i: usize, x: &[f64], coefficients: &[f64]) -> Result<(f64, Vec<f64>)> {
        let ax = self.problem.index_set.len();
        let d = self.problem.dimension();
        if x.len() != ax || coefficients.len() != ax {
            return Err(Error::IndexSetMismatch(format!(
                "expected {ax} state and coefficient entries, found {} and {}",
                x.len(),
                coefficients.len()
            )));
        }
        if i > self.steps() {
            return Err(crate::error::param("i", format!("step {i} beyond {}", self.steps())));
        }
        if i == self.steps() {
            let y = coefficients.iter().zip(x).map(|(c, v)| c * v).sum();
            return Ok((y, vec![0.0; d]));
        }
        let mut features = Vec::with_capacity(2 * ax);
        features.extend_from_slice(x);
        features.extend_from_slice(coefficients);
        let out = self.models[i].predict_row(&features)?;
        Ok((out[0], out[1..].to_vec()))
    }

    /// `(Y_0, Z_0)` for the given terminal coefficients.
    pub fn value_at_zero(&self, coefficients: &ChaosCoefficients) -> Result<(f64, Vec<f64>)> {
        self.check_coefficients(coefficients)?;
        let x0 = initial_values(&self.problem.index_set);
        self.evaluate_values(0, &x0, coefficients.values())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let fp = self.problem.index_set.fingerprint();
        let mut files = Vec::new();
        for (i, model) in self.models.iter().enumerate() {
            let name = format!("step_{i:04}.model");
            let mut w = BufWriter::new(fs::File::create(dir.join(&name))?);
            write_model(&mut w, model, &fp)?;
            w.flush()?;
            files.push(name);
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            grid: self.problem.grid.clone(),
            basis_partition: self.problem.basis.partition().clone(),
            dimension: self.problem.dimension(),
            order: self.problem.index_set.order(),
            index_set_fingerprint: fp,
            generator: self.problem.generator.spec().clone(),
            correlation: self.problem.correlation.clone(),
            config: self.config,
            box_lower: self.coefficient_box.lower.clone(),
            box_upper: self.coefficient_box.upper.clone(),
            model_files: files,
            reports: self.reports.clone(),
        };
        let mut w = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_reader(BufReader::new(fs::File::open(dir.join("manifest.json"))?))?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported operator manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        let basis = BasisSpec::new(manifest.basis_partition, manifest.dimension)?;
        let index_set = Arc::new(IndexSet::new(manifest.order, basis.slots())?);
        if index_set.fingerprint() != manifest.index_set_fingerprint {
            return Err(Error::IndexSetMismatch("manifest fingerprint does not match".into()));
        }
        let generator = Generator::new(manifest.generator, manifest.dimension)?;
        let problem = Problem::new(manifest.grid, basis.clone(), index_set.clone(), generator, manifest.correlation)?;
        if manifest.model_files.len() != problem.grid.steps() {
            return Err(Error::Format("one model file per step expected".into()));
        }
        let mut models = Vec::with_capacity(manifest.model_files.len());
        for name in &manifest.model_files {
            let (model, fp) = read_model(BufReader::new(fs::File::open(dir.join(name))?))?;
            if fp != manifest.index_set_fingerprint {
                return Err(Error::IndexSetMismatch(format!("{name} was trained on another index set")));
            }
            models.push(model);
        }
        let coefficient_box = CoefficientBox::new(index_set, basis, manifest.box_lower, manifest.box_upper)?;
        Ok(Self {
            problem,
            models,
            reports: manifest.reports,
            coefficient_box,
            config: manifest.config,
        })
    }
}

const MANIFEST_FORMAT: &str = "opbsde-operator";
const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    grid: TimeGrid,
    basis_partition: TimeGrid,
    dimension: usize,
    order: u32,
    index_set_fingerprint: String,
    generator: GeneratorSpec,
    correlation: Option<Vec<f64>>,
    config: SchemeConfig,
    box_lower: Vec<f64>,
    box_upper: Vec<f64>,
    model_files: Vec<String>,
    reports: Vec<StepReport>,
}

/// `(Y_i, Z_i)` of the operator at a forward state.
pub fn evaluate_operator(
    sol: &OperatorSolution,
    i: usize,
    state: &ForwardState,
    coefficients: &ChaosCoefficients,
) -> Result<(f64, Vec<f64>)> {
    sol.check_coefficients(coefficients)?;
    if state.index_set.fingerprint() != sol.problem.index_set.fingerprint() {
        return Err(Error::IndexSetMismatch("forward state uses a different index set".into()));
    }
    sol.evaluate_values(i, &state.values, coefficients.values())
}

/// A solution `(Y, Z)` defined on the points of a grid, evaluated pathwise.
pub trait ReferenceSolution: Sync {
    fn grid(&self) -> &TimeGrid;
    /// Grid points the path must contain for [`ReferenceSolution::solution`].
    fn required_grid(&self) -> Result<TimeGrid>;
    /// `(Y, Z)` at grid point `i` of [`ReferenceSolution::grid`].
    fn solution(&self, i: usize, path: &BrownianPath) -> Result<(f64, Vec<f64>)>;
}

/// The operator frozen at one terminal condition.
pub struct OperatorAt<'a> {
    pub solution: &'a OperatorSolution,
    pub coefficients: &'a ChaosCoefficients,
}

impl ReferenceSolution for OperatorAt<'_> {
    fn grid(&self) -> &TimeGrid {
        &self.solution.problem.grid
    }

    fn required_grid(&self) -> Result<TimeGrid> {
        self.solution.problem.simulation_grid(None)
    }

    fn solution(&self, i: usize, path: &BrownianPath) -> Result<(f64, Vec<f64>)> {
        let p = &self.solution.problem;
        let map = ForwardMap::new(&p.basis, p.index_set.clone(), path.grid())?;
        let k = path.grid().require_index(p.grid.time(i))?;
        let x = map.values(path, k)?;
        self.solution.evaluate_values(i, &x, self.coefficients.values())
    }
}

/// A reference given in closed form as `f(t, path, k)` with `k` the path grid
/// index of `t`.
pub struct ExactReference<F> {
    pub grid: TimeGrid,
    pub f: F,
}

impl<F> ReferenceSolution for ExactReference<F>
where
    F: Fn(f64, &BrownianPath, usize) -> (f64, Vec<f64>) + Sync,
{
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn required_grid(&self) -> Result<TimeGrid> {
        Ok(self.grid.clone())
    }

    fn solution(&self, i: usize, path: &BrownianPath) -> Result<(f64, Vec<f64>)> {
        let t = self.grid.time(i);
        let k = path.grid().require_index(t)?;
        Ok((self.f)(t, path, k))
    }
}

/// Monte Carlo estimate of the error functional against a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub paths: usize,
    /// `E|Y_i - Y_i^ref|^2` with standard error, for `i = 0..n-1`.
    pub y_error: Vec<(f64, f64)>,
    /// `max_i E|Delta Y_i|^2` and the standard error at the maximising step.
    pub eps_y: f64,
    pub eps_y_se: f64,
    /// `sum_i dt_i E|Delta Z_i|^2` with standard error.
    pub eps_z: f64,
    pub eps_z_se: f64,
    /// `E|xi - Pi xi|^2` with standard error, when a payoff was supplied.
    pub projection_error: Option<(f64, f64)>,
    /// Either `exact` or `estimated` (with the sample count).
    pub coefficient_source: String,
}

/// Estimates `max_i E|Y_i - Y_i^ref|^2` and `sum_i dt_i E|Z_i - Z_i^ref|^2`
/// over the points of the operator grid, on paths from the evaluation stream.
pub fn estimate_operator_error(
    sol: &OperatorSolution,
    coefficients: &ChaosCoefficients,
    terminal: Option<&TerminalSpec>,
    reference: &dyn ReferenceSolution,
    n_paths: usize,
    seed: u64,
    execution: Execution,
) -> Result<ErrorReport> {
    sol.check_coefficients(coefficients)?;
    if n_paths == 0 {
        return Err(crate::error::param("n_paths", "must be at least 1"));
    }
    let p = &sol.problem;
    if !reference.grid().contains_grid(&p.grid) {
        return Err(Error::InvalidGrid(
            "reference grid must contain every operator grid point".into(),
        ));
    }
    let mut sim = p.simulation_grid(None)?.union(&reference.required_grid()?)?;
    if let Some(spec) = terminal {
        sim = sim.union(&spec.required_grid()?)?;
    }
    let sampler = PathSampler::new(sim, p.dimension(), p.correlation.as_deref())?;
    let map = ForwardMap::new(&p.basis, p.index_set.clone(), sampler.grid())?;
    let n = p.grid.steps();
    let ref_index: Vec<usize> = p
        .grid
        .points()
        .iter()
        .map(|&t| reference.grid().require_index(t))
        .collect::<Result<_>>()?;
    let op_knots: Vec<usize> = p
        .grid
        .points()
        .iter()
        .map(|&t| sampler.grid().require_index(t))
        .collect::<Result<_>>()?;
    let width = n + 2;
    let parts = execution.map_blocks(n_paths, BLOCK, |range| -> Result<Moments> {
        let mut m = Moments::new(width);
        let mut x = vec![0.0; map.len()];
        let mut scratch = Vec::new();
        let mut obs = vec![0.0; width];
        for k in range {
            let path = sampler.sample_stream(seed, &[domain::EVALUATION, k as u64]);
            let mut z_sum = 0.0;
            for i in 0..n {
                map.values_into(&path, op_knots[i], &mut x, &mut scratch)?;
                let (y, z) = sol.evaluate_values(i, &x, coefficients.values())?;
                let (yr, zr) = reference.solution(ref_index[i], &path)?;
                obs[i] = (y - yr).powi(2);
                z_sum += p.grid.dt(i) * z.iter().zip(&zr).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
            obs[n] = z_sum;
            obs[n + 1] = match terminal {
                Some(spec) => {
                    map.values_into(&path, op_knots[n], &mut x, &mut scratch)?;
                    (spec.eval(&path)? - coefficients.project_values(&x)).powi(2)
                }
                None => 0.0,
            };
            m.push(&obs);
        }
        Ok(m)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let total = Moments::merge_all(width, &parts);
    let se = total.stderr();
    let mean = total.mean();
    let y_error: Vec<(f64, f64)> = (0..n).map(|i| (mean[i], se[i])).collect();
    let (arg, _) = y_error
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .unwrap();
    Ok(ErrorReport {
        paths: n_paths,
        eps_y: y_error[arg].0,
        eps_y_se: y_error[arg].1,
        y_error,
        eps_z: mean[n],
        eps_z_se: se[n],
        projection_error: terminal.map(|_| (mean[n + 1], se[n + 1])),
        coefficient_source: if coefficients.is_exact() {
            "exact".into()
        } else {
            format!("estimated ({} samples)", coefficients.samples())
        },
    })
}

/// Draws `n` coefficient vectors from the box using the stream
/// `(seed, [COEFFICIENTS, u64::MAX, k])`, disjoint from the training draws.
pub fn sample_many(cbox: &CoefficientBox, n: usize, seed: u64) -> Vec<ChaosCoefficients> {
    (0..n)
        .map(|k| sample_coefficients(cbox, &mut rng::stream(seed, &[domain::COEFFICIENTS, u64::MAX, k as u64])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> CoefficientBox {
        let basis = BasisSpec::new(TimeGrid::uniform(1.0, 2).unwrap(), 1).unwrap();
        let set = Arc::new(IndexSet::new(1, 2).unwrap());
        CoefficientBox::new(set, basis, vec![1.0, -1.0, 0.5], vec![2.0, 1.0, 0.5]).unwrap()
    }

    #[test]
    fn draws_stay_inside() {
        let b = unit_box();
        let mut rng = rng::stream(1, &[0]);
        for _ in 0..1000 {
            let c = sample_coefficients(&b, &mut rng);
            assert!(b.contains(c.values()));
            assert_eq!(c.values()[2], 0.5);
        }
    }

    #[test]
    fn rejects_inverted_bounds() {
        let basis = BasisSpec::new(TimeGrid::uniform(1.0, 2).unwrap(), 1).unwrap();
        let set = Arc::new(IndexSet::new(1, 2).unwrap());
        assert!(CoefficientBox::new(set, basis, vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]).is_err());
    }
}
