//! Config-driven pipelines: box estimation, operator training, evaluation on
//! the parameter grid, baselines, and mesh-refinement studies. Every stage
//! writes its artifacts before the next one starts.

pub mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;

pub use config::{
    validate_config, validate_value, BaselineConfig, BaselineTerminal, BoxConfig, ChaosConfig, ConvergenceConfig,
    ExperimentConfig, ParameterAxis,
};

use crate::baselines::{backward_euler_fixed, mc_delta, mc_price_linear};
use crate::chaos::{ChaosCoefficients, EstimateOptions};
use crate::error::Error;
use crate::exec::Execution;
use crate::grid::TimeGrid;
use crate::models::GeneratorSpec;
use crate::operator::{box_from_family, estimate_operator_error, train_operator, CoefficientBox, OperatorSolution};
use crate::rng::child_seed;
use crate::scheme::{SchemeConfig, TerminalSource};

/// A failure tagged with the pipeline stage it happened in.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> StageResult<T>;
}

impl<T, E: Into<Error>> Stage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> StageResult<T> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

/// Seeds of the independent stages, all derived from the config seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub coefficients: u64,
    pub training: u64,
    pub baseline: u64,
    pub evaluation: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            master,
            coefficients: child_seed(master, &[1]),
            training: child_seed(master, &[2]),
            baseline: child_seed(master, &[3]),
            evaluation: child_seed(master, &[4]),
        }
    }
}

/// Run-level options that do not change results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub execution: Execution,
    pub workers: Option<usize>,
}

/// A float with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> crate::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| fmt_float(*v)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Terminal coefficients estimated on the parameter grid and their envelope.
#[derive(Debug, Clone)]
pub struct BoxArtifacts {
    pub points: Vec<Vec<f64>>,
    pub estimates: Vec<ChaosCoefficients>,
    pub coefficient_box: CoefficientBox,
}

pub fn coefficient_dir(out: &Path) -> PathBuf {
    out.join("coefficients")
}

pub fn operator_dir(out: &Path) -> PathBuf {
    out.join("operator")
}

/// Estimates the coefficients of every parameter-grid terminal with common
/// random numbers and writes them under `out/coefficients`.
pub fn estimate_box(cfg: &ExperimentConfig, opts: &RunOptions, out: &Path) -> StageResult<BoxArtifacts> {
    let seeds = Seeds::from_master(cfg.seed);
    let grid = cfg.parameter_grid().stage("estimate-box")?;
    let (points, specs): (Vec<_>, Vec<_>) = grid.into_iter().unzip();
    let basis = cfg.basis().stage("estimate-box")?;
    let index_set = cfg.index_set().stage("estimate-box")?;
    let mut options = EstimateOptions::new(cfg.coefficient_box.samples, seeds.coefficients);
    options.antithetic = cfg.coefficient_box.antithetic;
    options.execution = opts.execution;
    let corr = cfg.correlation_matrix();
    let (coefficient_box, estimates) =
        box_from_family(&specs, &index_set, &basis, corr.as_deref(), &options).stage("estimate-box")?;
    let dir = coefficient_dir(out);
    fs::create_dir_all(&dir).stage("estimate-box")?;
    for (k, c) in estimates.iter().enumerate() {
        c.save(&dir.join(format!("point_{k:04}.txt"))).stage("estimate-box")?;
    }
    let header: Vec<String> = cfg.parameters.iter().map(|a| a.name.clone()).collect();
    write_csv(&dir.join("points.csv"), &header, &points).stage("estimate-box")?;
    info!("coefficient box over {} terminal conditions, |A| = {}", points.len(), index_set.len());
    Ok(BoxArtifacts {
        points,
        estimates,
        coefficient_box,
    })
}

/// Reads coefficient files written by [`estimate_box`].
pub fn load_box(cfg: &ExperimentConfig, out: &Path) -> StageResult<BoxArtifacts> {
    let points: Vec<Vec<f64>> = cfg
        .parameter_grid()
        .stage("load-box")?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let dir = coefficient_dir(out);
    let estimates = (0..points.len())
        .map(|k| ChaosCoefficients::load(&dir.join(format!("point_{k:04}.txt"))))
        .collect::<crate::Result<Vec<_>>>()
        .stage("load-box")?;
    let expected = cfg.index_set().stage("load-box")?;
    if estimates.iter().any(|c| c.index_set().fingerprint() != expected.fingerprint()) {
        return Err(Error::IndexSetMismatch("stored coefficients do not match the config".into())).stage("load-box");
    }
    let coefficient_box = CoefficientBox::envelope(&estimates).stage("load-box")?;
    Ok(BoxArtifacts {
        points,
        estimates,
        coefficient_box,
    })
}

fn scheme_config(cfg: &ExperimentConfig, regressor: crate::scheme::RegressorConfig, seed: u64, opts: &RunOptions) -> SchemeConfig {
    SchemeConfig {
        regressor,
        variant: cfg.variant,
        seed,
        execution: opts.execution,
    }
}

/// Trains the operator on the box and saves it under `out/operator`.
pub fn train(cfg: &ExperimentConfig, boxes: &BoxArtifacts, opts: &RunOptions, out: &Path) -> StageResult<OperatorSolution> {
    let seeds = Seeds::from_master(cfg.seed);
    let problem = cfg.problem(cfg.scheme_grid().stage("train")?).stage("train")?;
    let sc = scheme_config(cfg, cfg.regressor, seeds.training, opts);
    let sol = train_operator(&problem, &boxes.coefficient_box, &sc).stage("train")?;
    sol.save(&operator_dir(out)).stage("train")?;
    Ok(sol)
}

/// `(Y_0, Z_0)` of the operator at every parameter-grid point.
pub fn evaluate(sol: &OperatorSolution, boxes: &BoxArtifacts) -> StageResult<Vec<(f64, Vec<f64>)>> {
    boxes
        .estimates
        .iter()
        .map(|c| sol.value_at_zero(c))
        .collect::<crate::Result<Vec<_>>>()
        .stage("evaluate")
}

/// A baseline value with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineValue {
    pub y0: f64,
    pub y0_se: f64,
    pub z0: Vec<f64>,
    pub z0_se: Vec<f64>,
}

/// The configured baseline at every parameter-grid point.
pub fn baseline(cfg: &ExperimentConfig, boxes: Option<&BoxArtifacts>, opts: &RunOptions) -> StageResult<Vec<BaselineValue>> {
    let seeds = Seeds::from_master(cfg.seed);
    let grid = cfg.parameter_grid().stage("baseline")?;
    let mut out = Vec::with_capacity(grid.len());
    match cfg.baseline {
        BaselineConfig::MonteCarlo {
            paths,
            antithetic,
            bump,
        } => {
            let GeneratorSpec::LinearRate { rate, .. } = cfg.generator else {
                return Err(crate::error::param("baseline", "monte_carlo requires a linear_rate generator"))
                    .stage("baseline");
            };
            let corr = cfg.correlation_matrix();
            for (_, spec) in &grid {
                let price = mc_price_linear(spec, rate, paths, seeds.baseline, antithetic, corr.as_deref(), opts.execution)
                    .stage("baseline")?;
                let delta = mc_delta(spec, rate, bump, paths, seeds.baseline, opts.execution).stage("baseline")?;
                out.push(BaselineValue {
                    y0: price.value,
                    y0_se: price.stderr,
                    z0: vec![delta.value],
                    z0_se: vec![delta.stderr],
                });
            }
        }
        BaselineConfig::BackwardEuler { regressor, terminal } => {
            let problem = cfg.problem(cfg.scheme_grid().stage("baseline")?).stage("baseline")?;
            let sc = scheme_config(cfg, regressor, seeds.baseline, opts);
            for (k, (_, spec)) in grid.iter().enumerate() {
                let source = match terminal {
                    BaselineTerminal::Raw => TerminalSource::Raw(spec.clone()),
                    BaselineTerminal::Projected => {
                        let b = boxes.ok_or_else(|| StageError {
                            stage: "baseline",
                            source: crate::error::param("baseline.terminal", "projected baseline needs box estimates"),
                        })?;
                        TerminalSource::Projected(b.estimates[k].clone())
                    }
                };
                let fixed = backward_euler_fixed(&source, &problem, &sc).stage("baseline")?;
                out.push(BaselineValue {
                    y0: fixed.y0,
                    y0_se: fixed.y0_se,
                    z0: fixed.z0,
                    z0_se: fixed.z0_se,
                });
            }
        }
    }
    Ok(out)
}

/// Column names of the results table.
pub fn results_header(cfg: &ExperimentConfig) -> Vec<String> {
    let mut h: Vec<String> = cfg.parameters.iter().map(|a| a.name.clone()).collect();
    let d = cfg.dimension;
    let z = |prefix: &str, suffix: &str| -> Vec<String> {
        if d == 1 {
            vec![format!("{prefix}_Z0{suffix}")]
        } else {
            (0..d).map(|j| format!("{prefix}_Z0_{j}{suffix}")).collect()
        }
    };
    h.push("operator_Y0".into());
    h.extend(z("operator", ""));
    h.push("baseline_Y0".into());
    h.push("baseline_Y0_stderr".into());
    for j in 0..d {
        h.push(z("baseline", "")[j].clone());
        h.push(z("baseline", "_stderr")[j].clone());
    }
    h.push("abs_err".into());
    h.push("rel_err".into());
    h
}

pub fn results_rows(points: &[Vec<f64>], operator: &[(f64, Vec<f64>)], base: &[BaselineValue]) -> Vec<Vec<f64>> {
    points
        .iter()
        .zip(operator)
        .zip(base)
        .map(|((p, (y, z)), b)| {
            let mut row = p.clone();
            row.push(*y);
            row.extend_from_slice(z);
            row.push(b.y0);
            row.push(b.y0_se);
            for j in 0..b.z0.len() {
                row.push(b.z0[j]);
                row.push(b.z0_se[j]);
            }
            let abs = (y - b.y0).abs();
            row.push(abs);
            row.push(if b.y0 != 0.0 { abs / b.y0.abs() } else { f64::NAN });
            row
        })
        .collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    seeds: Seeds,
    execution: Execution,
    workers: Option<usize>,
    index_set_size: usize,
    index_set_fingerprint: String,
    parameter_points: usize,
    stage_seconds: Vec<(&'static str, f64)>,
}

/// Everything produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Box estimation, training, evaluation and baselines, written to `out`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions, out: &Path) -> StageResult<ExperimentOutput> {
    fs::create_dir_all(out).stage("setup")?;
    write_json(&out.join("config.json"), cfg).stage("setup")?;
    let mut timing = Vec::new();
    let clock = Instant::now();
    let boxes = estimate_box(cfg, opts, out)?;
    timing.push(("estimate-box", clock.elapsed().as_secs_f64()));
    let clock = Instant::now();
    let sol = train(cfg, &boxes, opts, out)?;
    timing.push(("train", clock.elapsed().as_secs_f64()));
    let clock = Instant::now();
    let operator = evaluate(&sol, &boxes)?;
    timing.push(("evaluate", clock.elapsed().as_secs_f64()));
    let clock = Instant::now();
    let base = baseline(cfg, Some(&boxes), opts)?;
    timing.push(("baseline", clock.elapsed().as_secs_f64()));
    let header = results_header(cfg);
    let rows = results_rows(&boxes.points, &operator, &base);
    write_csv(&out.join("results.csv"), &header, &rows).stage("write")?;
    let index_set = sol.problem.index_set.clone();
    let manifest = Manifest {
        tool: "opbsde",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        seeds: Seeds::from_master(cfg.seed),
        execution: opts.execution,
        workers: opts.workers,
        index_set_size: index_set.len(),
        index_set_fingerprint: index_set.fingerprint(),
        parameter_points: boxes.points.len(),
        stage_seconds: timing,
    };
    write_json(&out.join("manifest.json"), &manifest).stage("write")?;
    Ok(ExperimentOutput {
        dir: out.to_path_buf(),
        header,
        rows,
    })
}

/// One mesh of a convergence study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub mesh: f64,
    pub eps_y: f64,
    pub eps_y_se: f64,
    pub eps_z: f64,
    pub eps_z_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceOutput {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slopes of `log eps` against `log |pi|`.
    pub slope_y: f64,
    pub slope_z: f64,
}

/// Least-squares slope of `log y` on `log x` over entries with positive `y`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Trains the operator on each nested grid and measures its error at the
/// base terminal condition against the backward Euler scheme on the
/// reference grid.
pub fn run_convergence(cfg: &ExperimentConfig, opts: &RunOptions, out: &Path) -> StageResult<ConvergenceOutput> {
    let conv = cfg
        .convergence
        .clone()
        .ok_or_else(|| crate::error::param("convergence", "section missing from the config"))
        .stage("convergence")?;
    fs::create_dir_all(out).stage("setup")?;
    write_json(&out.join("config.json"), cfg).stage("setup")?;
    let seeds = Seeds::from_master(cfg.seed);
    let boxes = estimate_box(cfg, opts, out)?;
    let base_spec = cfg.base_terminal().stage("convergence")?;
    let base_coefficients = {
        let (_, est) = box_from_family(
            std::slice::from_ref(&base_spec),
            &cfg.index_set().stage("convergence")?,
            &cfg.basis().stage("convergence")?,
            cfg.correlation_matrix().as_deref(),
            &{
                let mut o = EstimateOptions::new(cfg.coefficient_box.samples, seeds.coefficients);
                o.antithetic = cfg.coefficient_box.antithetic;
                o.execution = opts.execution;
                o
            },
        )
        .stage("convergence")?;
        est.into_iter().next().unwrap()
    };
    let reference_problem = cfg
        .problem(TimeGrid::uniform(cfg.horizon, conv.reference_steps).stage("reference")?)
        .stage("reference")?;
    let reference_regressor = conv.reference_regressor.unwrap_or(cfg.regressor);
    let reference = backward_euler_fixed(
        &TerminalSource::Raw(base_spec.clone()),
        &reference_problem,
        &scheme_config(cfg, reference_regressor, seeds.baseline, opts),
    )
    .stage("reference")?;
    let mut rows = Vec::new();
    for &n in &conv.steps {
        let problem = cfg
            .problem(TimeGrid::uniform(cfg.horizon, n).stage("train")?)
            .stage("train")?;
        let sol = train_operator(
            &problem,
            &boxes.coefficient_box,
            &scheme_config(cfg, cfg.regressor, seeds.training, opts),
        )
        .stage("train")?;
        let report = estimate_operator_error(
            &sol,
            &base_coefficients,
            Some(&base_spec),
            &reference,
            conv.evaluation_paths,
            seeds.evaluation,
            opts.execution,
        )
        .stage("evaluate")?;
        info!("n = {n}: eps_Y {:.4e} +- {:.1e}, eps_Z {:.4e}", report.eps_y, report.eps_y_se, report.eps_z);
        rows.push(ConvergenceRow {
            steps: n,
            mesh: problem.grid.mesh(),
            eps_y: report.eps_y,
            eps_y_se: report.eps_y_se,
            eps_z: report.eps_z,
            eps_z_se: report.eps_z_se,
        });
    }
    let mesh: Vec<f64> = rows.iter().map(|r| r.mesh).collect();
    let output = ConvergenceOutput {
        slope_y: log_log_slope(&mesh, &rows.iter().map(|r| r.eps_y).collect::<Vec<_>>()),
        slope_z: log_log_slope(&mesh, &rows.iter().map(|r| r.eps_z).collect::<Vec<_>>()),
        rows,
    };
    let header: Vec<String> = ["steps", "mesh", "eps_y", "eps_y_stderr", "eps_z", "eps_z_stderr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let table: Vec<Vec<f64>> = output
        .rows
        .iter()
        .map(|r| vec![r.steps as f64, r.mesh, r.eps_y, r.eps_y_se, r.eps_z, r.eps_z_se])
        .collect();
    write_csv(&out.join("convergence.csv"), &header, &table).stage("write")?;
    write_csv(
        &out.join("slope.csv"),
        &["slope_y".into(), "slope_z".into()],
        &[vec![output.slope_y, output.slope_z]],
    )
    .stage("write")?;
    Ok(output)
}
