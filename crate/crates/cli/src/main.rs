use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use opbsde::experiment::{self, ExperimentConfig, RunOptions, StageError};
use opbsde::operator::OperatorSolution;
use opbsde::Execution;

#[derive(Parser)]
#[command(name = "opbsde", version, about = "Operator Euler scheme for BSDEs over truncated Wiener chaos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Size of the worker pool.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run every loop on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate chaos coefficients on the parameter grid and their box.
    EstimateBox(Common),
    /// Train the operator, reusing stored coefficients when present.
    Train(Common),
    /// Evaluate a stored operator on the parameter grid.
    Evaluate(Common),
    /// Compute baseline values on the parameter grid.
    Baseline(Common),
    /// Run the full pipeline.
    Experiment(Common),
    /// Run the mesh-refinement study.
    Convergence(Common),
    /// Check a config and print it with defaults filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Invalid(Vec<String>),
    Stage(StageError),
    Io(&'static str, std::io::Error),
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::Stage(e)
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Io("read-config", e))?;
    experiment::validate_config(&text).map_err(Failure::Invalid)
}

struct Setup {
    cfg: ExperimentConfig,
    opts: RunOptions,
    out: PathBuf,
}

fn setup(c: &Common) -> Result<Setup, Failure> {
    let mut cfg = load_config(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(w) = c.workers {
        if !opbsde::exec::set_workers(w) {
            log::warn!("worker pool already initialised; --workers {w} ignored");
        }
    }
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output));
    if let Some(o) = &c.out {
        cfg.output = o.display().to_string();
    }
    let opts = RunOptions {
        execution: if c.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
        workers: c.workers,
    };
    Ok(Setup { cfg, opts, out })
}

fn box_for(s: &Setup) -> Result<experiment::BoxArtifacts, Failure> {
    if experiment::coefficient_dir(&s.out).join("point_0000.txt").exists() {
        info!("reusing coefficients in {}", experiment::coefficient_dir(&s.out).display());
        Ok(experiment::load_box(&s.cfg, &s.out)?)
    } else {
        Ok(experiment::estimate_box(&s.cfg, &s.opts, &s.out)?)
    }
}

fn csv_line(values: &[f64]) -> String {
    values.iter().map(|v| experiment::fmt_float(*v)).collect::<Vec<_>>().join(",")
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>], stage: &'static str) -> Result<(), Failure> {
    let mut text = header.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&csv_line(r));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Failure::Io(stage, e))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serialises"));
        }
        Command::EstimateBox(c) => {
            let s = setup(&c)?;
            let b = experiment::estimate_box(&s.cfg, &s.opts, &s.out)?;
            println!(
                "estimated {} terminal conditions into {}",
                b.points.len(),
                experiment::coefficient_dir(&s.out).display()
            );
        }
        Command::Train(c) => {
            let s = setup(&c)?;
            let b = box_for(&s)?;
            experiment::train(&s.cfg, &b, &s.opts, &s.out)?;
            println!("operator saved to {}", experiment::operator_dir(&s.out).display());
        }
        Command::Evaluate(c) => {
            let s = setup(&c)?;
            let b = experiment::load_box(&s.cfg, &s.out)?;
            let sol = OperatorSolution::load(&experiment::operator_dir(&s.out)).map_err(|e| StageError {
                stage: "load-operator",
                source: e,
            })?;
            let values = experiment::evaluate(&sol, &b)?;
            let mut header: Vec<String> = s.cfg.parameters.iter().map(|a| a.name.clone()).collect();
            header.push("operator_Y0".into());
            for j in 0..s.cfg.dimension {
                header.push(if s.cfg.dimension == 1 {
                    "operator_Z0".into()
                } else {
                    format!("operator_Z0_{j}")
                });
            }
            let rows: Vec<Vec<f64>> = b
                .points
                .iter()
                .zip(&values)
                .map(|(p, (y, z))| {
                    let mut r = p.clone();
                    r.push(*y);
                    r.extend_from_slice(z);
                    r
                })
                .collect();
            let path = s.out.join("operator.csv");
            write_table(&path, &header, &rows, "evaluate")?;
            println!("wrote {}", path.display());
        }
        Command::Baseline(c) => {
            let s = setup(&c)?;
            fs::create_dir_all(&s.out).map_err(|e| Failure::Io("baseline", e))?;
            let b = experiment::load_box(&s.cfg, &s.out).ok();
            let values = experiment::baseline(&s.cfg, b.as_ref(), &s.opts)?;
            let points: Vec<Vec<f64>> = s
                .cfg
                .parameter_grid()
                .map_err(|e| StageError {
                    stage: "baseline",
                    source: e,
                })?
                .into_iter()
                .map(|(p, _)| p)
                .collect();
            let mut header: Vec<String> = s.cfg.parameters.iter().map(|a| a.name.clone()).collect();
            header.extend(["baseline_Y0".to_string(), "baseline_Y0_stderr".to_string()]);
            let d = values.first().map_or(1, |v| v.z0.len());
            for j in 0..d {
                let name = if d == 1 { "baseline_Z0".to_string() } else { format!("baseline_Z0_{j}") };
                header.push(name.clone());
                header.push(format!("{name}_stderr"));
            }
            let rows: Vec<Vec<f64>> = points
                .iter()
                .zip(&values)
                .map(|(p, v)| {
                    let mut r = p.clone();
                    r.extend([v.y0, v.y0_se]);
                    for j in 0..v.z0.len() {
                        r.extend([v.z0[j], v.z0_se[j]]);
                    }
                    r
                })
                .collect();
            let path = s.out.join("baseline.csv");
            write_table(&path, &header, &rows, "baseline")?;
            println!("wrote {}", path.display());
        }
        Command::Experiment(c) => {
            let s = setup(&c)?;
            let out = experiment::run_experiment(&s.cfg, &s.opts, &s.out)?;
            println!("wrote {}", out.dir.join("results.csv").display());
        }
        Command::Convergence(c) => {
            let s = setup(&c)?;
            let out = experiment::run_convergence(&s.cfg, &s.opts, &s.out)?;
            for r in &out.rows {
                println!(
                    "n = {:>3}  |pi| = {:.4}  eps_Y = {:.4e} (se {:.1e})  eps_Z = {:.4e} (se {:.1e})",
                    r.steps, r.mesh, r.eps_y, r.eps_y_se, r.eps_z, r.eps_z_se
                );
            }
            println!("log-log slope: Y {:.3}, Z {:.3}", out.slope_y, out.slope_z);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(errors)) => {
            eprintln!("error: stage `validate` failed with {} problem(s):", errors.len());
            for e in errors {
                eprintln!("  - {e}");
            }
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Io(stage, e)) => {
            eprintln!("error: stage `{stage}` failed: {e}");
            ExitCode::from(1)
        }
    }
}
