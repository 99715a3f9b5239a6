//! End-to-end acceptance checks. Each test prints one `criterion N: PASS` or
//! `criterion N: FAIL` line with the measured quantities before asserting.
//!
//! Criteria 7 and 8 train full-size operators and take tens of minutes on a
//! single core.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2};
use opbsde::baselines::backward_euler_fixed;
use opbsde::chaos::{
    estimate_coefficients, factorial, gaussians, hermite_eval, orthonormal_monomial, BasisSpec, EstimateOptions,
    IndexSet,
};
use opbsde::exec::BLOCK;
use opbsde::experiment::{run_convergence, run_experiment, validate_value, RunOptions};
use opbsde::models::{Generator, GeneratorSpec, TerminalFamily, TerminalSpec};
use opbsde::operator::{train_operator, CoefficientBox};
use opbsde::regression::{loss_and_gradient, FeatureScaler, LossBatch, MlpModel, StepProblem, Variant};
use opbsde::rng::stream;
use opbsde::scheme::{MlpConfig, Problem, SchemeConfig, TerminalSource};
use opbsde::simulation::{euler_maruyama_forward, forward_state, BrownianPath, PathSampler};
use opbsde::stats::Moments;
use opbsde::{Execution, TimeGrid};
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;

/// Writes past the test harness's output capture so that passing criteria
/// also show their measurements.
fn line(text: String) {
    let _ = writeln!(std::io::stderr().lock(), "{text}");
}

fn report(n: u32, pass: bool, detail: String) {
    line(format!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" }));
}

fn run_options() -> RunOptions {
    RunOptions {
        execution: Execution::Parallel,
        workers: None,
    }
}

/// `He_n(x) / n!` from the explicit sum over pairings.
fn hermite_closed_form(n: usize, x: f64) -> f64 {
    (0..=n / 2)
        .map(|m| {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            sign * x.powi((n - 2 * m) as i32)
                / (factorial(m as u32) * factorial((n - 2 * m) as u32) * 2f64.powi(m as i32))
        })
        .sum()
}

#[test]
fn criterion_1_hermite_suite() {
    let clock = Instant::now();
    let xs: Vec<f64> = (0..=200).map(|k| -5.0 + 0.05 * k as f64).collect();
    let mut worst_rel: f64 = 0.0;
    let mut worst_deriv: f64 = 0.0;
    let mut zero_ok = true;
    for n in 0..=8 {
        for &x in &xs {
            let exact = hermite_closed_form(n, x);
            if exact != 0.0 {
                worst_rel = worst_rel.max((hermite_eval(n, x) - exact).abs() / exact.abs());
            } else {
                worst_rel = worst_rel.max(hermite_eval(n, x).abs());
            }
            if n >= 1 {
                let h = 1e-5;
                let fd = (hermite_eval(n, x + h) - hermite_eval(n, x - h)) / (2.0 * h);
                worst_deriv = worst_deriv.max((fd - hermite_eval(n - 1, x)).abs());
            }
        }
    }
    for k in 0..=4u32 {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        zero_ok &= hermite_eval(2 * k as usize, 0.0) == sign / (2f64.powi(k as i32) * factorial(k));
    }
    let secs = clock.elapsed().as_secs_f64();
    let pass = worst_rel <= 1e-12 && worst_deriv <= 1e-6 && zero_ok && secs < 1.0;
    report(
        1,
        pass,
        format!("max rel {worst_rel:.1e}, max derivative gap {worst_deriv:.1e}, exact zeros {zero_ok}, {secs:.3}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_orthonormality() {
    let clock = Instant::now();
    let m = 4;
    let basis = BasisSpec::new(TimeGrid::uniform(1.0, m).unwrap(), 1).unwrap();
    let set = IndexSet::new(2, m).unwrap();
    let k = set.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a..k).map(move |b| (a, b))).collect();
    let sampler = PathSampler::new(basis.partition().clone(), 1, None).unwrap();
    let samples = 1_000_000;
    let parts = Execution::Parallel.map_blocks(samples, BLOCK, |range| {
        let mut mom = Moments::new(pairs.len());
        let mut phi = vec![0.0; k];
        let mut obs = vec![0.0; pairs.len()];
        for s in range {
            let path = sampler.sample_stream(2, &[0, s as u64]);
            let g = gaussians(&path, &basis, 1.0).unwrap();
            for (pos, a) in set.indices().iter().enumerate() {
                phi[pos] = orthonormal_monomial(a, &g);
            }
            for (o, &(a, b)) in obs.iter_mut().zip(&pairs) {
                *o = phi[a] * phi[b];
            }
            mom.push(&obs);
        }
        mom
    });
    let total = Moments::merge_all(pairs.len(), &parts);
    let se = total.stderr();
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for (j, &(a, b)) in pairs.iter().enumerate() {
        let gap = (total.mean()[j] - if a == b { 1.0 } else { 0.0 }).abs();
        pass &= gap <= 4.0 * se[j];
        if se[j] > 0.0 {
            worst = worst.max(gap / se[j]);
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    pass &= secs < 30.0;
    report(
        2,
        pass,
        format!("{} pairs, worst |gap| = {worst:.2} stderr, {secs:.1}s", pairs.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_3_forward_sde_self_convergence() {
    let clock = Instant::now();
    let basis = BasisSpec::new(TimeGrid::uniform(1.0, 2).unwrap(), 1).unwrap();
    let set = Arc::new(IndexSet::new(2, 2).unwrap());
    let coarse = 8;
    let fine = TimeGrid::uniform(1.0, 4 * coarse).unwrap();
    let sampler = PathSampler::new(fine.clone(), 1, None).unwrap();
    let paths = 10_000;
    let strides = [4usize, 2, 1];
    let grids: Vec<Arc<TimeGrid>> = strides
        .iter()
        .map(|s| Arc::new(TimeGrid::uniform(1.0, 4 * coarse / s).unwrap()))
        .collect();
    let parts = Execution::Parallel.map_blocks(paths, BLOCK, |range| {
        let mut sums = [0.0; 3];
        for k in range {
            let path = sampler.sample_stream(3, &[0, k as u64]);
            let exact = forward_state(&path, &basis, &set, 1.0).unwrap();
            for (j, &stride) in strides.iter().enumerate() {
                let values: Vec<f64> = path.values().iter().step_by(stride).copied().collect();
                let sub = BrownianPath::from_values(grids[j].clone(), 1, values).unwrap();
                let x0 = forward_state(&sub, &basis, &set, 0.0).unwrap();
                let em = euler_maruyama_forward(&x0, &sub, &basis, None).unwrap();
                let last = em.last().unwrap();
                sums[j] += last
                    .values
                    .iter()
                    .zip(&exact.values)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>();
            }
        }
        sums
    });
    let mut rms = [0.0; 3];
    for p in &parts {
        for j in 0..3 {
            rms[j] += p[j];
        }
    }
    let rms: Vec<f64> = rms.iter().map(|s| (s / paths as f64).sqrt()).collect();
    let secs = clock.elapsed().as_secs_f64();
    let pass = rms[0] > rms[1] && rms[1] > rms[2] && secs < 120.0;
    report(
        3,
        pass,
        format!("RMS terminal gap at h, h/2, h/4: {:.4e}, {:.4e}, {:.4e}; {secs:.1}s", rms[0], rms[1], rms[2]),
    );
    assert!(pass);
}

fn one_dim_problem(n: usize, m: usize, order: u32, spec: GeneratorSpec) -> Problem {
    let basis = BasisSpec::new(TimeGrid::uniform(1.0, m).unwrap(), 1).unwrap();
    let set = Arc::new(IndexSet::new(order, m).unwrap());
    Problem::new(
        TimeGrid::uniform(1.0, n).unwrap(),
        basis,
        set,
        Generator::new(spec, 1).unwrap(),
        None,
    )
    .unwrap()
}

#[test]
fn criterion_4_exact_solution_oracles() {
    let clock = Instant::now();
    let n = 5;
    let p = one_dim_problem(n, n, 2, GeneratorSpec::Zero);
    let brownian = TerminalSpec::new(
        TerminalFamily::BrownianPower {
            power: 1,
            component: 0,
            scale: 1.0,
        },
        p.grid.clone(),
    )
    .unwrap();
    let fixed = backward_euler_fixed(&TerminalSource::Raw(brownian), &p, &SchemeConfig::linear(100_000, 4)).unwrap();
    let y_ok = fixed.y0.abs() <= 3.0 * fixed.y0_se;
    let mut z_worst: f64 = 0.0;
    let mut z_ok = true;
    for r in &fixed.reports {
        let gap = (r.z_model_mean[0] - 1.0).abs();
        z_ok &= gap <= 3.0 * r.z_target_se[0];
        z_worst = z_worst.max(gap / r.z_target_se[0]);
    }

    let rate = 0.05;
    let q = one_dim_problem(
        n,
        n,
        2,
        GeneratorSpec::LinearRate {
            rate,
            theta: vec![],
        },
    );
    let one = TerminalSpec::new(TerminalFamily::Constant { value: 1.0 }, q.grid.clone()).unwrap();
    let disc = backward_euler_fixed(&TerminalSource::Raw(one), &q, &SchemeConfig::linear(10_000, 5)).unwrap();
    let expect = (1.0 + rate / n as f64).powi(-(n as i32));
    let disc_gap = (disc.y0 - expect).abs();

    let secs = clock.elapsed().as_secs_f64();
    let pass = y_ok && z_ok && disc_gap <= 1e-10 && secs < 120.0;
    report(
        4,
        pass,
        format!(
            "B_T: Y0 = {:.2e} (se {:.1e}), worst Z gap {z_worst:.2} se; constant: |Y0 - (1+r dt)^-n| = {disc_gap:.1e}; {secs:.1}s",
            fixed.y0, fixed.y0_se
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_gradient_check() {
    let clock = Instant::now();
    let d = 2;
    let specs = [
        GeneratorSpec::Zero,
        GeneratorSpec::LinearRate {
            rate: 0.05,
            theta: vec![0.3, -0.1],
        },
        GeneratorSpec::Trig,
        GeneratorSpec::BorrowingRate {
            rate: 0.02,
            borrowing_rate: 0.1,
            drift: vec![0.05, 0.07],
            volatility: vec![0.2, 0.25],
            correlation: 0.1,
        },
    ];
    let mut worst: f64 = 0.0;
    for (gi, spec) in specs.iter().enumerate() {
        let g = Generator::new(spec.clone(), d).unwrap();
        for (vi, variant) in [Variant::Implicit, Variant::Explicit].into_iter().enumerate() {
            let seed = (10 * gi + vi) as u64;
            let mut rng = stream(seed, &[5]);
            let (rows, input, hidden) = (32, 3, 5);
            let features = Array2::from_shape_fn((rows, input), |_| rng.sample::<f64, _>(StandardNormal));
            let y_next = Array1::from_shape_fn(rows, |_| rng.sample::<f64, _>(StandardNormal));
            let dw = Array2::from_shape_fn((rows, d), |_| 0.3 * rng.sample::<f64, _>(StandardNormal));
            let mut model = MlpModel::he_uniform(input, hidden, d + 1, &mut rng);
            for p in model.params_mut() {
                *p += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            model.set_scaler(FeatureScaler::fit(features.view())).unwrap();
            model
                .set_output_affine(vec![0.1, -0.2, 0.3], vec![0.7, 1.3, 0.9])
                .unwrap();
            let batch = LossBatch {
                features: features.view(),
                y_next: y_next.view(),
                dw: dw.view(),
            };
            let problem = StepProblem {
                generator: &g,
                t: 0.2,
                dt: 0.1,
                variant,
            };
            let (_, grad) = loss_and_gradient(&model, &batch, &problem, Execution::Sequential).unwrap();
            let scale = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let h = 1e-6;
            for k in 0..grad.len() {
                let mut up = model.clone();
                up.params_mut()[k] += h;
                let mut dn = model.clone();
                dn.params_mut()[k] -= h;
                let lu = loss_and_gradient(&up, &batch, &problem, Execution::Sequential).unwrap().0;
                let ld = loss_and_gradient(&dn, &batch, &problem, Execution::Sequential).unwrap().0;
                let fd = (lu - ld) / (2.0 * h);
                worst = worst.max((fd - grad[k]).abs() / grad[k].abs().max(1e-2 * scale));
            }
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && secs < 30.0;
    report(5, pass, format!("worst relative gap {worst:.2e} over 4 generators x 2 variants; {secs:.1}s"));
    assert!(pass);
}

#[test]
fn criterion_6_degenerate_box_equivalence() {
    let clock = Instant::now();
    let p = one_dim_problem(5, 5, 2, GeneratorSpec::Trig);
    let xi = TerminalSpec::new(TerminalFamily::PowerMax { power: 1.0 }, p.grid.clone()).unwrap();
    let sampler = p.sampler(None).unwrap();
    let c = estimate_coefficients(&xi, &p.index_set, &p.basis, &sampler, &EstimateOptions::new(100_000, 6)).unwrap();
    let mlp = MlpConfig {
        batch_size: 10_000,
        steps: 1500,
        pilot_size: 10_000,
        diagnostic_paths: 10_000,
        ..MlpConfig::default()
    };
    let cfg = SchemeConfig::mlp(mlp, 66);
    let op = train_operator(&p, &CoefficientBox::degenerate(&c), &cfg).unwrap();
    let fixed = backward_euler_fixed(&TerminalSource::Projected(c.clone()), &p, &cfg).unwrap();
    let (y_op, _) = op.value_at_zero(&c).unwrap();
    let se = op.reports[0].y_target_se.hypot(fixed.y0_se);
    let gap = (y_op - fixed.y0).abs();
    let secs = clock.elapsed().as_secs_f64();
    let pass = gap <= 3.0 * se && secs < 600.0;
    report(
        6,
        pass,
        format!(
            "operator Y0 {y_op:.5}, fixed Y0 {:.5}, gap {gap:.2e} = {:.2} combined se; {secs:.0}s",
            fixed.y0,
            gap / se
        ),
    );
    assert!(pass);
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn criterion_7_barrier_strike_surface() {
    let clock = Instant::now();
    let cfg = validate_value(&json!({
        "name": "acceptance_barrier_strike",
        "horizon": 1.0,
        "steps": 10,
        "chaos": { "order": 2 },
        "generator": { "family": "linear_rate", "rate": 0.01, "theta": [0.2] },
        "terminal": {
            "family": "barrier_call",
            "strike": 1.0, "barrier": 0.85, "spot": 1.0, "drift": 0.05, "volatility": 0.2
        },
        "parameters": [{ "name": "strike", "min": 0.8, "max": 1.2, "points": 11 }],
        "box": { "samples": 1_000_000 },
        "regressor": { "kind": "mlp", "batch_size": 10_000, "steps": 1500, "pilot_size": 10_000, "diagnostic_paths": 10_000 },
        "baseline": { "kind": "monte_carlo", "paths": 1_000_000 },
        "seed": 7
    }))
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, &run_options(), dir.path()).unwrap();
    let col = |name: &str| out.header.iter().position(|h| h == name).unwrap();
    let (k, y, yb, z, zb) = (col("strike"), col("operator_Y0"), col("baseline_Y0"), col("operator_Z0"), col("baseline_Z0"));
    let mut worst_y: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    for row in &out.rows {
        worst_y = worst_y.max(relative(row[y], row[yb]));
        if row[k] <= 1.1 + 1e-12 {
            worst_z = worst_z.max(relative(row[z], row[zb]));
        }
        line(format!(
            "  K = {:.2}: Y0 {:.5} vs {:.5}, Z0 {:.5} vs {:.5}",
            row[k], row[y], row[yb], row[z], row[zb]
        ));
    }
    let secs = clock.elapsed().as_secs_f64();
    let pass = worst_y <= 0.05 && worst_z <= 0.15 && secs <= 7200.0;
    report(
        7,
        pass,
        format!("worst Y0 rel {worst_y:.3}, worst Z0 rel for K <= 1.1 {worst_z:.3}; {secs:.0}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_power_max_curve() {
    let clock = Instant::now();
    let cfg = validate_value(&json!({
        "name": "acceptance_power_max",
        "horizon": 1.0,
        "steps": 10,
        "chaos": { "order": 2 },
        "generator": { "family": "trig" },
        "terminal": { "family": "power_max", "power": 1.0 },
        "parameters": [{ "name": "power", "min": 0.0, "max": 2.0, "points": 11 }],
        "box": { "samples": 200_000 },
        "regressor": { "kind": "mlp", "batch_size": 10_000, "steps": 1500, "pilot_size": 10_000, "diagnostic_paths": 10_000 },
        "baseline": { "kind": "backward_euler", "regressor": { "kind": "linear", "paths": 200_000 } },
        "seed": 8
    }))
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, &run_options(), dir.path()).unwrap();
    let col = |name: &str| out.header.iter().position(|h| h == name).unwrap();
    let (pw, y, yb) = (col("power"), col("operator_Y0"), col("baseline_Y0"));
    let mut worst_core: f64 = 0.0;
    let mut worst_all: f64 = 0.0;
    for row in &out.rows {
        let r = relative(row[y], row[yb]);
        worst_all = worst_all.max(r);
        if row[pw] >= 0.4 - 1e-12 && row[pw] <= 1.0 + 1e-12 {
            worst_core = worst_core.max(r);
        }
        line(format!("  P = {:.1}: Y0 {:.5} vs {:.5}", row[pw], row[y], row[yb]));
    }
    let secs = clock.elapsed().as_secs_f64();
    let pass = worst_core <= 0.05 && worst_all <= 0.10 && secs <= 7200.0;
    report(
        8,
        pass,
        format!("worst Y0 rel on [0.4, 1] {worst_core:.3}, on [0, 2] {worst_all:.3}; {secs:.0}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_9_convergence_study() {
    let clock = Instant::now();
    let cfg = validate_value(&json!({
        "name": "acceptance_convergence",
        "horizon": 1.0,
        "steps": 10,
        "chaos": { "order": 2, "partition_steps": 5 },
        "generator": { "family": "trig" },
        "terminal": { "family": "brownian_power", "power": 2, "scale": 0.25 },
        "box": { "samples": 200_000 },
        "regressor": { "kind": "linear", "paths": 100_000 },
        "baseline": { "kind": "backward_euler" },
        "convergence": { "steps": [5, 10, 20], "reference_steps": 40, "evaluation_paths": 20_000 },
        "seed": 9
    }))
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_convergence(&cfg, &run_options(), dir.path()).unwrap();
    let mut pass = true;
    for w in out.rows.windows(2) {
        pass &= w[1].eps_y <= w[0].eps_y + 2.0 * w[0].eps_y_se.hypot(w[1].eps_y_se);
    }
    let table: Vec<String> = out
        .rows
        .iter()
        .map(|r| format!("n={} eps_Y {:.3e} (se {:.1e})", r.steps, r.eps_y, r.eps_y_se))
        .collect();
    let secs = clock.elapsed().as_secs_f64();
    pass &= secs <= 10_800.0;
    report(
        9,
        pass,
        format!("{}; slope Y {:.3}, Z {:.3}; {secs:.0}s", table.join(", "), out.slope_y, out.slope_z),
    );
    assert!(pass);
}
