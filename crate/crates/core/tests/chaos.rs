use std::sync::Arc;

use opbsde::chaos::{
    basis_integral, chaos_monomial, estimate_coefficients, factorial, gaussians, hermite_eval, hermite_eval_all,
    index_count, orthonormal_monomial, project, BasisSpec, ChaosCoefficients, EstimateOptions, IndexSet, MultiIndex,
};
use opbsde::models::{ChaosTerm, TerminalFamily, TerminalSpec};
use opbsde::simulation::{sample_path, PathSampler};
use opbsde::{Error, TimeGrid};
use proptest::prelude::*;

/// `He_n(x) / n!` from the explicit sum over pairings.
fn hermite_closed_form(n: usize, x: f64) -> f64 {
    let mut acc = 0.0;
    for m in 0..=n / 2 {
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        let denom = factorial(m as u32) * factorial((n - 2 * m) as u32) * 2f64.powi(m as i32);
        acc += sign * x.powi((n - 2 * m) as i32) / denom;
    }
    acc
}

fn binomial(n: u64, k: u64) -> u128 {
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

fn uniform_basis(horizon: f64, m: usize, d: usize) -> BasisSpec {
    BasisSpec::new(TimeGrid::uniform(horizon, m).unwrap(), d).unwrap()
}

#[test]
fn hermite_matches_closed_form() {
    for n in 0..=8 {
        for &x in &[-3.7, -1.0, -0.25, 0.0, 0.4, 1.3, 2.9, 5.0] {
            let a = hermite_eval(n, x);
            let b = hermite_closed_form(n, x);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3), "n={n} x={x}: {a} vs {b}");
        }
    }
}

#[test]
fn hermite_all_agrees_with_single() {
    let all = hermite_eval_all(8, 0.77);
    for (n, v) in all.iter().enumerate() {
        assert_eq!(*v, hermite_eval(n, 0.77));
    }
}

#[test]
fn hermite_even_values_at_zero() {
    for k in 0..=4u32 {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let expect = sign / (2f64.powi(k as i32) * factorial(k));
        assert_eq!(hermite_eval(2 * k as usize, 0.0), expect);
        assert_eq!(hermite_eval(2 * k as usize + 1, 0.0), 0.0);
    }
}

#[test]
fn hermite_derivative_lowers_degree() {
    let h = 1e-5;
    for n in 1..=8 {
        for &x in &[-2.0, -0.5, 0.3, 1.7] {
            let fd = (hermite_eval(n, x + h) - hermite_eval(n, x - h)) / (2.0 * h);
            assert!((fd - hermite_eval(n - 1, x)).abs() <= 1e-6, "n={n} x={x}");
        }
    }
}

#[test]
fn index_counts_match_binomials() {
    for p in 0..=4u32 {
        for m in 1..=12usize {
            let set = IndexSet::new(p, m).unwrap();
            let expect = binomial(p as u64 + m as u64, p as u64);
            assert_eq!(set.len() as u128, expect);
            assert_eq!(index_count(p, m), Some(expect));
        }
    }
}

#[test]
fn index_set_graded_lex_order() {
    let set = IndexSet::new(2, 2).unwrap();
    let entries: Vec<Vec<u32>> = set.indices().iter().map(|a| a.entries().to_vec()).collect();
    assert_eq!(entries, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]);
}

#[test]
fn oversized_index_set_is_rejected() {
    match IndexSet::new(6, 40) {
        Err(Error::IndexSetTooLarge { cardinality, .. }) => assert_eq!(cardinality, binomial(46, 6)),
        other => panic!("expected IndexSetTooLarge, got {other:?}"),
    }
}

#[test]
fn basis_integrals_sum_to_brownian_motion() {
    let grid = TimeGrid::uniform(1.0, 8).unwrap();
    let basis = uniform_basis(1.0, 4, 2);
    let path = sample_path(grid.clone(), 2, None, 11).unwrap();
    for j in 0..2 {
        let total: f64 = (0..4)
            .map(|i| basis_integral(&path, &basis, i, j, 1.0).unwrap() / basis.amplitude(i))
            .sum();
        assert!((total - path.value(8, j)).abs() < 1e-12);
    }
    let g = gaussians(&path, &basis, 0.5).unwrap();
    assert_eq!(g.len(), 8);
    for s in 4..8 {
        assert_eq!(g[s], 0.0);
    }
}

#[test]
fn brownian_terminal_has_known_coefficients() {
    let m = 4;
    let basis = uniform_basis(1.0, m, 1);
    let set = Arc::new(IndexSet::new(2, m).unwrap());
    let sampler = PathSampler::new(basis.partition().clone(), 1, None).unwrap();
    let xi = |p: &opbsde::simulation::BrownianPath| p.value(p.grid().steps(), 0);
    let c = estimate_coefficients(&xi, &set, &basis, &sampler, &EstimateOptions::new(20_000, 3)).unwrap();
    let root = (1.0 / m as f64).sqrt();
    for (pos, a) in set.indices().iter().enumerate() {
        let expect = if a.degree() == 1 { root } else { 0.0 };
        let tol = 5.0 * c.stderr()[pos] + 1e-12;
        assert!((c.values()[pos] - expect).abs() <= tol, "{a}: {} vs {expect}", c.values()[pos]);
    }
}

#[test]
fn synthetic_chaos_is_recovered() {
    let partition = vec![0.0, 0.5, 1.0];
    let terms = vec![
        ChaosTerm { index: vec![0, 0], value: 0.3 },
        ChaosTerm { index: vec![1, 0], value: -1.2 },
        ChaosTerm { index: vec![1, 1], value: 0.8 },
        ChaosTerm { index: vec![0, 2], value: 0.5 },
    ];
    let family = TerminalFamily::ChaosSynthetic {
        partition: partition.clone(),
        dimension: 1,
        terms: terms.clone(),
    };
    let spec = TerminalSpec::new(family, TimeGrid::new(partition.clone()).unwrap()).unwrap();
    let basis = BasisSpec::new(TimeGrid::new(partition).unwrap(), 1).unwrap();
    let set = Arc::new(IndexSet::new(2, 2).unwrap());
    let sampler = PathSampler::new(basis.partition().clone(), 1, None).unwrap();
    let c = estimate_coefficients(&spec, &set, &basis, &sampler, &EstimateOptions::new(40_000, 9)).unwrap();
    for (pos, a) in set.indices().iter().enumerate() {
        let expect = terms.iter().find(|t| t.index == a.entries()).map_or(0.0, |t| t.value);
        assert!(
            (c.values()[pos] - expect).abs() <= 5.0 * c.stderr()[pos] + 1e-12,
            "{a}: {} vs {expect} (se {})",
            c.values()[pos],
            c.stderr()[pos]
        );
    }
}

#[test]
fn projection_of_exact_coefficients_reproduces_synthetic_payoff() {
    let partition = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    let basis = BasisSpec::new(TimeGrid::new(partition.clone()).unwrap(), 1).unwrap();
    let set = Arc::new(IndexSet::new(3, 4).unwrap());
    let values: Vec<f64> = (0..set.len()).map(|k| ((k * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let coeffs = ChaosCoefficients::new(set.clone(), basis.clone(), values.clone()).unwrap();
    let grid = TimeGrid::uniform(1.0, 8).unwrap();
    let path = sample_path(grid.clone(), 1, None, 5).unwrap();
    let direct: f64 = set
        .indices()
        .iter()
        .zip(&values)
        .map(|(a, v)| v * chaos_monomial(a, &path, &basis, 1.0).unwrap())
        .sum();
    assert!((project(&coeffs, &path).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn coefficient_file_round_trip() {
    let basis = uniform_basis(2.0, 3, 2);
    let set = Arc::new(IndexSet::new(2, 6).unwrap());
    let values: Vec<f64> = (0..set.len()).map(|k| (k as f64).sin() * 1e-3 + 1.0 / 3.0).collect();
    let stderr: Vec<f64> = (0..set.len()).map(|k| k as f64 * 1e-5).collect();
    let c = ChaosCoefficients::with_stderr(set, basis, values, stderr, 1234).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    c.save(&path).unwrap();
    let back = ChaosCoefficients::load(&path).unwrap();
    assert_eq!(back.values(), c.values());
    assert_eq!(back.stderr(), c.stderr());
    assert_eq!(back.samples(), 1234);
    assert_eq!(back.index_set().fingerprint(), c.index_set().fingerprint());
}

#[test]
fn estimates_are_reproducible() {
    let basis = uniform_basis(1.0, 2, 1);
    let set = Arc::new(IndexSet::new(2, 2).unwrap());
    let sampler = PathSampler::new(basis.partition().clone(), 1, None).unwrap();
    let xi = |p: &opbsde::simulation::BrownianPath| p.value(2, 0).powi(2);
    let opts = EstimateOptions::new(5000, 21);
    let a = estimate_coefficients(&xi, &set, &basis, &sampler, &opts).unwrap();
    let b = estimate_coefficients(&xi, &set, &basis, &sampler, &opts).unwrap();
    assert_eq!(a.values(), b.values());
}

proptest! {
    #[test]
    fn hermite_recurrence_tracks_closed_form(n in 0usize..=8, x in -6.0f64..6.0) {
        let a = hermite_eval(n, x);
        let b = hermite_closed_form(n, x);
        prop_assert!((a - b).abs() <= 1e-11 * b.abs().max(1.0));
    }

    #[test]
    fn index_set_positions_invert(p in 0u32..=3, m in 1usize..=7) {
        let set = IndexSet::new(p, m).unwrap();
        for (pos, a) in set.indices().iter().enumerate() {
            prop_assert_eq!(set.position(a.entries()), Some(pos));
            prop_assert!(a.degree() <= p);
        }
    }

    #[test]
    fn index_set_is_downward_closed(p in 1u32..=3, m in 1usize..=6) {
        let set = IndexSet::new(p, m).unwrap();
        for pos in 0..set.len() {
            let a = set.get(pos).clone();
            for s in 0..m {
                match set.lower(pos, s) {
                    Some(l) => {
                        let mut e = a.entries().to_vec();
                        e[s] -= 1;
                        prop_assert_eq!(set.get(l).entries(), &e[..]);
                    }
                    None => prop_assert_eq!(a.entries()[s], 0),
                }
            }
        }
    }

    #[test]
    fn orthonormal_monomial_of_zero_index_is_one(g in proptest::collection::vec(-3.0f64..3.0, 4)) {
        prop_assert_eq!(orthonormal_monomial(&MultiIndex::zero(4), &g), 1.0);
    }
}
