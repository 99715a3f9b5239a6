use std::sync::Arc;

use opbsde::chaos::{chaos_monomial, BasisSpec, IndexSet};
use opbsde::simulation::{
    correlation_factor, euler_maruyama_forward, forward_state, initial_values, read_path_dump, sample_path,
    sde_coefficients, sde_coefficients_correlated, write_path_dump, ForwardMap, ForwardState, PathSampler,
};
use opbsde::TimeGrid;
use proptest::prelude::*;

#[test]
fn brownian_increments_have_the_right_moments() {
    let grid = TimeGrid::uniform(2.0, 4).unwrap();
    let sampler = PathSampler::new(grid, 2, Some(&[1.0, 0.6, 0.6, 1.0])).unwrap();
    let n = 40_000;
    let (mut s0, mut s1, mut s01, mut m0) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..n {
        let p = sampler.sample_stream(17, &[1, k]);
        assert_eq!(p.value(0, 0), 0.0);
        let (a, b) = (p.value(4, 0), p.value(4, 1));
        m0 += a;
        s0 += a * a;
        s1 += b * b;
        s01 += a * b;
    }
    let n = n as f64;
    assert!((m0 / n).abs() < 4.0 * (2.0 / n).sqrt());
    // Var(B_T^2) = 2 T^2 = 8, so the stderr of the second moment is sqrt(8/n).
    for v in [s0 / n, s1 / n] {
        assert!((v - 2.0).abs() < 4.0 * (8.0 / n).sqrt(), "variance {v}");
    }
    assert!((s01 / n - 1.2).abs() < 0.06, "covariance {}", s01 / n);
}

#[test]
fn streams_are_keyed_not_sequential() {
    let grid = TimeGrid::uniform(1.0, 3).unwrap();
    let sampler = PathSampler::new(grid, 1, None).unwrap();
    let a = sampler.sample_stream(5, &[1, 10]);
    let _ = sampler.sample_stream(5, &[1, 9]);
    let b = sampler.sample_stream(5, &[1, 10]);
    assert_eq!(a.values(), b.values());
    assert_ne!(a.values(), sampler.sample_stream(6, &[1, 10]).values());
}

#[test]
fn negated_path_reflects_values() {
    let grid = TimeGrid::uniform(1.0, 5).unwrap();
    let p = sample_path(grid, 2, None, 1).unwrap();
    let q = p.negated();
    for (a, b) in p.values().iter().zip(q.values()) {
        assert_eq!(*a, -*b);
    }
}

#[test]
fn correlation_factor_reproduces_the_matrix() {
    let c = [1.0, 0.3, -0.2, 0.3, 1.0, 0.5, -0.2, 0.5, 1.0];
    let f = correlation_factor(&c, 3).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let v: f64 = (0..3).map(|k| f[i * 3 + k] * f[j * 3 + k]).sum();
            assert!((v - c[i * 3 + j]).abs() < 1e-12);
        }
    }
    let singular = [1.0, 1.0, 1.0, 1.0];
    let f = correlation_factor(&singular, 2).unwrap();
    let v: f64 = (0..2).map(|k| f[2 + k] * f[2 + k]).sum();
    assert!((v - 1.0).abs() < 1e-12);
    assert!(correlation_factor(&[1.0, 2.0, 2.0, 1.0], 2).is_err());
}

#[test]
fn path_dump_round_trips() {
    let grid = TimeGrid::new(vec![0.0, 0.1, 0.35, 1.0]).unwrap();
    let p = sample_path(grid, 3, None, 77).unwrap();
    let mut buf = Vec::new();
    write_path_dump(&mut buf, &p, 77).unwrap();
    let (q, seed) = read_path_dump(buf.as_slice()).unwrap();
    assert_eq!(seed, 77);
    assert_eq!(q.values(), p.values());
    assert_eq!(q.grid().points(), p.grid().points());
    assert!(read_path_dump(&buf[..buf.len() - 3]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_path_dump(bad.as_slice()).is_err());
}

#[test]
fn initial_state_is_hermite_at_zero() {
    let set = IndexSet::new(3, 2).unwrap();
    let x0 = initial_values(&set);
    for (pos, a) in set.indices().iter().enumerate() {
        let expect: f64 = a
            .entries()
            .iter()
            .map(|&k| match k {
                0 => 1.0,
                1 | 3 => 0.0,
                2 => -0.5,
                _ => unreachable!(),
            })
            .product();
        assert_eq!(x0[pos], expect, "{a}");
    }
}

#[test]
fn forward_map_matches_monomials() {
    let grid = TimeGrid::uniform(1.0, 6).unwrap();
    let basis = BasisSpec::new(TimeGrid::uniform(1.0, 3).unwrap(), 2).unwrap();
    let set = Arc::new(IndexSet::new(2, 6).unwrap());
    let path = sample_path(grid.clone(), 2, None, 3).unwrap();
    let map = ForwardMap::new(&basis, set.clone(), &grid).unwrap();
    for k in 0..=6 {
        let t = grid.time(k);
        let x = map.values(&path, k).unwrap();
        for (pos, a) in set.indices().iter().enumerate() {
            let direct = chaos_monomial(a, &path, &basis, t).unwrap();
            assert!((x[pos] - direct).abs() < 1e-12);
        }
    }
    assert_eq!(map.initial(), initial_values(&set));
}

#[test]
fn sde_coefficients_match_ito_formula_on_one_slot() {
    // X = (1, G, (G^2 - 1)/2) for G = B_t / sqrt(T): dX_2 = G dG + d<G>/2.
    let basis = BasisSpec::new(TimeGrid::uniform(2.0, 1).unwrap(), 1).unwrap();
    let set = Arc::new(IndexSet::new(2, 1).unwrap());
    let g = 0.7;
    let state = ForwardState {
        t: 0.5,
        values: vec![1.0, g, 0.5 * (g * g - 1.0)],
        index_set: set,
    };
    let c = sde_coefficients(0.5, &state, &basis).unwrap();
    let alpha = 1.0 / 2f64.sqrt();
    assert_eq!(c.drift, vec![0.0, 0.0, 0.5 * alpha * alpha]);
    assert!((c.diffusion[0]).abs() < 1e-15);
    assert!((c.diffusion[1] - alpha).abs() < 1e-15);
    assert!((c.diffusion[2] - g * alpha).abs() < 1e-15);
}

#[test]
fn correlated_drift_couples_components() {
    // X^{(1,1)} = G_0 G_1 across two components on one interval: drift rho alpha^2.
    let basis = BasisSpec::new(TimeGrid::uniform(1.0, 1).unwrap(), 2).unwrap();
    let set = Arc::new(IndexSet::new(2, 2).unwrap());
    let state = ForwardState {
        t: 0.2,
        values: initial_values(&set),
        index_set: set.clone(),
    };
    let rho = 0.4;
    let c = sde_coefficients_correlated(0.2, &state, &basis, Some(&[1.0, rho, rho, 1.0])).unwrap();
    let pos = set.position(&[1, 1]).unwrap();
    assert!((c.drift[pos] - rho).abs() < 1e-15);
    let indep = sde_coefficients(0.2, &state, &basis).unwrap();
    assert_eq!(indep.drift[pos], 0.0);
}

#[test]
fn euler_maruyama_is_exact_for_degree_one() {
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let basis = BasisSpec::new(TimeGrid::uniform(1.0, 2).unwrap(), 1).unwrap();
    let set = Arc::new(IndexSet::new(1, 2).unwrap());
    let path = sample_path(grid, 1, None, 8).unwrap();
    let x0 = forward_state(&path, &basis, &set, 0.0).unwrap();
    let states = euler_maruyama_forward(&x0, &path, &basis, None).unwrap();
    let exact = forward_state(&path, &basis, &set, 1.0).unwrap();
    for (a, b) in states.last().unwrap().values.iter().zip(&exact.values) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn forward_state_is_deterministic(seed in 0u64..1000, k in 0usize..=4) {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let basis = BasisSpec::new(TimeGrid::uniform(1.0, 2).unwrap(), 1).unwrap();
        let set = Arc::new(IndexSet::new(2, 2).unwrap());
        let path = sample_path(grid.clone(), 1, None, seed).unwrap();
        let a = forward_state(&path, &basis, &set, grid.time(k)).unwrap();
        let b = forward_state(&path, &basis, &set, grid.time(k)).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn degree_one_state_is_the_scaled_path(seed in 0u64..1000) {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let basis = BasisSpec::new(TimeGrid::uniform(1.0, 1).unwrap(), 1).unwrap();
        let set = Arc::new(IndexSet::new(1, 1).unwrap());
        let path = sample_path(grid.clone(), 1, None, seed).unwrap();
        for k in 0..=4 {
            let s = forward_state(&path, &basis, &set, grid.time(k)).unwrap();
            prop_assert!((s.values[1] - path.value(k, 0)).abs() < 1e-12);
        }
    }
}
