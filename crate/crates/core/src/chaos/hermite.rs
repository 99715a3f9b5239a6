//! Hermite polynomials normalised as `H_n = He_n / n!`, so that `H_n' = H_{n-1}`
//! and `E[H_n(G)^2] = 1/n!` for a standard normal `G`.

/// `H_n(x)` by the recurrence `(k+1) H_{k+1} = x H_k - H_{k-1}`, `H_{-1} = 0`.
pub fn hermite_eval(n: usize, x: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..n {
        let next = (x * cur - prev) / (k + 1) as f64;
        prev = cur;
        cur = next;
    }
    cur
}

/// `[H_0(x), ..., H_{n_max}(x)]`. Each entry is bitwise equal to
/// [`hermite_eval`] because both run the same recurrence.
pub fn hermite_eval_all(n_max: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_max + 1);
    hermite_fill(x, n_max, &mut out);
    out
}

/// Appends `H_0(x), ..., H_{n_max}(x)` to `out`.
pub(crate) fn hermite_fill(x: f64, n_max: usize, out: &mut Vec<f64>) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    out.push(cur);
    for k in 0..n_max {
        let next = (x * cur - prev) / (k + 1) as f64;
        prev = cur;
        cur = next;
        out.push(cur);
    }
}

/// `n!` as a float (exact up to `n = 22`).
pub fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}
