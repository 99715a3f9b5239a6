use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::chaos::{BasisSpec, IndexSet};
use crate::error::{Error, Result};
use crate::exec::{Execution, BLOCK};
use crate::grid::TimeGrid;
use crate::models::Payoff;
use crate::rng::domain;
use crate::simulation::{BrownianPath, ForwardMap, PathSampler};
use crate::stats::Moments;

const MAGIC: &str = "opbsde-chaos-coefficients";
const VERSION: u32 = 1;

/// A finite chaos representation `a -> d_a` of a terminal condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ChaosCoefficients {
    index_set: Arc<IndexSet>,
    basis: BasisSpec,
    values: Vec<f64>,
    stderr: Vec<f64>,
    samples: u64,
}

impl ChaosCoefficients {
    /// Exactly supplied coefficients (zero standard error).
    pub fn new(index_set: Arc<IndexSet>, basis: BasisSpec, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::with_stderr(index_set, basis, values, vec![0.0; n], 0)
    }

    pub fn with_stderr(
        index_set: Arc<IndexSet>,
        basis: BasisSpec,
        values: Vec<f64>,
        stderr: Vec<f64>,
        samples: u64,
    ) -> Result<Self> {
        if index_set.slots() != basis.slots() {
            return Err(Error::ShapeMismatch {
                context: "index set slots vs basis size",
                expected: basis.slots(),
                found: index_set.slots(),
            });
        }
        for (context, v) in [("coefficient values", &values), ("coefficient stderr", &stderr)] {
            if v.len() != index_set.len() {
                return Err(Error::ShapeMismatch {
                    context,
                    expected: index_set.len(),
                    found: v.len(),
                });
            }
        }
        if let Some(i) = values.iter().chain(&stderr).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("coefficient entry {i}")));
        }
        Ok(Self {
            index_set,
            basis,
            values,
            stderr,
            samples,
        })
    }

    pub fn zeros(index_set: Arc<IndexSet>, basis: BasisSpec) -> Result<Self> {
        let n = index_set.len();
        Self::new(index_set, basis, vec![0.0; n])
    }

    pub fn index_set(&self) -> &Arc<IndexSet> {
        &self.index_set
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn stderr(&self) -> &[f64] {
        &self.stderr
    }

    /// Monte Carlo sample count behind the estimate; 0 for exact coefficients.
    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn is_exact(&self) -> bool {
        self.samples == 0
    }

    pub fn get(&self, entries: &[u32]) -> Option<f64> {
        self.index_set.position(entries).map(|i| self.values[i])
    }

    /// `sum_a d_a x^a` for a precomputed forward state.
    pub fn project_values(&self, x: &[f64]) -> f64 {
        self.values.iter().zip(x).map(|(d, x)| d * x).sum()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC} {VERSION}")?;
        writeln!(w, "order {}", self.index_set.order())?;
        writeln!(w, "intervals {}", self.basis.intervals())?;
        writeln!(w, "dimension {}", self.basis.dimension())?;
        writeln!(w, "partition {}", join_floats(self.basis.partition().points()))?;
        writeln!(w, "samples {}", self.samples)?;
        for (i, a) in self.index_set.indices().iter().enumerate() {
            let entries: Vec<String> = a.entries().iter().map(|e| e.to_string()).collect();
            writeln!(
                w,
                "{},{:.16e},{:.16e}",
                entries.join(","),
                self.values[i],
                self.stderr[i]
            )?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Format(format!("missing {what}")))
        };
        let header = next("header")?;
        if header != format!("{MAGIC} {VERSION}") {
            return Err(Error::Format(format!("unexpected header {header:?}")));
        }
        let order: u32 = parse_field(&next("order")?, "order")?;
        let intervals: usize = parse_field(&next("intervals")?, "intervals")?;
        let dimension: usize = parse_field(&next("dimension")?, "dimension")?;
        let partition_line = next("partition")?;
        let partition = split_floats(field(&partition_line, "partition")?)?;
        let samples: u64 = parse_field(&next("samples")?, "samples")?;
        let grid = TimeGrid::new(partition)?;
        if grid.steps() != intervals {
            return Err(Error::Format("partition length disagrees with interval count".into()));
        }
        let basis = BasisSpec::new(grid, dimension)?;
        let index_set = Arc::new(IndexSet::new(order, basis.slots())?);
        let mut values = vec![f64::NAN; index_set.len()];
        let mut stderr = vec![f64::NAN; index_set.len()];
        let mut seen = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != basis.slots() + 2 {
                return Err(Error::Format(format!("bad coefficient row {line:?}")));
            }
            let entries = parts[..basis.slots()]
                .iter()
                .map(|p| p.trim().parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("bad index in {line:?}: {e}")))?;
            let pos = index_set
                .position(&entries)
                .ok_or_else(|| Error::Format(format!("index outside the set in {line:?}")))?;
            values[pos] = parse_float(parts[basis.slots()])?;
            stderr[pos] = parse_float(parts[basis.slots() + 1])?;
            seen += 1;
        }
        if seen != index_set.len() || values.iter().any(|v| v.is_nan()) {
            return Err(Error::Format(format!(
                "expected {} coefficient rows, found {seen}",
                index_set.len()
            )));
        }
        Self::with_stderr(index_set, basis, values, stderr, samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

pub(crate) fn join_floats(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| format!("{x:.16e}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
}

pub(crate) fn split_floats(s: &str) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(parse_float).collect()
}

pub(crate) fn field<'a>(line: &'a str, name: &str) -> Result<&'a str> {
    line.strip_prefix(name)
        .and_then(|rest| rest.strip_prefix(' ').or(rest.is_empty().then_some("")))
        .ok_or_else(|| Error::Format(format!("expected field {name:?}, found {line:?}")))
}

pub(crate) fn parse_field<T: std::str::FromStr>(line: &str, name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field(line, name)?
        .trim()
        .parse()
        .map_err(|e| Error::Format(format!("bad {name}: {e}")))
}

/// Monte Carlo settings for [`estimate_coefficients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub samples: usize,
    pub seed: u64,
    /// Average each draw with its reflection `-B`.
    pub antithetic: bool,
    pub execution: Execution,
}

impl EstimateOptions {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            antithetic: false,
            execution: Execution::default(),
        }
    }
}

/// Estimates `d_a = a! E[xi X_T^a]` with per-coefficient standard errors.
///
/// Sample `k` uses the path stream `(seed, [COEFFICIENT_PATHS, k])`, so two
/// payoffs estimated with the same seed see identical paths.
pub fn estimate_coefficients<P: Payoff + ?Sized>(
    payoff: &P,
    index_set: &Arc<IndexSet>,
    basis: &BasisSpec,
    sampler: &PathSampler,
    options: &EstimateOptions,
) -> Result<ChaosCoefficients> {
    if options.samples == 0 {
        return Err(crate::error::param("samples", "must be at least 1"));
    }
    let map = ForwardMap::new(basis, index_set.clone(), sampler.grid())?;
    let last = sampler.grid().steps();
    let width = index_set.len();
    let partials: Vec<Result<Moments>> =
        options
            .execution
            .map_blocks(options.samples, BLOCK, |range| {
                let mut moments = Moments::new(width);
                let mut x = vec![0.0; width];
                let mut x_anti = vec![0.0; width];
                let mut obs = vec![0.0; width];
                let mut scratch = Vec::new();
                for k in range {
                    let path =
                        sampler.sample_stream(options.seed, &[domain::COEFFICIENT_PATHS, k as u64]);
                    let xi = checked_payoff(payoff, &path, k)?;
                    map.values_into(&path, last, &mut x, &mut scratch)?;
                    if options.antithetic {
                        let reflected = path.negated();
                        let xi_anti = checked_payoff(payoff, &reflected, k)?;
                        map.values_into(&reflected, last, &mut x_anti, &mut scratch)?;
                        for i in 0..width {
                            obs[i] = 0.5 * (xi * x[i] + xi_anti * x_anti[i]);
                        }
                    } else {
                        for i in 0..width {
                            obs[i] = xi * x[i];
                        }
                    }
                    moments.push(&obs);
                }
                Ok(moments)
            });
    let partials = partials.into_iter().collect::<Result<Vec<_>>>()?;
    let total = Moments::merge_all(width, &partials);
    let se = total.stderr();
    let (values, stderr) = index_set
        .indices()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let f = a.factorial();
            (f * total.mean()[i], f * se[i])
        })
        .unzip();
    ChaosCoefficients::with_stderr(
        index_set.clone(),
        basis.clone(),
        values,
        stderr,
        options.samples as u64,
    )
}

fn checked_payoff<P: Payoff + ?Sized>(payoff: &P, path: &BrownianPath, k: usize) -> Result<f64> {
    let xi = payoff.payoff(path)?;
    if !xi.is_finite() {
        return Err(Error::NonFinite(format!("payoff sample {k} evaluated to {xi}")));
    }
    Ok(xi)
}

/// `Pi_{p,M} xi (omega) = sum_a d_a X_T^a(omega)`.
pub fn project(coefficients: &ChaosCoefficients, path: &BrownianPath) -> Result<f64> {
    let map = ForwardMap::new(coefficients.basis(), coefficients.index_set().clone(), path.grid())?;
    let x = map.values(path, path.grid().steps())?;
    Ok(coefficients.project_values(&x))
}

impl Payoff for ChaosCoefficients {
    fn payoff(&self, path: &BrownianPath) -> Result<f64> {
        project(self, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Arc<IndexSet>, BasisSpec) {
        let basis = BasisSpec::new(TimeGrid::uniform(1.0, 3).unwrap(), 1).unwrap();
        (Arc::new(IndexSet::new(2, 3).unwrap()), basis)
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let (set, basis) = setup();
        let values: Vec<f64> = (0..set.len()).map(|i| (i as f64 + 0.1).sqrt() / 3.0).collect();
        let stderr: Vec<f64> = (0..set.len()).map(|i| 1e-3 / (i as f64 + 1.0)).collect();
        let c = ChaosCoefficients::with_stderr(set, basis, values, stderr, 1000).unwrap();
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let back = ChaosCoefficients::read(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.values().iter().zip(c.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(ChaosCoefficients::read("nonsense\n".as_bytes()).is_err());
        let (set, basis) = setup();
        let c = ChaosCoefficients::zeros(set, basis).unwrap();
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(ChaosCoefficients::read(truncated.as_bytes()).is_err());
    }

    #[test]
    fn rejects_wrong_lengths() {
        let (set, basis) = setup();
        assert!(ChaosCoefficients::new(set.clone(), basis.clone(), vec![1.0]).is_err());
        let mut v = vec![0.0; set.len()];
        v[2] = f64::INFINITY;
        assert!(ChaosCoefficients::new(set, basis, v).is_err());
    }

    #[test]
    fn constant_payoff_has_only_the_zero_coefficient() {
        let (set, basis) = setup();
        let sampler = PathSampler::new(basis.partition().clone(), 1, None).unwrap();
        let c = estimate_coefficients(&|_: &BrownianPath| 2.5, &set, &basis, &sampler, &EstimateOptions::new(5000, 1))
            .unwrap();
        assert_eq!(c.values()[0], 2.5);
        for i in 1..set.len() {
            assert!(c.values()[i].abs() <= 4.0 * c.stderr()[i] + 1e-12);
        }
    }
}
