//! Text persistence for per-step models.
//!
//! Layout: a `opbsde-model 1` header, `key value` lines (kind, index-set
//! fingerprint, widths, normalisation constants as comma-separated floats),
//! then `values <count>` followed by one parameter per line. Floats use 17
//! significant digits, so the round trip is bit-exact.

use std::io::{BufRead, Write};

use ndarray::Array2;

use super::{FeatureScaler, LinearModel, MlpModel, StepModel};
use crate::chaos::coefficients::{field, join_floats, parse_field, parse_float, split_floats};
use crate::error::{Error, Result};

const HEADER: &str = "opbsde-model 1";

pub fn write_model<W: Write>(mut w: W, model: &StepModel, fingerprint: &str) -> Result<()> {
    writeln!(w, "{HEADER}")?;
    match model {
        StepModel::Linear(m) => {
            writeln!(w, "kind linear")?;
            writeln!(w, "index_set {fingerprint}")?;
            writeln!(w, "input {}", m.inputs())?;
            writeln!(w, "output {}", m.outputs())?;
            write_scaler(&mut w, m.scaler())?;
            write_values(&mut w, m.weights().iter().copied(), m.weights().len())?;
        }
        StepModel::Mlp(m) => {
            writeln!(w, "kind mlp")?;
            writeln!(w, "index_set {fingerprint}")?;
            writeln!(w, "input {}", m.input())?;
            writeln!(w, "hidden {}", m.hidden())?;
            writeln!(w, "output {}", m.output())?;
            write_scaler(&mut w, m.scaler())?;
            writeln!(w, "output_shift {}", join_floats(m.out_shift()))?;
            writeln!(w, "output_scale {}", join_floats(m.out_scale()))?;
            write_values(&mut w, m.params().iter().copied(), m.params().len())?;
        }
    }
    Ok(())
}

fn write_scaler<W: Write>(w: &mut W, s: &FeatureScaler) -> Result<()> {
    writeln!(w, "scaler_mean {}", join_floats(s.mean()))?;
    writeln!(w, "scaler_inv_scale {}", join_floats(s.inv_scale()))?;
    Ok(())
}

fn write_values<W: Write>(w: &mut W, values: impl Iterator<Item = f64>, n: usize) -> Result<()> {
    writeln!(w, "values {n}")?;
    for v in values {
        writeln!(w, "{v:.16e}")?;
    }
    Ok(())
}

/// Reads a model and the index-set fingerprint it was trained against.
pub fn read_model<R: BufRead>(r: R) -> Result<(StepModel, String)> {
    let mut lines = r.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format(format!("model file ends before {what}")))
    };
    let header = next("header")?;
    if header != HEADER {
        return Err(Error::Format(format!("unexpected model header {header:?}")));
    }
    let kind_line = next("kind")?;
    let kind = field(&kind_line, "kind")?.to_string();
    let fp_line = next("index_set")?;
    let fingerprint = field(&fp_line, "index_set")?.trim().to_string();
    let input: usize = parse_field(&next("input")?, "input")?;
    let hidden: usize = if kind == "mlp" {
        parse_field(&next("hidden")?, "hidden")?
    } else {
        0
    };
    let output: usize = parse_field(&next("output")?, "output")?;
    let mean = split_floats(field(&next("scaler_mean")?, "scaler_mean")?)?;
    let inv = split_floats(field(&next("scaler_inv_scale")?, "scaler_inv_scale")?)?;
    let scaler = FeatureScaler::from_parts(mean, inv)?;
    let (shift, scale) = if kind == "mlp" {
        (
            split_floats(field(&next("output_shift")?, "output_shift")?)?,
            split_floats(field(&next("output_scale")?, "output_scale")?)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let count: usize = parse_field(&next("values")?, "values")?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(parse_float(&next("parameter values")?)?);
    }
    let model = match kind.as_str() {
        "linear" => {
            let weights = Array2::from_shape_vec((input + 1, output), values)
                .map_err(|e| Error::Format(format!("linear weights: {e}")))?;
            StepModel::Linear(LinearModel::from_parts(scaler, weights)?)
        }
        "mlp" => StepModel::Mlp(MlpModel::from_parts(input, hidden, output, values, scaler, shift, scale)?),
        other => return Err(Error::Format(format!("unknown model kind {other:?}"))),
    };
    Ok((model, fingerprint))
}
