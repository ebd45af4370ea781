use super::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDifferenceReport {
    pub max_relative_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a ReLU changed state within `±h`.
    pub skipped_kinks: usize,
}

/// Compares `d loss / d input` against `(L(x+h·e) - L(x-h·e)) / 2h` at the
/// given flat coordinates of `input`.
///
/// The relative error at a coordinate is
/// `|analytic - numeric| / max(|analytic|, 1e-8)`. With `skip_relu_kinks`,
/// coordinates whose ±h probes flip any ReLU pre-activation are excluded.
pub fn finite_difference_check(
    graph: &Graph,
    bindings: &Bindings<'_>,
    loss: NodeId,
    input: &str,
    coordinates: &[usize],
    h: f64,
    skip_relu_kinks: bool,
) -> Result<FiniteDifferenceReport> {
    if !(h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let base = *bindings
        .get(input)
        .ok_or_else(|| Error::UnboundInput(input.to_owned()))?;
    if let Some(&c) = coordinates.iter().find(|&&c| c >= base.len()) {
        return Err(Error::config(format!("coordinate {c} outside input of {} elements", base.len())));
    }

    let tape = graph.forward(bindings)?;
    let analytic = tape.input_gradient(loss, input)?;
    let pattern = skip_relu_kinks.then(|| tape.relu_pattern());
    drop(tape);

    let probe = |coord: usize, delta: f64| -> Result<(f64, Vec<bool>)> {
        let mut shifted: Tensor = base.clone();
        shifted.data_mut()[coord] += delta;
        let mut b = bindings.clone();
        b.insert(input, &shifted);
        let tape = graph.forward(&b)?;
        let value = tape.value(loss).data()[0];
        let pat = if skip_relu_kinks { tape.relu_pattern() } else { Vec::new() };
        Ok((value, pat))
    };

    let mut report = FiniteDifferenceReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for &coord in coordinates {
        let (plus, pat_plus) = probe(coord, h)?;
        let (minus, pat_minus) = probe(coord, -h)?;
        if let Some(p) = &pattern {
            if &pat_plus != p || &pat_minus != p {
                report.skipped_kinks += 1;
                continue;
            }
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[coord];
        let rel = (a - numeric).abs() / a.abs().max(1e-8);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
