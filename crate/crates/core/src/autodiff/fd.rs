//! Central finite-difference gradient check.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdMetric {
    /// `|analytic − numeric| / (|numeric| + 1e-8)`
    Relative,
    /// `|analytic − numeric|`
    Absolute,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_error: f64,
    pub worst_index: Option<usize>,
    /// Elements compared.
    pub checked: usize,
    /// Elements whose ±h perturbation changed a branch decision (rectifier
    /// mask, pooling route, sign of an absolute value). The function is not
    /// differentiable across those, so they are left out of the maximum.
    pub skipped: usize,
}

/// Compares `backward(root, leaf)` against central differences with step
/// `h` on every element of `leaf`. The graph is left evaluated at the
/// original input.
pub fn finite_difference_check<S: Scalar>(
    graph: &mut Graph<S>,
    root: NodeId,
    leaf: &str,
    h: f64,
    metric: FdMetric,
) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step h must be positive, got {h}"
        )));
    }
    let base = graph
        .input_value(leaf)
        .cloned()
        .ok_or_else(|| Error::Graph(format!("input {leaf:?} has no value")))?;
    graph.forward(root)?;
    let signature = graph.branch_signature(root);
    let analytic = graph.backward(root, leaf)?;

    let mut report = FdReport {
        max_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = base.clone();
    for j in 0..base.len() {
        let x0 = base.data()[j];
        let mut eval = |v: S, g: &mut Graph<S>| -> Result<(f64, u64)> {
            probe.data_mut()[j] = v;
            g.set_input(leaf, probe.clone())?;
            g.forward(root)?;
            let f = g.scalar_value(root).unwrap_or(f64::NAN);
            Ok((f, g.branch_signature(root)))
        };
        // Steps actually taken after rounding to the scalar type.
        let (xp, xm) = (x0 + S::of(h), x0 - S::of(h));
        let (fp, sp) = eval(xp, graph)?;
        let (fm, sm) = eval(xm, graph)?;
        probe.data_mut()[j] = x0;
        if sp != signature || sm != signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (xp.f64() - xm.f64());
        let a = analytic.data()[j].f64();
        let err = match metric {
            FdMetric::Relative => (a - numeric).abs() / (numeric.abs() + 1e-8),
            FdMetric::Absolute => (a - numeric).abs(),
        };
        report.checked += 1;
        if err >= report.max_error {
            report.max_error = err;
            report.worst_index = Some(j);
        }
    }
    graph.set_input(leaf, base)?;
    graph.forward(root)?;
    Ok(report)
}
