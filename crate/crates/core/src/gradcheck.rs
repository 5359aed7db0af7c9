//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::ParameterStore;

/// Gradient magnitudes below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric|`.
    pub max_abs_error: f64,
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
    pub max_rel_error: f64,
    /// Number of scalar parameters probed.
    pub checked: usize,
}

/// Compares `analytic` (aligned with `params`, store order) against central
/// differences of `value`.
pub fn check_gradient<F>(
    value: F,
    analytic: &[Vec<f64>],
    params: &ParameterStore,
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::config("epsilon", "must lie in (0, 1e-2]"));
    }
    let aligned = analytic.len() == params.len()
        && analytic
            .iter()
            .zip(params.entries())
            .all(|(g, e)| g.len() == e.tensor.len());
    if !aligned {
        return Err(Error::shape(
            "gradcheck",
            "analytic gradient does not match the parameters",
        ));
    }
    let eval = |store: &ParameterStore| -> Result<f64> {
        let v = value(store)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "gradcheck" })
        }
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    for (e, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.entries()[e].tensor.data()[i];
            probe.entries_mut()[e].tensor.data_mut()[i] = orig + epsilon;
            let up = eval(&probe)?;
            probe.entries_mut()[e].tensor.data_mut()[i] = orig - epsilon;
            let down = eval(&probe)?;
            probe.entries_mut()[e].tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let diff = (a - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(diff);
            report.max_rel_error = report
                .max_rel_error
                .max(diff / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Gradient check of a scalar loss recorded on the graph.
///
/// `build_loss` records the loss on a fresh graph from the bound parameter
/// handles (in store order).
pub fn finite_difference_check<F>(
    build_loss: F,
    params: &ParameterStore,
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, analytic) = graph_value_and_gradient(&build_loss, params)?;
    check_gradient(
        |store| {
            let mut g = Graph::new();
            let vars = store.bind(&mut g, false)?;
            let l = build_loss(&mut g, &vars)?;
            scalar(&g, l)
        },
        &analytic,
        params,
        epsilon,
    )
}

/// Loss value and per-entry gradient of a graph-recorded loss.
pub fn graph_value_and_gradient<F>(
    build_loss: F,
    params: &ParameterStore,
) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars = params.bind(&mut graph, true)?;
    let loss = build_loss(&mut graph, &vars)?;
    let value = scalar(&graph, loss)?;
    let mut grads = graph.backward(loss)?;
    let analytic = vars
        .iter()
        .map(|v| grads.take(*v).expect("bound as parameter"))
        .collect();
    Ok((value, analytic))
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    g.value(v)
        .item()
        .ok_or_else(|| Error::Backward("loss is not scalar".into()))
}
