//! Central finite-difference oracle for recorded gradients.

use super::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so gradients far below it
    /// are compared by absolute error `tol · floor`.
    pub floor: f64,
    /// Hold `stop_gradient` outputs at their unperturbed values while
    /// differencing, so sg-blocked paths are excluded from the numeric side.
    pub freeze_stop_gradients: bool,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            freeze_stop_gradients: true,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat entry of the worst mismatch.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
    pub passed: bool,
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` gradients of `loss_fn` against central differences
/// for every parameter entry in `store`. Parameter values are restored and
/// gradient accumulators are left holding the analytic gradient.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    store.zero_grad();
    let graph = Graph::new();
    let loss = loss_fn(&graph, store)?;
    graph.backward(loss, store)?;
    let stops = graph.stop_values();
    drop(graph);

    let eval = |store: &ParamStore| -> Result<f64> {
        let g = if opts.freeze_stop_gradients {
            Graph::replaying(stops.clone())
        } else {
            Graph::new()
        };
        let v = loss_fn(&g, store)?.item();
        Ok(v)
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tol: opts.tol,
        passed: true,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for i in entries {
            let analytic = store.grad(id).data()[i];
            let x = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = x + opts.h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = x - opts.h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = relative_error(analytic, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}
