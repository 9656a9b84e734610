//! Central finite-difference gradient checks in double precision.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the backward rules it is checking.

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (tensor index, element index) of the worst element.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: (0, 0),
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        }
    }

    fn record(&mut self, at: (usize, usize), analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = rel_err(analytic, numeric);
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = at;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Check gradients of `f` with respect to each of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = ins.iter().map(|t| g.input(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };

    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[ti].len()];
        let analytic = grads.leaf(var.id()).unwrap_or(&zeros).to_vec();
        for ei in 0..inputs[ti].len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - step;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            report.record((ti, ei), analytic[ei], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Check gradients of `f` with respect to the listed parameters of `store`.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    pids: &[ParamId],
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> Result<Var<'g, f64>>,
{
    let grads = {
        let g = Graph::new();
        let loss = f(&g, store)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        Ok(f(&g, s)?.value().item())
    };

    let mut report = GradCheckReport::new();
    for (ti, &pid) in pids.iter().enumerate() {
        let n = store.value(pid).len();
        let analytic = grads.param(pid).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        for ei in 0..n {
            let orig = store.value(pid).data()[ei];
            store.get_mut(pid).value_mut().data_mut()[ei] = orig + step;
            let up = eval(store)?;
            store.get_mut(pid).value_mut().data_mut()[ei] = orig - step;
            let down = eval(store)?;
            store.get_mut(pid).value_mut().data_mut()[ei] = orig;
            report.record((ti, ei), analytic[ei], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}
