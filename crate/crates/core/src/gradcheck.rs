//! Central finite-difference gradient checking.
//!
//! These helpers only ever run forward passes, so they stay independent of
//! the backward rules they check.

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

/// Max-norm relative error `max|a - n| / max(max|a|, max|n|)`.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic.max_abs_diff(numeric) / scale
}

/// Central differences of a scalar function at `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    out
}

/// Analytic and numeric gradients of a scalar-valued graph with respect to
/// its single input `x`.
pub fn check_input_grad(params: &ParamStore, x: &Tensor, build: impl Fn(&mut Graph, Var) -> Var) -> (Tensor, Tensor) {
    let mut g = Graph::new(params);
    let xv = g.input(x.clone());
    let out = build(&mut g, xv);
    let analytic = g
        .backward(out)
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numeric_grad(x, |probe| {
        let mut g = Graph::inference(params);
        let xv = g.constant(probe.clone());
        let out = build(&mut g, xv);
        g.value(out).item()
    });
    (analytic, numeric)
}

/// Result of checking one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub checked: usize,
}

/// Checks up to `max_entries` evenly strided entries of each listed
/// parameter against central differences.
pub fn check_param_grads(
    params: &ParamStore,
    ids: &[ParamId],
    max_entries: usize,
    build: impl Fn(&mut Graph) -> Var,
) -> Vec<ParamCheck> {
    let analytic = {
        let mut g = Graph::new(params);
        let out = build(&mut g);
        g.backward(out).param_grads(&g)
    };
    let mut work = params.clone();
    let eval = |store: &ParamStore| {
        let mut g = Graph::inference(store);
        let out = build(&mut g);
        g.value(out).item()
    };
    ids.iter()
        .map(|&id| {
            let n = params.get(id).len();
            let stride = n.div_ceil(max_entries.max(1)).max(1);
            let idx: Vec<usize> = (0..n).step_by(stride).collect();
            let mut a = Vec::with_capacity(idx.len());
            let mut num = Vec::with_capacity(idx.len());
            for &i in &idx {
                let orig = work.get(id).data()[i];
                work.get_mut(id).data_mut()[i] = orig + FD_STEP;
                let up = eval(&work);
                work.get_mut(id).data_mut()[i] = orig - FD_STEP;
                let down = eval(&work);
                work.get_mut(id).data_mut()[i] = orig;
                num.push((up - down) / (2.0 * FD_STEP));
                a.push(analytic[id.index()].data()[i]);
            }
            let k = idx.len();
            ParamCheck {
                name: params.name(id).to_string(),
                rel_error: max_rel_error(&Tensor::new(&[k], a), &Tensor::new(&[k], num)),
                checked: k,
            }
        })
        .collect()
}
