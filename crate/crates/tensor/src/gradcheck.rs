//! Central finite-difference gradient checks.

use crate::graph::{Graph, Var};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Probe {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn rel_err(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

pub fn worst(probes: &[Probe], floor: f64) -> f64 {
    probes.iter().map(|p| p.rel_err(floor)).fold(0.0, f64::max)
}

/// Compares analytic parameter gradients of `loss` with central differences
/// of step `eps` at the given `(parameter, flat index)` probes.
pub fn check_params(
    store: &ParamStore<f64>,
    probes: &[(&str, usize)],
    eps: f64,
    loss: impl for<'a> Fn(&Ctx<'a, f64>) -> Var<'a, f64>,
) -> Vec<Probe> {
    let eval = |s: &ParamStore<f64>| {
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, s);
        loss(&ctx).value().item()
    };
    let g = Graph::new();
    let ctx = Ctx::new(&g, store);
    let l = loss(&ctx);
    let grads = ctx.grads(&g.backward(l));
    let mut scratch = store.clone();
    probes
        .iter()
        .map(|&(name, index)| {
            let analytic = grads.get(name).map_or(0.0, |t| t.data()[index]);
            let orig = store.value(name).data()[index];
            scratch.get_mut(name).unwrap().data_mut()[index] = orig + eps;
            let up = eval(&scratch);
            scratch.get_mut(name).unwrap().data_mut()[index] = orig - eps;
            let down = eval(&scratch);
            scratch.get_mut(name).unwrap().data_mut()[index] = orig;
            Probe { label: name.to_string(), index, analytic, numeric: (up - down) / (2.0 * eps) }
        })
        .collect()
}

/// Same as [`check_params`] for plain input tensors; probes are
/// `(input number, flat index)`.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    probes: &[(usize, usize)],
    eps: f64,
    f: impl for<'a> Fn(&'a Graph<f64>, &[Var<'a, f64>]) -> Var<'a, f64>,
) -> Vec<Probe> {
    let eval = |xs: &[Tensor<f64>]| {
        let g = Graph::no_grad();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vars).value().item()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let mut scratch = inputs.to_vec();
    probes
        .iter()
        .map(|&(which, index)| {
            let analytic = grads.get(vars[which]).map_or(0.0, |t| t.data()[index]);
            let orig = inputs[which].data()[index];
            scratch[which].data_mut()[index] = orig + eps;
            let up = eval(&scratch);
            scratch[which].data_mut()[index] = orig - eps;
            let down = eval(&scratch);
            scratch[which].data_mut()[index] = orig;
            Probe { label: format!("input{which}"), index, analytic, numeric: (up - down) / (2.0 * eps) }
        })
        .collect()
}
