//! Central finite-difference checks of tape gradients, run in `f64`.

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let rel = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some(Mismatch {
                name: name.to_string(),
                index,
                analytic,
                numeric,
                rel_err: rel,
            });
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps gradients that are
/// zero up to rounding from producing meaningless ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks the gradient of a scalar function of leaf tensors.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    check_inputs_with(None, inputs, step, floor, f)
}

/// [`check_inputs`] for functions that also read parameters from `store`.
pub fn check_inputs_with<F>(
    store: Option<&ParamStore<f64>>,
    inputs: &[Tensor<f64>],
    step: f64,
    floor: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let new_graph = || store.map_or_else(Graph::new, Graph::with_params);
    let mut g = new_graph();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = new_graph();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            report.record(&format!("input{k}"), i, analytic[i], numeric, floor);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a scalar loss built over `store`.
/// `select(id, element)` restricts which elements are perturbed.
pub fn check_params<F, S>(
    store: &ParamStore<f64>,
    step: f64,
    floor: f64,
    mut select: S,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var>,
    S: FnMut(ParamId, usize) -> bool,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        Ok(g.scalar(out))
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let analytic = grads.param(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let name = store.name(id).to_string();
        for i in 0..n {
            if !select(id, i) {
                continue;
            }
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            report.record(&name, i, analytic[i], (up - down) / (2.0 * step), floor);
        }
    }
    Ok(report)
}
