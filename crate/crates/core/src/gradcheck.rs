//! Central finite-difference gradient checking.
//!
//! The loss closure is re-evaluated with each scalar parameter nudged by
//! `±h`; the numeric slope is compared against the tape's analytic gradient
//! using the norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` per tensor.

use crate::error::Result;
use crate::params::{ParamStore, Session};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub groups: Vec<GroupError>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.rel_err < tol)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares analytic and numeric gradients for each named tensor in `params`.
///
/// `loss` receives a fresh graph plus one leaf per parameter (in order) and
/// must return a scalar node.
pub fn check<F>(params: &[(String, Tensor)], h: f64, mut loss: F) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.param(t)).collect();
    let out = loss(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&tensors)
        .map(|(v, t)| {
            grads
                .wrt(*v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradReport::default();
    for p in 0..tensors.len() {
        let mut numeric = vec![0.0; tensors[p].numel()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = tensors[p].data()[e];
            tensors[p].data_mut()[e] = orig + h;
            let plus = eval(&tensors)?;
            tensors[p].data_mut()[e] = orig - h;
            let minus = eval(&tensors)?;
            tensors[p].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        report.groups.push(GroupError {
            name: params[p].0.clone(),
            rel_err: relative_error(&analytic[p], &numeric),
            analytic_norm: norm(&analytic[p]),
            numeric_norm: norm(&numeric),
        });
    }
    Ok(report)
}

/// Same check over every tensor of a [`ParamStore`]; `loss` builds the
/// forward pass on the session it is given.
pub fn check_store<F>(store: &ParamStore, h: f64, mut loss: F) -> Result<GradReport>
where
    F: FnMut(&mut Session) -> Result<Var>,
{
    let mut s = Session::train(store);
    let out = loss(&mut s)?;
    let grads = s.backward(out)?;

    let mut work = store.clone();
    let mut report = GradReport::default();
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic = grads.get(id).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        let mut numeric = vec![0.0; n];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = work.get(id).data()[e];
            let mut at = |w: &mut ParamStore, x: f64| -> Result<f64> {
                w.get_mut(id).data_mut()[e] = x;
                let mut s = Session::eval(w);
                let out = loss(&mut s)?;
                Ok(s.value(out).item())
            };
            let plus = at(&mut work, orig + h)?;
            let minus = at(&mut work, orig - h)?;
            work.get_mut(id).data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        report.groups.push(GroupError {
            name: store.name(id).to_string(),
            rel_err: relative_error(&analytic, &numeric),
            analytic_norm: norm(&analytic),
            numeric_norm: norm(&numeric),
        });
    }
    Ok(report)
}
