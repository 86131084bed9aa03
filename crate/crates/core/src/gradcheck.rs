//! Central finite-difference checks of analytic gradients, in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Result of [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Where the largest error occurred, e.g. `input 0 [17]` or `param msfe.mlp1.weight [3]`.
    pub worst: String,
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// Denominator floor; entries whose gradients are both far below it are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Compare the gradients of the scalar built by `f` with central differences
/// of step `step`, for every entry of every input and every trainable
/// parameter of `store`.
///
/// `f` receives the graph, the store and one variable per input.
pub fn check_gradients<F>(store: &mut ParamStore<f64>, inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, store, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let pgrads = g.param_grads(&grads);

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |analytic: f64, numeric: f64, what: &dyn Fn() -> String| {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err;
            report.worst = what();
        }
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(store, &work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(store, &work)?;
            work[k].data_mut()[i] = orig;
            record(analytic.data()[i], (plus - minus) / (2.0 * step), &|| format!("input {} [{}]", k, i));
        }
    }

    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let analytic = pgrads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for i in 0..analytic.numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(store, inputs)?;
            store.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(store, inputs)?;
            store.value_mut(id).data_mut()[i] = orig;
            let name = store.name(id);
            record(analytic.data()[i], (plus - minus) / (2.0 * step), &|| format!("param {} [{}]", name, i));
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::InvalidShape {
            op: "check_gradients",
            detail: format!("output must be scalar, got {:?}", t.shape()),
        });
    }
    Ok(t.data()[0])
}
