//! Central finite differences as an independent oracle for [`Graph::backward`].

use std::collections::BTreeMap;

use crate::error::GraphError;
use crate::graph::{Bindings, Gradients, Graph};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst relative error.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub params: BTreeMap<String, ParamError>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.max_abs_err)
            .fold(0.0, f64::max)
    }
}

/// `(f(θ + h·e) − f(θ − h·e)) / 2h` for every coordinate of every tensor in `params`.
pub fn finite_difference<F>(
    mut f: F,
    params: &Bindings<f64>,
    step: f64,
) -> Result<Gradients<f64>, GraphError>
where
    F: FnMut(&Bindings<f64>) -> Result<f64, GraphError>,
{
    if !(step > 0.0) {
        return Err(GraphError::BadStep(step));
    }
    let mut probe = params.clone();
    let mut out = Gradients::new();
    for (name, tensor) in params {
        let mut grad = Tensor::zeros(tensor.shape());
        for index in 0..tensor.len() {
            let original = tensor.data()[index];
            let mut eval_at = |value: f64| -> Result<f64, GraphError> {
                probe.get_mut(name).expect("probe mirrors params").data_mut()[index] = value;
                let non_finite = || GraphError::NonFiniteProbe {
                    name: name.clone(),
                    index,
                };
                match f(&probe) {
                    Ok(y) if y.is_finite() => Ok(y),
                    Ok(_) | Err(GraphError::NonFinite { .. }) => Err(non_finite()),
                    Err(e) => Err(e),
                }
            };
            let plus = eval_at(original + step)?;
            let minus = eval_at(original - step)?;
            probe.get_mut(name).expect("probe mirrors params").data_mut()[index] = original;
            grad.data_mut()[index] = (plus - minus) / (2.0 * step);
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}

/// Compares two gradient sets entry by entry.
///
/// Relative error is `|a − b| / max(|a|, |b|, 1e-8)`; the report passes when
/// every parameter's maximum relative error is below `tol`.
pub fn compare_gradients(
    analytic: &Gradients<f64>,
    numeric: &Gradients<f64>,
    tol: f64,
) -> GradReport {
    let mut params = BTreeMap::new();
    for (name, a) in analytic {
        let Some(n) = numeric.get(name) else {
            params.insert(
                name.clone(),
                ParamError {
                    max_rel_err: f64::INFINITY,
                    max_abs_err: f64::INFINITY,
                    worst_index: 0,
                },
            );
            continue;
        };
        let mut err = ParamError {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let abs = (x - y).abs();
            let rel = abs / x.abs().max(y.abs()).max(REL_ERR_FLOOR);
            err.max_abs_err = err.max_abs_err.max(abs);
            if rel > err.max_rel_err || rel.is_nan() {
                err.max_rel_err = rel;
                err.worst_index = i;
            }
        }
        params.insert(name.clone(), err);
    }
    let pass = params.values().all(|p| p.max_rel_err < tol);
    GradReport {
        params,
        tolerance: tol,
        pass,
    }
}

/// Checks `graph.backward()` against central differences of `graph.forward_eval`.
///
/// `params` must bind every leaf of the graph; gradients are compared for
/// the entries that are trainable parameters.
pub fn grad_check(
    graph: &mut Graph<f64>,
    params: &Bindings<f64>,
    step: f64,
    tol: f64,
) -> Result<GradReport, GraphError> {
    graph.forward_eval(params)?;
    let analytic = graph.backward()?;

    let trainable: Bindings<f64> = params
        .iter()
        .filter(|(k, _)| analytic.contains_key(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut full = params.clone();
    let numeric = finite_difference(
        |probe| {
            for (k, v) in probe {
                full.insert(k.clone(), v.clone());
            }
            graph.forward_eval(&full)?.item().map_err(GraphError::from)
        },
        &trainable,
        step,
    )?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}
