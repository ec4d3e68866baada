use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1e-8, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Checks the analytic gradient of a scalar function of the parameters.
///
/// `loss` records the function on a fresh graph and returns the scalar node.
/// The store is restored to its original values before returning; its
/// gradient slots hold the analytic gradient afterwards.
pub fn grad_check<F>(store: &mut ParamStore, loss: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::config("eps", "must be positive"));
    }
    store.zero_grads();
    let mut graph = Graph::new();
    let out = loss(store, &mut graph)?;
    let value = graph.value(out).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check base value".into()));
    }
    graph.backward(out);
    graph.accumulate_param_grads(store);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(store, &mut g)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check perturbed value".into()))
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for j in 0..store.value(id).len() {
            let original = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = original + eps;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[j] = original - eps;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[j] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let analytic = store.grad(id).data()[j];
            let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0), 0);
        let report = grad_check(
            &mut store,
            |s, g| {
                let n = g.param(s, x);
                Ok(g.matmul(n, n))
            },
            1e-5,
        )
        .unwrap();
        assert!((store.grad(x).item() - 6.0).abs() < 1e-12);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(vec![1.0, -2.0]), 0);
        let report =
            grad_check(&mut store, |_, g| Ok(g.constant(Tensor::scalar(4.2))), 1e-5).unwrap();
        assert!(store.grad(x).data().iter().all(|&v| v == 0.0));
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_bad_eps() {
        let mut store = ParamStore::new();
        assert!(grad_check(&mut store, |_, g| Ok(g.constant(Tensor::scalar(0.0))), 0.0).is_err());
    }
}
