//! Finite-difference checking against whole parameter stores.
//!
//! [`crate::tensor::grad_check`] validates single ops; this helper validates
//! gradients of an arbitrary forward pass (encoders, heads, the full
//! objective) with respect to named store parameters, optionally sampling
//! coordinates so full-model checks stay tractable.

use rand::seq::SliceRandom;

use crate::encoders::{Graph, ParamStore};
use crate::rng::stream;
use crate::tensor::{TensorId, TensorResult};

/// Max relative error between tape gradients and central differences for the
/// given parameters. `forward` must be a pure function of the store (seed
/// any RNG it uses internally). `per_tensor = 0` checks every coordinate.
pub fn check_store_grads<F>(
    store: &ParamStore,
    names: &[String],
    per_tensor: usize,
    eps: f64,
    seed: u64,
    forward: F,
) -> TensorResult<f64>
where
    F: Fn(&ParamStore) -> TensorResult<(Graph, TensorId)>,
{
    let (graph, loss) = forward(store)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    {
        let mut graph = graph;
        graph.tape.backward(loss)?;
        graph.harvest_into(&mut analytic_store);
    }

    let eval = |s: &ParamStore| -> TensorResult<f64> {
        let (graph, loss) = forward(s)?;
        Ok(graph.tape.scalar_value(loss))
    };

    let mut work = store.clone();
    let mut max_rel = 0.0f64;
    for (ti, name) in names.iter().enumerate() {
        let numel = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .numel();
        let coords: Vec<usize> = if per_tensor == 0 || numel <= per_tensor {
            (0..numel).collect()
        } else {
            let mut rng = stream(seed, "store-grad-check", &[ti as u64]);
            let mut all: Vec<usize> = (0..numel).collect();
            all.shuffle(&mut rng);
            all.truncate(per_tensor);
            all
        };
        let analytic = analytic_store
            .get(name)
            .and_then(|t| t.grad.clone())
            .unwrap_or_else(|| vec![0.0; numel]);
        for c in coords {
            let orig = work.get(name).unwrap().data()[c];
            work.get_mut(name).unwrap().data_mut()[c] = orig + eps;
            let f_plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig - eps;
            let f_minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[c];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
