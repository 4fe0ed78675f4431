//! Central finite-difference validation of tape gradients.
//!
//! The module's own oracle: every backward rule in this crate is checked
//! against `(f(x+eps*e) - f(x-eps*e)) / (2*eps)` on randomized inputs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorId, TensorResult};

/// Which coordinates of each input tensor the check perturbs.
#[derive(Debug, Clone, Copy)]
pub enum CoordSelection {
    /// Every coordinate (small tensors).
    All,
    /// A random subset per tensor, drawn from the given seed. Large models
    /// make full perturbation quadratic; a sample keeps the check honest
    /// and the runtime bounded.
    Sample { per_tensor: usize, seed: u64 },
}

/// Compares the tape gradient of a scalar-valued `f` at `x` against central
/// differences, returning the maximum relative error over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> TensorResult<f64>
where
    F: Fn(&mut Tape, TensorId) -> TensorResult<TensorId>,
{
    grad_check_multi(
        |tape, ids| f(tape, ids[0]),
        std::slice::from_ref(x),
        eps,
        CoordSelection::All,
    )
}

/// Multi-input variant of [`grad_check`]; `f` receives one id per input in
/// order. Inputs are treated as gradientleaves regardless of their
/// `requires_grad` flag.
pub fn grad_check_multi<F>(
    f: F,
    xs: &[Tensor],
    eps: f64,
    coords: CoordSelection,
) -> TensorResult<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorResult<TensorId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = xs
        .iter()
        .map(|x| tape.leaf(x.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &ids)?;
    if tape.value(out).numel() != 1 {
        return Err(super::TensorError::Param(
            "grad_check: function must return a one-element tensor".into(),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
        })
        .collect();

    let eval = |xs_pert: &[Tensor]| -> TensorResult<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = xs_pert.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &ids)?;
        Ok(t.scalar_value(out))
    };

    let mut max_rel = 0.0f64;
    for (ti, x) in xs.iter().enumerate() {
        let coords_here: Vec<usize> = match coords {
            CoordSelection::All => (0..x.numel()).collect(),
            CoordSelection::Sample { per_tensor, seed } => {
                if x.numel() <= per_tensor {
                    (0..x.numel()).collect()
                } else {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(seed.wrapping_add(ti as u64).wrapping_mul(0x9e37_79b9));
                    let mut all: Vec<usize> = (0..x.numel()).collect();
                    all.shuffle(&mut rng);
                    all.truncate(per_tensor);
                    all.sort_unstable();
                    all
                }
            }
        };
        let mut work: Vec<Tensor> = xs.to_vec();
        for c in coords_here {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + eps;
            let f_plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - eps;
            let f_minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[ti][c];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
