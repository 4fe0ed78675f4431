//! Low-rank adaptation of linear projections: the frozen base weight is
//! augmented by a trainable `B·A` pair scaled by `alpha/rank`, so the
//! adapted forward equals the base forward exactly at initialization
//! (`B = 0`) and only a small fraction of parameters trains.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{TensorError, TensorId, TensorResult};

use super::params::{Graph, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// When set, the wrapped base weights receive no gradient.
    pub freeze_base: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            freeze_base: true,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, d_in: usize, d_out: usize) -> TensorResult<()> {
        if self.rank == 0 {
            return Err(TensorError::Param("LoRA rank must be >= 1".into()));
        }
        if self.rank >= d_in.min(d_out) {
            return Err(TensorError::Param(format!(
                "LoRA rank {} must be below min({d_in}, {d_out})",
                self.rank
            )));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Registers the adapter pair for base weight `{base}.w`: `A` ([d_in, r],
/// small random) and `B` ([r, d_out], zeros). With `freeze_base`, the base
/// weight's trainable flag is cleared.
pub fn init_lora(
    store: &mut ParamStore,
    base: &str,
    cfg: &LoraConfig,
    rng: &mut ChaCha8Rng,
) -> TensorResult<()> {
    let w = store
        .get(&format!("{base}.w"))
        .ok_or_else(|| TensorError::Param(format!("no base weight {base}.w to wrap")))?;
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    cfg.validate(d_in, d_out)?;
    store.insert_randn(&format!("{base}.lora_a"), vec![d_in, cfg.rank], 0.02, rng)?;
    store.insert_full(&format!("{base}.lora_b"), vec![cfg.rank, d_out], 0.0)?;
    if cfg.freeze_base {
        let name = format!("{base}.w");
        store.set_trainable_where(|n| n == name, false);
    }
    Ok(())
}

/// `y = x·W (+ bias) [+ (alpha/r)·(x·A)·B when adapters exist]`.
///
/// The LoRA branch activates whenever `{base}.lora_a` is present; `lora`
/// carries the scaling. Plain linears just pass `None`.
pub fn linear_lora(
    g: &mut Graph,
    store: &ParamStore,
    base: &str,
    x: TensorId,
    bias: bool,
    lora: Option<&LoraConfig>,
) -> TensorResult<TensorId> {
    let w = g.param(store, &format!("{base}.w"))?;
    let mut y = g.tape.matmul(x, w)?;
    if bias {
        let b = g.param(store, &format!("{base}.b"))?;
        y = g.tape.add_bias(y, b)?;
    }
    if let (Some(cfg), Some(_)) = (lora, store.index_of(&format!("{base}.lora_a"))) {
        let a = g.param(store, &format!("{base}.lora_a"))?;
        let bmat = g.param(store, &format!("{base}.lora_b"))?;
        let xa = g.tape.matmul(x, a)?;
        let xab = g.tape.matmul(xa, bmat)?;
        let delta = g.tape.scale(xab, cfg.scaling());
        y = g.tape.add(y, delta)?;
    }
    Ok(y)
}
