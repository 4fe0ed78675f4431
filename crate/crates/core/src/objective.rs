//! Projection heads and the symmetric tri-modal InfoNCE objective.
//!
//! Encoder CLS vectors are projected into a shared low-dimensional space
//! and L2-normalized, so dot products are cosine similarities. Matched
//! text/X-ray and text/ECG pairs sit on the diagonal of the similarity
//! matrices; the loss pulls diagonals up against a temperature-scaled
//! softmax over each row and column, averaged over both directions and
//! both pairings. The positive pair is included in the denominator.

use rand_chacha::ChaCha8Rng;

use crate::encoders::{batch_norm_layer, Graph, ParamStore};
use crate::tensor::{Mode, Tensor, TensorError, TensorId, TensorResult};

/// Two bias-free-then-biased linears around batch norm and ReLU. The paper
/// recipe is model_dim → 768 → 128; desk default is model_dim → 128 → 64.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            in_dim: 128,
            hidden: 128,
            out_dim: 64,
        }
    }
}

/// Registers head parameters under `prefix`: a bias-free first linear
/// (batch norm supplies the shift), BN state, and a biased second linear.
pub fn init_projection_head(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ProjectionConfig,
    rng: &mut ChaCha8Rng,
) -> TensorResult<()> {
    store.insert_randn(
        &format!("{prefix}.fc1.w"),
        vec![cfg.in_dim, cfg.hidden],
        0.02,
        rng,
    )?;
    store.insert_full(&format!("{prefix}.bn.gamma"), vec![cfg.hidden], 1.0)?;
    store.insert_full(&format!("{prefix}.bn.beta"), vec![cfg.hidden], 0.0)?;
    store.insert_state(&format!("{prefix}.bn.running_mean"), vec![cfg.hidden], 0.0)?;
    store.insert_state(&format!("{prefix}.bn.running_var"), vec![cfg.hidden], 1.0)?;
    store.insert_randn(
        &format!("{prefix}.fc2.w"),
        vec![cfg.hidden, cfg.out_dim],
        0.02,
        rng,
    )?;
    store.insert_full(&format!("{prefix}.fc2.b"), vec![cfg.out_dim], 0.0)?;
    Ok(())
}

/// Applies the head and L2-normalizes rows. A zero pre-normalization row has
/// no direction and surfaces as a numeric error.
pub fn project(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
    mode: Mode,
) -> TensorResult<TensorId> {
    let w1 = g.param(store, &format!("{prefix}.fc1.w"))?;
    let h = g.tape.matmul(x, w1)?;
    let h = batch_norm_layer(g, store, &format!("{prefix}.bn"), h, mode)?;
    let h = g.tape.relu(h);
    let w2 = g.param(store, &format!("{prefix}.fc2.w"))?;
    let b2 = g.param(store, &format!("{prefix}.fc2.b"))?;
    let h = g.tape.matmul(h, w2)?;
    let h = g.tape.add_bias(h, b2)?;
    g.tape.row_l2_normalize(h)
}

/// Learnable temperature, stored as `log tau` so positivity is structural.
/// Initialized at `tau = 0.1`, clamped to `[1e-3, 10]` after each update.
pub struct TemperatureParam;

impl TemperatureParam {
    pub const NAME: &'static str = "temp.log_tau";
    pub const INIT: f64 = 0.1;
    pub const MIN: f64 = 1e-3;
    pub const MAX: f64 = 10.0;

    pub fn init(store: &mut ParamStore) -> TensorResult<()> {
        store.insert(
            Self::NAME,
            Tensor::new(vec![1], vec![Self::INIT.ln()])?.with_grad(),
        )
    }

    /// Current tau value.
    pub fn tau(store: &ParamStore) -> f64 {
        store
            .get(Self::NAME)
            .map(|t| t.data()[0].exp())
            .unwrap_or(Self::INIT)
    }

    /// Binds tau (not its log) onto the tape.
    pub fn bind(g: &mut Graph, store: &ParamStore) -> TensorResult<TensorId> {
        let log_tau = g.param(store, Self::NAME)?;
        Ok(g.tape.exp(log_tau))
    }

    /// Clamps `log tau` back into bounds after an optimizer step.
    pub fn clamp(store: &mut ParamStore) {
        if let Some(t) = store.get_mut(Self::NAME) {
            let v = &mut t.data_mut()[0];
            *v = v.clamp(Self::MIN.ln(), Self::MAX.ln());
        }
    }
}

/// A batch of projected, L2-normalized embeddings with provenance.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    /// `[N, D]`, unit rows.
    pub z: Tensor,
    pub modality: String,
    pub sample_ids: Vec<String>,
}

impl EmbeddingBatch {
    pub fn new(z: Tensor, modality: &str, sample_ids: Vec<String>) -> TensorResult<Self> {
        let shape = z.shape().to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(TensorError::Dim("embeddings must be nonempty [N,D]".into()));
        }
        if sample_ids.len() != shape[0] {
            return Err(TensorError::Dim("one id per embedding row".into()));
        }
        let (n, d) = (shape[0], shape[1]);
        for i in 0..n {
            let norm: f64 = (0..d).map(|j| z.at(i, j) * z.at(i, j)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(TensorError::Numeric(format!(
                    "row {i} has norm {norm}, expected unit"
                )));
            }
        }
        Ok(EmbeddingBatch {
            z,
            modality: modality.to_string(),
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.z.data()[i * d..(i + 1) * d]
    }
}

/// `S = Za · Zbᵀ`; with unit rows each entry is the cosine similarity.
pub fn cosine_sim_matrix(g: &mut Graph, za: TensorId, zb: TensorId) -> TensorResult<TensorId> {
    let sa = g.tape.value(za).shape().to_vec();
    let sb = g.tape.value(zb).shape().to_vec();
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(TensorError::Dim(format!(
            "cosine_sim_matrix: {sa:?} vs {sb:?}"
        )));
    }
    let zbt = g.tape.transpose(zb)?;
    g.tape.matmul(za, zbt)
}

fn check_tau(g: &Graph, tau: TensorId) -> TensorResult<()> {
    let t = g.tape.value(tau);
    if t.numel() != 1 {
        return Err(TensorError::Param("tau must be a scalar tensor".into()));
    }
    if !(t.data()[0] > 0.0) {
        return Err(TensorError::Param(format!(
            "tau = {} must be positive",
            t.data()[0]
        )));
    }
    Ok(())
}

/// Mean over rows `i` of `-log softmax(S_i / tau)[i]`: the positives live on
/// the diagonal and the denominator runs over the whole row (positive
/// included), numerically stabilized by max subtraction.
pub fn info_nce_directional(g: &mut Graph, s: TensorId, tau: TensorId) -> TensorResult<TensorId> {
    check_tau(g, tau)?;
    let shape = g.tape.value(s).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(TensorError::Dim(format!(
            "info_nce expects a square similarity matrix, got {shape:?}"
        )));
    }
    let inv_tau = g.tape.recip(tau);
    let logits = g.tape.mul_scalar_t(s, inv_tau)?;
    let lsm = g.tape.log_softmax(logits, 1)?;
    let diag = g.tape.take_diag(lsm)?;
    let mean = g.tape.mean_all(diag);
    Ok(g.tape.neg(mean))
}

/// `(info_nce(S) + info_nce(Sᵀ)) / 2` — both retrieval directions of one
/// modality pair. Bitwise symmetric under argument swap.
pub fn symmetric_pair_loss(
    g: &mut Graph,
    za: TensorId,
    zb: TensorId,
    tau: TensorId,
) -> TensorResult<TensorId> {
    let s = cosine_sim_matrix(g, za, zb)?;
    let st = g.tape.transpose(s)?;
    let fwd = info_nce_directional(g, s, tau)?;
    let bwd = info_nce_directional(g, st, tau)?;
    let sum = g.tape.add(fwd, bwd)?;
    Ok(g.tape.scale(sum, 0.5))
}

/// The framework objective: text anchors both other modalities,
/// `(L_text-xray + L_text-ecg) / 2`.
pub fn total_loss(
    g: &mut Graph,
    z_text: TensorId,
    z_xray: TensorId,
    z_ecg: TensorId,
    tau: TensorId,
) -> TensorResult<TensorId> {
    let tx = symmetric_pair_loss(g, z_text, z_xray, tau)?;
    let te = symmetric_pair_loss(g, z_text, z_ecg, tau)?;
    let sum = g.tape.add(tx, te)?;
    Ok(g.tape.scale(sum, 0.5))
}
