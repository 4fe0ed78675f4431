//! Training loops: pre-training with gradient accumulation and early
//! stopping, plus the two fine-tuning regimes (linear probe, partial
//! qkv unfreezing).

mod adamw;
mod checkpoint;

pub use adamw::{adamw_step, scale_grads, AdamHyper, AdamState};
pub use checkpoint::{entry_bits, load_checkpoint, save_checkpoint, Checkpoint};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::DataError;
use crate::encoders::{apply_bn_updates, Graph, ParamStore};
use crate::model::{BatchInput, ModelConfig, MoreModel};
use crate::objective::TemperatureParam;
use crate::pipeline::{augmented_batch, eval_batch, split_by_subject, PreparedDataset, PreparedSample};
use crate::preprocess::AugmentConfig;
use crate::rng::stream;
use crate::tensor::{Mode, TensorError, TensorResult};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Best parameters seen before divergence, for salvage.
        last_good: Box<ParamStore>,
    },
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub accumulation_steps: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub bn_momentum: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.1,
            accumulation_steps: 4,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            val_fraction: 0.1,
            bn_momentum: 0.1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TensorResult<()> {
        if self.accumulation_steps < 1 {
            return Err(TensorError::Param("accumulation_steps must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(TensorError::Param("patience must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TensorError::Param("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stop once no strict improvement over the best value has been seen for
/// `patience` consecutive observations.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    patience: usize,
    best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records one validation value; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn improved(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub tau: f64,
    pub lr: f64,
}

pub struct PretrainOutput {
    /// Model holding the best-validation parameters.
    pub model: MoreModel,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub optimizer: AdamState,
}

/// Forward (and optionally backward) of one already-built micro-batch.
/// Returns the loss and, in training, the graph carrying gradients and
/// batch-norm statistics for the caller to fold into the store.
fn micro_batch_pass(
    model: &MoreModel,
    batch: &BatchInput,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    with_grads: bool,
) -> TrainResult<(f64, Option<Graph>)> {
    let mut g = Graph::new(&model.store);
    let loss_id = model.batch_loss(&mut g, batch, mode, rng)?;
    let loss = g.tape.scalar_value(loss_id);
    if with_grads {
        g.tape.backward(loss_id)?;
        Ok((loss, Some(g)))
    } else {
        Ok((loss, None))
    }
}

/// Mean validation loss in eval mode over fixed-order batches.
fn validation_loss(
    model: &MoreModel,
    ds: &PreparedDataset,
    indices: &[usize],
    batch_size: usize,
) -> TrainResult<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in indices.chunks(batch_size) {
        if chunk.len() < 2 {
            continue; // a single sample has no negatives to contrast against
        }
        let samples: Vec<&PreparedSample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
        let batch = eval_batch((ds.norm_mean, ds.norm_std), &samples)?;
        let mut rng = stream(0, "val-eval", &[]);
        total += micro_batch_pass(model, &batch, Mode::Eval, &mut rng, false)?.0;
        batches += 1;
    }
    if batches == 0 {
        return Ok(f64::NAN);
    }
    Ok(total / batches as f64)
}

/// Full pre-training: seeded shuffling, augmentation, the tri-modal
/// objective, gradient accumulation (averaged across the group), AdamW with
/// temperature clamping, per-epoch validation and early stopping. The best
/// validation checkpoint is retained. A NaN loss aborts with the best
/// parameters salvaged.
pub fn pretrain(
    ds: &PreparedDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> TrainResult<PretrainOutput> {
    cfg.validate()?;
    let mut model = MoreModel::init(model_cfg.clone(), ds.tokenizer.clone())?;
    let (train_idx, val_idx) = split_by_subject(&ds.samples, cfg.val_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(TrainError::Data(DataError::Invalid(
            "no training samples after the validation split".into(),
        )));
    }
    let hp = AdamHyper::new(cfg.lr, cfg.weight_decay);
    let mut opt = AdamState::default();
    let mut stopper = EarlyStop::new(cfg.patience);
    let mut history = Vec::new();
    let mut best_store = model.store.clone();
    let mut best_opt = opt.clone();
    let mut best_epoch = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order = train_idx.clone();
        {
            use rand::seq::SliceRandom;
            let mut rng = stream(cfg.seed, "epoch-shuffle", &[epoch as u64]);
            order.shuffle(&mut rng);
        }
        let micro_batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut epoch_loss = 0.0;
        let mut n_micro = 0usize;
        for (group_idx, group) in micro_batches.chunks(cfg.accumulation_steps).enumerate() {
            model.store.zero_grads();
            let mut group_members = 0usize;
            for (i_in_group, chunk) in group.iter().enumerate() {
                if chunk.len() < 2 {
                    continue;
                }
                let batch = augmented_batch(ds, chunk, &cfg.augment, epoch, cfg.seed)?;
                let mut rng = stream(
                    cfg.seed,
                    "dropkey",
                    &[epoch as u64, group_idx as u64, i_in_group as u64],
                );
                let (loss, graph) =
                    micro_batch_pass(&model, &batch, Mode::Train, &mut rng, true)?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        reason: format!("micro-batch loss = {loss}"),
                        last_good: Box::new(best_store),
                    });
                }
                let graph = graph.expect("training pass returns its graph");
                graph.accumulate_into(&mut model.store);
                apply_bn_updates(&mut model.store, &graph, cfg.bn_momentum);
                epoch_loss += loss;
                n_micro += 1;
                group_members += 1;
            }
            if group_members == 0 {
                continue;
            }
            // Average the per-micro-batch (already mean-reduced) gradients.
            scale_grads(&mut model.store, 1.0 / group_members as f64);
            if let Err(e) = adamw_step(&mut model.store, &mut opt, &hp) {
                return Err(TrainError::Diverged {
                    epoch,
                    reason: e.to_string(),
                    last_good: Box::new(best_store),
                });
            }
            TemperatureParam::clamp(&mut model.store);
        }
        let train_loss = if n_micro > 0 {
            epoch_loss / n_micro as f64
        } else {
            f64::NAN
        };
        let val = validation_loss(&model, ds, &val_idx, cfg.batch_size)?;
        let stopping_metric = if val.is_nan() { train_loss } else { val };
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss: val,
            tau: model.tau(),
            lr: cfg.lr,
        });
        let stop = stopper.observe(epoch, stopping_metric);
        if stopper.improved(epoch) {
            best_store = model.store.clone();
            best_opt = opt.clone();
            best_epoch = epoch;
        }
        if stop {
            break;
        }
    }
    model.store = best_store;
    Ok(PretrainOutput {
        model,
        history,
        best_epoch,
        optimizer: best_opt,
    })
}

// ---- fine-tuning -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    /// Train only the classifier head and the modality's projector.
    LinearProbe,
    /// Additionally unfreeze q/k/v weights of the last `k` trunk layers.
    LastKQkv { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    /// Independent sigmoid per label, binary cross-entropy.
    MultiLabel,
    /// Softmax over classes, cross-entropy (severity grading).
    MultiClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneModality {
    Xray,
    Ecg,
}

impl FinetuneModality {
    pub fn prefix(self) -> &'static str {
        match self {
            FinetuneModality::Xray => crate::model::IMG,
            FinetuneModality::Ecg => crate::model::ECG,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub kind: ClassifierKind,
    pub modality: FinetuneModality,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::LinearProbe,
            kind: ClassifierKind::MultiLabel,
            modality: FinetuneModality::Xray,
            lr: 1e-3,
            weight_decay: 0.02,
            batch_size: 32,
            accumulation_steps: 4,
            max_epochs: 30,
            patience: 10,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Marks exactly the fine-tuning parameter set trainable: classifier head,
/// the modality's projector weights, and for `LastKQkv` the q/k/v weights of
/// the last `k` trunk layers. Everything else (including all BN running
/// statistics) is frozen.
pub fn apply_finetune_freeze(
    store: &mut ParamStore,
    modality: FinetuneModality,
    mode: FinetuneMode,
    depth: usize,
) {
    store.set_trainable_where(|_| true, false);
    let proj_prefix = format!("proj.{}.", modality.prefix());
    store.set_trainable_where(
        |n| {
            (n.starts_with(&proj_prefix) && !n.contains("running_"))
                || n == HEAD_W
                || n == HEAD_B
        },
        true,
    );
    if let FinetuneMode::LastKQkv { k } = mode {
        let lo = depth.saturating_sub(k);
        let enc = modality.prefix();
        store.set_trainable_where(
            |n| {
                (lo..depth).any(|l| {
                    ["wq", "wk", "wv"].iter().any(|p| {
                        n == format!("{enc}.blocks.{l}.attn.{p}.w")
                    })
                })
            },
            true,
        );
    }
}

/// Classifier logits for one modality batch: eval-mode encoder (weights and
/// BN statistics stay fixed), train-mode projector, linear head.
fn head_logits(
    model: &MoreModel,
    g: &mut Graph,
    batch: &BatchInput,
    modality: FinetuneModality,
    proj_mode: Mode,
    rng: &mut ChaCha8Rng,
) -> TensorResult<crate::tensor::TensorId> {
    let cls = match modality {
        FinetuneModality::Xray => model.encode_images(g, &batch.images, Mode::Eval, rng)?.cls,
        FinetuneModality::Ecg => model.encode_ecgs(g, &batch.ecgs, Mode::Eval, rng)?.cls,
    };
    let z = model.project_cls(g, modality.prefix(), cls, proj_mode)?;
    let w = g.param(&model.store, HEAD_W)?;
    let b = g.param(&model.store, HEAD_B)?;
    let logits = g.tape.matmul(z, w)?;
    g.tape.add_bias(logits, b)
}

fn batch_targets(
    samples: &[&PreparedSample],
    class_names: &[String],
    kind: ClassifierKind,
) -> TensorResult<(Vec<f64>, Vec<usize>)> {
    let c = class_names.len();
    let mut multi = Vec::with_capacity(samples.len() * c);
    let mut classes = Vec::with_capacity(samples.len());
    for s in samples {
        for name in class_names {
            // Uncertain (-1) labels count as absent for training targets.
            let v = s.label.get(name).unwrap_or(0);
            multi.push(if v == 1 { 1.0 } else { 0.0 });
        }
        if matches!(kind, ClassifierKind::MultiClass) {
            let cid = s.class_id.ok_or_else(|| {
                TensorError::Param("multi-class fine-tuning needs a primary class per sample".into())
            })?;
            classes.push(cid);
        }
    }
    Ok((multi, classes))
}

pub struct FinetuneOutput {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Fine-tunes a pre-trained model in place on labeled samples.
pub fn finetune(
    model: &mut MoreModel,
    ds: &PreparedDataset,
    cfg: &FinetuneConfig,
) -> TrainResult<FinetuneOutput> {
    let c = ds.class_names.len();
    if c == 0 {
        return Err(TrainError::Data(DataError::Invalid(
            "fine-tuning needs labeled samples".into(),
        )));
    }
    if model.store.index_of(HEAD_W).is_none() {
        let mut rng = stream(cfg.seed, "head-init", &[]);
        let out_dim = model.cfg.proj.out_dim;
        model
            .store
            .insert_randn(HEAD_W, vec![out_dim, c], 0.02, &mut rng)?;
        model.store.insert_full(HEAD_B, vec![c], 0.0)?;
    }
    apply_finetune_freeze(&mut model.store, cfg.modality, cfg.mode, model.cfg.vit.depth);

    let (train_idx, val_idx) = split_by_subject(&ds.samples, 0.1, cfg.seed);
    let hp = AdamHyper::new(cfg.lr, cfg.weight_decay);
    let mut opt = AdamState::default();
    let mut stopper = EarlyStop::new(cfg.patience);
    let mut history = Vec::new();
    let mut best_store = model.store.clone();
    let mut best_epoch = 0usize;

    let eval_pass = |model: &MoreModel, idxs: &[usize]| -> TrainResult<f64> {
        if idxs.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        let mut n = 0usize;
        for chunk in idxs.chunks(cfg.batch_size) {
            let samples: Vec<&PreparedSample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let batch = eval_batch((ds.norm_mean, ds.norm_std), &samples)?;
            let mut g = Graph::new(&model.store);
            let mut rng = stream(0, "ft-eval", &[]);
            let logits = head_logits(model, &mut g, &batch, cfg.modality, Mode::Eval, &mut rng)?;
            let (multi, classes) = batch_targets(&samples, &ds.class_names, cfg.kind)?;
            let loss_id = match cfg.kind {
                ClassifierKind::MultiLabel => g.tape.bce_with_logits(logits, &multi)?,
                ClassifierKind::MultiClass => g.tape.softmax_cross_entropy(logits, &classes)?,
            };
            total += g.tape.scalar_value(loss_id);
            n += 1;
        }
        Ok(total / n as f64)
    };

    for epoch in 1..=cfg.max_epochs {
        let mut order = train_idx.clone();
        {
            use rand::seq::SliceRandom;
            let mut rng = stream(cfg.seed, "ft-shuffle", &[epoch as u64]);
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut n_micro = 0usize;
        let micro_batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (group_idx, group) in micro_batches.chunks(cfg.accumulation_steps).enumerate() {
            model.store.zero_grads();
            let mut members = 0usize;
            for (i, chunk) in group.iter().enumerate() {
                let batch = augmented_batch(ds, chunk, &cfg.augment, epoch, cfg.seed)?;
                let samples: Vec<&PreparedSample> =
                    chunk.iter().map(|&i| &ds.samples[i]).collect();
                let mut g = Graph::new(&model.store);
                let mut rng = stream(cfg.seed, "ft-step", &[epoch as u64, group_idx as u64, i as u64]);
                let logits =
                    head_logits(model, &mut g, &batch, cfg.modality, Mode::Train, &mut rng)?;
                let (multi, classes) = batch_targets(&samples, &ds.class_names, cfg.kind)?;
                let loss_id = match cfg.kind {
                    ClassifierKind::MultiLabel => g.tape.bce_with_logits(logits, &multi)?,
                    ClassifierKind::MultiClass => g.tape.softmax_cross_entropy(logits, &classes)?,
                };
                let loss = g.tape.scalar_value(loss_id);
                if !loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        reason: format!("fine-tune loss = {loss}"),
                        last_good: Box::new(best_store),
                    });
                }
                g.tape.backward(loss_id)?;
                g.accumulate_into(&mut model.store);
                apply_bn_updates(&mut model.store, &g, 0.1);
                epoch_loss += loss;
                n_micro += 1;
                members += 1;
            }
            if members == 0 {
                continue;
            }
            scale_grads(&mut model.store, 1.0 / members as f64);
            adamw_step(&mut model.store, &mut opt, &hp)?;
        }
        let train_loss = epoch_loss / n_micro.max(1) as f64;
        let val = eval_pass(model, &val_idx)?;
        let metric = if val.is_nan() { train_loss } else { val };
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss: val,
            tau: model.tau(),
            lr: cfg.lr,
        });
        let stop = stopper.observe(epoch, metric);
        if stopper.improved(epoch) {
            best_store = model.store.clone();
            best_epoch = epoch;
        }
        if stop {
            break;
        }
    }
    model.store = best_store;
    Ok(FinetuneOutput {
        history,
        best_epoch,
    })
}

/// Per-class scores from the classifier head for evaluation: sigmoid for
/// multi-label heads, softmax for multi-class.
pub fn classifier_scores(
    model: &MoreModel,
    samples: &[&PreparedSample],
    stats: (f64, f64),
    modality: FinetuneModality,
    kind: ClassifierKind,
) -> TrainResult<Vec<Vec<f64>>> {
    let batch = eval_batch(stats, samples)?;
    let mut g = Graph::new(&model.store);
    let mut rng = stream(0, "score", &[]);
    let logits = head_logits(model, &mut g, &batch, modality, Mode::Eval, &mut rng)?;
    let scored = match kind {
        ClassifierKind::MultiLabel => g.tape.sigmoid(logits),
        ClassifierKind::MultiClass => g.tape.softmax(logits, 1)?,
    };
    let t = g.tape.value(scored);
    let c = t.shape()[1];
    Ok((0..t.shape()[0])
        .map(|i| (0..c).map(|j| t.at(i, j)).collect())
        .collect())
}
