//! Named parameter storage and the per-forward graph context.
//!
//! Parameters live outside any tape, keyed by canonical dotted paths
//! (`img.blocks.0.attn.wq.w`). Each forward pass binds the ones it touches
//! onto a fresh [`Tape`] as leaves; after backward, gradients are harvested
//! back into the store in binding order. Insertion order is deterministic,
//! which makes checkpoints and optimizer state reproducible byte for byte.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::rng::randn;
use crate::tensor::{Tape, Tensor, TensorError, TensorId, TensorResult};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> TensorResult<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::Param(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
        });
        Ok(())
    }

    /// Inserts a trainable tensor drawn from N(0, std).
    pub fn insert_randn(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| randn(rng) * std).collect();
        self.insert(name, Tensor::new(shape, data)?.with_grad())
    }

    /// Inserts a trainable constant-filled tensor.
    pub fn insert_full(&mut self, name: &str, shape: Vec<usize>, value: f64) -> TensorResult<()> {
        self.insert(name, Tensor::full(shape, value).with_grad())
    }

    /// Inserts non-trainable state (running statistics and the like).
    pub fn insert_state(&mut self, name: &str, shape: Vec<usize>, value: f64) -> TensorResult<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    /// Flips the trainable flag on every parameter whose name satisfies
    /// `pred`. Running statistics (inserted as state) stay non-trainable
    /// only if `pred` excludes them; freezing helpers in the trainer take
    /// care to match weights only.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for e in &mut self.entries {
            if pred(&e.name) {
                e.tensor.requires_grad = trainable;
            }
        }
    }

    /// Trainable parameter elements / total elements.
    pub fn trainable_fraction(&self) -> f64 {
        let mut trainable = 0usize;
        let mut total = 0usize;
        for e in &self.entries {
            total += e.tensor.numel();
            if e.tensor.requires_grad {
                trainable += e.tensor.numel();
            }
        }
        if total == 0 {
            return 0.0;
        }
        trainable as f64 / total as f64
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            if e.tensor.requires_grad {
                e.tensor.zero_grad();
            } else {
                e.tensor.grad = None;
            }
        }
    }

    /// SHA-256 over (name, shape, value bits) of parameters selected by
    /// `pred`; used to prove freeze contracts.
    pub fn digest(&self, pred: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            if !pred(&e.name) {
                continue;
            }
            hasher.update(e.name.as_bytes());
            hasher.update([0u8]);
            for &d in e.tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// One forward pass: a tape plus the store bindings made on it.
pub struct Graph {
    pub tape: Tape,
    bindings: Vec<(usize, TensorId)>,
    cache: Vec<Option<TensorId>>,
    /// Batch statistics produced by train-mode batch norms this pass:
    /// (running_mean index, running_var index, mean, var).
    pub bn_updates: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

impl Graph {
    pub fn new(store: &ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            bindings: Vec::new(),
            cache: vec![None; store.len()],
            bn_updates: Vec::new(),
        }
    }

    /// Binds `name` onto the tape (once per graph; later calls reuse the
    /// same leaf so gradients accumulate correctly).
    pub fn param(&mut self, store: &ParamStore, name: &str) -> TensorResult<TensorId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| TensorError::Param(format!("unknown parameter {name}")))?;
        if let Some(id) = self.cache[idx] {
            return Ok(id);
        }
        let id = self.tape.leaf(store.entry(idx).tensor.clone());
        self.cache[idx] = Some(id);
        self.bindings.push((idx, id));
        Ok(id)
    }

    /// Accumulates tape gradients into `store` entry `grad` buffers
    /// (trainable entries only), in binding order.
    pub fn harvest_into(&self, store: &mut ParamStore) {
        for &(idx, id) in &self.bindings {
            if !store.entry(idx).tensor.requires_grad {
                continue;
            }
            if let Some(g) = self.tape.grad(id) {
                let entry = store.entry_mut(idx);
                entry.tensor.zero_grad();
                let buf = entry.tensor.grad.as_mut().expect("just allocated");
                debug_assert_eq!(buf.len(), g.len());
                for (b, &gv) in buf.iter_mut().zip(g) {
                    *b += gv;
                }
            }
        }
    }

    /// Like [`Graph::harvest_into`] but adds into existing grad buffers
    /// (for gradient accumulation across micro-batches).
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(idx, id) in &self.bindings {
            if !store.entry(idx).tensor.requires_grad {
                continue;
            }
            if let Some(g) = self.tape.grad(id) {
                let entry = store.entry_mut(idx);
                if entry.tensor.grad.is_none() {
                    entry.tensor.zero_grad();
                }
                let buf = entry.tensor.grad.as_mut().expect("just allocated");
                for (b, &gv) in buf.iter_mut().zip(g) {
                    *b += gv;
                }
            }
        }
    }
}

/// Applies train-mode batch statistics to running estimates:
/// `running <- (1-momentum)*running + momentum*batch`.
pub fn apply_bn_updates(store: &mut ParamStore, graph: &Graph, momentum: f64) {
    for (rm_idx, rv_idx, mean, var) in &graph.bn_updates {
        {
            let rm = store.entry_mut(*rm_idx);
            for (r, &m) in rm.tensor.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
        }
        {
            let rv = store.entry_mut(*rv_idx);
            for (r, &v) in rv.tensor.data_mut().iter_mut().zip(var) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
    }
}
