//! Binary checkpoint container.
//!
//! Little-endian layout, version 1:
//!
//! ```text
//! magic "MORE" | u32 version | f64 tau | u32 epoch | [u8;32] config digest
//! u32 n_params
//!   per param: u32 name_len | name bytes | u8 dtype (1 = f64) |
//!              u8 trainable | u32 rank | u32 extents[rank] | f64 data[...]
//! u8 has_optimizer
//!   if 1: u64 step | u32 n_entries
//!     per entry: u32 name_len | name bytes | f64 m[numel] | f64 v[numel]
//! ```
//!
//! save → load → save is byte-identical: entries serialize in store order
//! and optimizer moments in sorted (BTreeMap) order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoders::{ParamEntry, ParamStore};
use crate::objective::TemperatureParam;
use crate::tensor::{Tensor, TensorError, TensorResult};

use super::adamw::AdamState;

const MAGIC: &[u8; 4] = b"MORE";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub tau: f64,
    pub epoch: u32,
    pub config_digest: [u8; 32],
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(
        store: ParamStore,
        epoch: u32,
        config_digest: [u8; 32],
        optimizer: Option<AdamState>,
    ) -> Self {
        let tau = TemperatureParam::tau(&store);
        Checkpoint {
            store,
            tau,
            epoch,
            config_digest,
            optimizer,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> TensorError {
    TensorError::Param(format!("checkpoint io on {}: {e}", path.display()))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> TensorResult<()> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = |bytes: &[u8]| -> TensorResult<()> {
        w.write_all(bytes).map_err(|e| io_err(path, e))
    };
    out(MAGIC)?;
    out(&VERSION.to_le_bytes())?;
    out(&ckpt.tau.to_le_bytes())?;
    out(&ckpt.epoch.to_le_bytes())?;
    out(&ckpt.config_digest)?;
    out(&(ckpt.store.len() as u32).to_le_bytes())?;
    for e in ckpt.store.iter() {
        out(&(e.name.len() as u32).to_le_bytes())?;
        out(e.name.as_bytes())?;
        out(&[DTYPE_F64, u8::from(e.tensor.requires_grad)])?;
        out(&(e.tensor.rank() as u32).to_le_bytes())?;
        for &d in e.tensor.shape() {
            out(&(d as u32).to_le_bytes())?;
        }
        for &v in e.tensor.data() {
            out(&v.to_le_bytes())?;
        }
    }
    match &ckpt.optimizer {
        None => out(&[0u8])?,
        Some(state) => {
            out(&[1u8])?;
            out(&state.step.to_le_bytes())?;
            out(&(state.m.len() as u32).to_le_bytes())?;
            for (name, m) in &state.m {
                let v = state.v.get(name).ok_or_else(|| {
                    TensorError::Param(format!("optimizer state missing v for {name}"))
                })?;
                out(&(name.len() as u32).to_le_bytes())?;
                out(name.as_bytes())?;
                for &x in m {
                    out(&x.to_le_bytes())?;
                }
                for &x in v {
                    out(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> TensorResult<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let fail = |msg: &str| TensorError::Param(format!("checkpoint {}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(fail("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    macro_rules! rd_u32 {
        () => {{
            r.read_exact(&mut u32buf).map_err(|e| io_err(path, e))?;
            u32::from_le_bytes(u32buf)
        }};
    }
    macro_rules! rd_f64 {
        () => {{
            r.read_exact(&mut u64buf).map_err(|e| io_err(path, e))?;
            f64::from_le_bytes(u64buf)
        }};
    }
    let version = rd_u32!();
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let tau = rd_f64!();
    let epoch = rd_u32!();
    let mut config_digest = [0u8; 32];
    r.read_exact(&mut config_digest).map_err(|e| io_err(path, e))?;
    let n_params = rd_u32!() as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let name_len = rd_u32!() as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| io_err(path, e))?;
        let name = String::from_utf8(name).map_err(|_| fail("non-utf8 name"))?;
        let mut tags = [0u8; 2];
        r.read_exact(&mut tags).map_err(|e| io_err(path, e))?;
        if tags[0] != DTYPE_F64 {
            return Err(fail(&format!("unsupported dtype {}", tags[0])));
        }
        let trainable = tags[1] != 0;
        let rank = rd_u32!() as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd_u32!() as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(rd_f64!());
        }
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = trainable;
        store.insert(&name, t)?;
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(|e| io_err(path, e))?;
    let optimizer = if flag[0] == 1 {
        r.read_exact(&mut u64buf).map_err(|e| io_err(path, e))?;
        let step = u64::from_le_bytes(u64buf);
        let n = rd_u32!() as usize;
        let mut state = AdamState {
            step,
            ..AdamState::default()
        };
        for _ in 0..n {
            let name_len = rd_u32!() as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|e| io_err(path, e))?;
            let name = String::from_utf8(name).map_err(|_| fail("non-utf8 name"))?;
            let numel = store
                .get(&name)
                .ok_or_else(|| fail(&format!("optimizer entry {name} has no parameter")))?
                .numel();
            let mut m = Vec::with_capacity(numel);
            for _ in 0..numel {
                m.push(rd_f64!());
            }
            let mut v = Vec::with_capacity(numel);
            for _ in 0..numel {
                v.push(rd_f64!());
            }
            state.m.insert(name.clone(), m);
            state.v.insert(name, v);
        }
        Some(state)
    } else {
        None
    };
    // Trailing bytes would mean a corrupt writer; flag it rather than ignore.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(fail("trailing bytes")),
        Err(e) => return Err(io_err(path, e)),
    }
    let stored_tau = TemperatureParam::tau(&store);
    if (stored_tau - tau).abs() > 1e-9 {
        return Err(fail(&format!(
            "header tau {tau} disagrees with parameter tau {stored_tau}"
        )));
    }
    Ok(Checkpoint {
        store,
        tau,
        epoch,
        config_digest,
        optimizer,
    })
}

/// Convenience for freeze-contract assertions.
pub fn entry_bits(e: &ParamEntry) -> Vec<u64> {
    e.tensor.data().iter().map(|v| v.to_bits()).collect()
}
