//! Binary checkpoint: `HYTB`, u32 LE version, u32 LE header length, a JSON
//! header, then every tensor as raw little-endian f64.

use std::io::Write;
use std::path::Path;

use hytrel_numerics::{Matrix, ParamStore};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{OptState, TrainConfig};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::objectives::ObjectiveSettings;
use crate::rng::Rng;
use crate::table_io::VocabRecord;

pub const MAGIC: &[u8; 4] = b"HYTB";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;

/// Position of the trainer's step-seed stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng, seed: u64) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub objective: ObjectiveSettings,
    pub vocab: Vec<VocabRecord>,
    pub params: ParamStore,
    pub opt: OptState,
    pub rng: RngState,
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    objective: ObjectiveSettings,
    vocab: Vec<VocabRecord>,
    counters: Counters,
    rng: RngHeader,
    optimizer_step: u64,
    tensors: Vec<TensorHeader>,
    data_len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Counters {
    step: u64,
    epoch: u64,
    batch_in_epoch: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngHeader {
    seed: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize, PartialEq, Eq, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    role: Role,
    rows: usize,
    cols: usize,
    decay: bool,
    /// Byte offset into the data section.
    offset: u64,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let entries = ckpt.params.entries();
    if ckpt.opt.m.len() != entries.len() || ckpt.opt.v.len() != entries.len() {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    for (role, mats) in [
        (Role::Param, entries.iter().map(|e| &e.value).collect::<Vec<_>>()),
        (Role::AdamM, ckpt.opt.m.iter().collect()),
        (Role::AdamV, ckpt.opt.v.iter().collect()),
    ] {
        for (e, m) in entries.iter().zip(mats) {
            tensors.push(TensorHeader {
                name: e.name.clone(),
                role,
                rows: m.rows(),
                cols: m.cols(),
                decay: e.decay,
                offset: data.len() as u64,
            });
            for v in m.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        objective: ckpt.objective.clone(),
        vocab: ckpt.vocab.clone(),
        counters: Counters {
            step: ckpt.step,
            epoch: ckpt.epoch,
            batch_in_epoch: ckpt.batch_in_epoch,
        },
        rng: RngHeader {
            seed: ckpt.rng.seed,
            word_pos: ckpt.rng.word_pos.to_string(),
        },
        optimizer_step: ckpt.opt.step,
        tensors,
        data_len: data.len() as u64,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |offset: usize, reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < PREAMBLE {
        return Err(fail(bytes.len(), "file shorter than the preamble".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let data_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail(8, format!("header length {header_len} exceeds the file")))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])
        .map_err(|e| fail(PREAMBLE, format!("header: {e}")))?;
    let data = &bytes[data_start..];
    if data.len() as u64 != header.data_len {
        return Err(fail(
            data_start,
            format!("data section has {} bytes, header says {}", data.len(), header.data_len),
        ));
    }
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| fail(PREAMBLE, "bad rng position".into()))?;

    let read = |t: &TensorHeader| -> Result<Matrix<f64>> {
        let len = t
            .rows
            .checked_mul(t.cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| fail(data_start, format!("tensor {} too large", t.name)))?;
        let start = t.offset as usize;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| fail(data_start + start, format!("tensor {} runs past the data", t.name)))?;
        let vals = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Matrix::from_vec(t.rows, t.cols, vals))
    };

    let count = header.tensors.len() / 3;
    if header.tensors.len() != 3 * count {
        return Err(fail(PREAMBLE, "tensor table is not param/m/v triples".into()));
    }
    let mut params = ParamStore::new();
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for (k, t) in header.tensors.iter().enumerate() {
        let (role, idx) = match k / count {
            0 => (Role::Param, k),
            1 => (Role::AdamM, k - count),
            _ => (Role::AdamV, k - 2 * count),
        };
        let base = &header.tensors[idx];
        if t.role != role || t.name != base.name || (t.rows, t.cols) != (base.rows, base.cols) {
            return Err(fail(PREAMBLE, format!("tensor table entry {k} ({}) out of place", t.name)));
        }
        let mat = read(t)?;
        match role {
            Role::Param => {
                if params.index_of(&t.name).is_some() {
                    return Err(fail(PREAMBLE, format!("duplicate tensor {}", t.name)));
                }
                params.push(t.name.clone(), mat, t.decay);
            }
            Role::AdamM => m.push(mat),
            Role::AdamV => v.push(mat),
        }
    }
    Ok(Checkpoint {
        version,
        model: header.model,
        train: header.train,
        objective: header.objective,
        vocab: header.vocab,
        params,
        opt: OptState {
            step: header.optimizer_step,
            m,
            v,
        },
        rng: RngState {
            seed: header.rng.seed,
            word_pos,
        },
        step: header.counters.step,
        epoch: header.counters.epoch,
        batch_in_epoch: header.counters.batch_in_epoch,
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
