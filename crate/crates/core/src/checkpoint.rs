//! Binary checkpoint files.
//!
//! Layout (little-endian): `"TAGN"`, `u32` version, `u32` tensor count, then
//! per tensor `u32` name length, UTF-8 name, `u64` rows, `u64` cols and
//! row-major `f64` data, then the rng state as a 32-byte key, `u64` stream
//! and `u128` word position.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Result};
use crate::losses::{LossHead, LossKind};
use crate::numeric::{Matrix, Rng, RngState, Vector};
use crate::sparse::Dictionary;
use crate::tagnet::TagNetParams;
use crate::trainer::{BatchGraph, EvalRecord, Heads, Progress, TrainConfig, TrainHistory, Trainer};

pub const MAGIC: [u8; 4] = *b"TAGN";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors plus an rng state, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<(String, Matrix)>,
    pub rng: RngState,
}

impl TensorFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng.key);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32("tensor name")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_owned();
            let rows = r.u64("tensor shape")? as usize;
            let cols = r.u64("tensor shape")? as usize;
            let size = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| {
                    CheckpointError::Malformed(format!("tensor '{name}' is too large"))
                })?;
            let data = r.take(size, "tensor data")?;
            let values = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = Matrix::from_shape_vec((rows, cols), values).expect("shape matches length");
            tensors.push((name, m));
        }
        let key: [u8; 32] = r.take(32, "rng state")?.try_into().unwrap();
        let stream = r.u64("rng state")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng state")?.try_into().unwrap());
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(TensorFile {
            tensors,
            rng: RngState {
                key,
                stream,
                word_pos,
            },
        })
    }

    /// Writes via a temporary sibling file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::decode(&bytes)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(
        &mut self,
        n: usize,
        what: &'static str,
    ) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(what)),
        }
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

// Integers ride in f64 slots by bit pattern so that every u64 survives.
fn int(v: u64) -> f64 {
    f64::from_bits(v)
}

fn uint(v: f64) -> u64 {
    v.to_bits()
}

fn row(values: Vec<f64>) -> Matrix {
    let n = values.len();
    Matrix::from_shape_vec((1, n), values).unwrap()
}

fn kind_code(kind: LossKind) -> u64 {
    match kind {
        LossKind::Eml => 0,
        LossKind::Mml => 1,
    }
}

fn kind_from(code: u64) -> std::result::Result<LossKind, CheckpointError> {
    match code {
        0 => Ok(LossKind::Eml),
        1 => Ok(LossKind::Mml),
        c => Err(CheckpointError::Malformed(format!("unknown loss kind {c}"))),
    }
}

/// A complete, resumable training snapshot.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: TagNetParams,
    pub heads: Heads,
    pub config: TrainConfig,
    pub progress: Progress,
    pub history: TrainHistory,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn of(t: &Trainer) -> Self {
        Checkpoint {
            params: t.params.clone(),
            heads: t.heads.clone(),
            config: t.config.clone(),
            progress: t.progress.clone(),
            history: t.history.clone(),
            rng: t.rng.state(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer {
            params: self.params,
            heads: self.heads,
            config: self.config,
            progress: self.progress,
            history: self.history,
            rng: Rng::from_state(self.rng),
        }
    }

    fn to_file(&self) -> TensorFile {
        let mut t: Vec<(String, Matrix)> = Vec::new();
        let p = &self.params;
        t.push(("net/W".into(), p.w.clone()));
        t.push(("net/S".into(), p.s.clone()));
        t.push(("net/log_theta".into(), row(p.log_theta().to_vec())));
        t.push((
            "net/meta".into(),
            row(vec![int(p.stages as u64), p.alpha, p.lipschitz]),
        ));
        let mut head = |name: String, h: &LossHead| {
            t.push((format!("head/{name}/omega"), h.weights.clone()));
            t.push((
                format!("head/{name}/meta"),
                row(vec![int(kind_code(h.kind)), h.reg]),
            ));
        };
        head("overall".into(), &self.heads.overall);
        for (k, h) in self.heads.aux.iter().enumerate() {
            if let Some(h) = h {
                head(format!("aux{k}"), h);
            }
        }
        let c = &self.config;
        t.push((
            "config".into(),
            row(vec![
                c.learning_rate,
                c.momentum,
                int(c.batch_size as u64),
                int(c.epochs as u64),
                int(c.seed),
                int(c.eval_every as u64),
                int(self.heads.aux.len() as u64),
                int(match c.batch_graph {
                    BatchGraph::Submatrix => 0,
                    BatchGraph::Rescaled => 1,
                }),
            ]),
        ));
        t.push(("config/aux_weights".into(), row(c.aux_weights.clone())));
        let pr = &self.progress;
        t.push((
            "progress".into(),
            row(vec![
                int(pr.iteration),
                int(pr.epochs_done),
                int(pr.cursor as u64),
            ]),
        ));
        t.push((
            "progress/order".into(),
            row(pr.order.iter().map(|&i| int(i as u64)).collect()),
        ));
        let aux = self.heads.aux.len();
        let mut hist = Matrix::zeros((self.history.records.len(), 4 + aux + 2));
        for (i, r) in self.history.records.iter().enumerate() {
            let mut vals = vec![int(r.iteration), r.total_loss];
            vals.extend(&r.aux_losses);
            for v in [r.accuracy, r.nmi] {
                vals.push(int(v.is_some() as u64));
                vals.push(v.unwrap_or(0.0));
            }
            hist.row_mut(i).assign(&ndarray::Array1::from(vals));
        }
        t.push(("history".into(), hist));
        TensorFile {
            tensors: t,
            rng: self.rng,
        }
    }

    fn from_file(file: TensorFile) -> std::result::Result<Self, CheckpointError> {
        let mut map: BTreeMap<String, Matrix> = file.tensors.into_iter().collect();
        let mut get = |name: &str| {
            map.remove(name)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor '{name}'")))
        };
        let flat = |m: Matrix, len: Option<usize>, name: &str| {
            let v = m.into_raw_vec_and_offset().0;
            match len {
                Some(l) if v.len() != l => Err(CheckpointError::Malformed(format!(
                    "tensor '{name}' has {} values, expected {l}",
                    v.len()
                ))),
                _ => Ok(v),
            }
        };
        let bad = |e: crate::error::Error| CheckpointError::Malformed(e.to_string());

        let w = get("net/W")?;
        let s = get("net/S")?;
        let log_theta = Vector::from(flat(get("net/log_theta")?, None, "net/log_theta")?);
        let meta = flat(get("net/meta")?, Some(3), "net/meta")?;
        let params =
            TagNetParams::from_log_theta(w, s, log_theta, uint(meta[0]) as usize, meta[1], meta[2])
                .map_err(bad)?;

        let config_v = flat(get("config")?, Some(8), "config")?;
        let aux_weights = flat(get("config/aux_weights")?, None, "config/aux_weights")?;
        let config = TrainConfig {
            learning_rate: config_v[0],
            momentum: config_v[1],
            batch_size: uint(config_v[2]) as usize,
            epochs: uint(config_v[3]) as usize,
            seed: uint(config_v[4]),
            eval_every: uint(config_v[5]) as usize,
            aux_weights,
            batch_graph: match uint(config_v[7]) {
                0 => BatchGraph::Submatrix,
                1 => BatchGraph::Rescaled,
                c => {
                    return Err(CheckpointError::Malformed(format!(
                        "unknown batch graph mode {c}"
                    )))
                }
            },
        };
        let aux_slots = uint(config_v[6]) as usize;

        let mut read_head = |name: &str| -> std::result::Result<Option<LossHead>, CheckpointError> {
            let Some(omega) = map.remove(&format!("head/{name}/omega")) else {
                return Ok(None);
            };
            let m = map.remove(&format!("head/{name}/meta")).ok_or_else(|| {
                CheckpointError::Malformed(format!("missing meta for head '{name}'"))
            })?;
            let m = m.into_raw_vec_and_offset().0;
            if m.len() != 2 {
                return Err(CheckpointError::Malformed(format!(
                    "bad meta for head '{name}'"
                )));
            }
            Ok(Some(
                LossHead::new(omega, kind_from(uint(m[0]))?, m[1]).map_err(bad)?,
            ))
        };
        let overall = read_head("overall")?
            .ok_or_else(|| CheckpointError::Malformed("missing overall head".into()))?;
        let mut aux = Vec::with_capacity(aux_slots);
        for k in 0..aux_slots {
            aux.push(read_head(&format!("aux{k}"))?);
        }

        let mut get = |name: &str| {
            map.remove(name)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor '{name}'")))
        };
        let pr = flat(get("progress")?, Some(3), "progress")?;
        let order = flat(get("progress/order")?, None, "progress/order")?
            .into_iter()
            .map(|v| uint(v) as usize)
            .collect();
        let progress = Progress {
            iteration: uint(pr[0]),
            epochs_done: uint(pr[1]),
            cursor: uint(pr[2]) as usize,
            order,
        };

        let hist = get("history")?;
        if hist.nrows() > 0 && hist.ncols() != 6 + aux_slots {
            return Err(CheckpointError::Malformed(
                "history has the wrong width".into(),
            ));
        }
        let records = hist
            .rows()
            .into_iter()
            .map(|r| {
                let opt = |flag: f64, v: f64| (uint(flag) == 1).then_some(v);
                let a = 2 + aux_slots;
                EvalRecord {
                    iteration: uint(r[0]),
                    total_loss: r[1],
                    aux_losses: r.iter().skip(2).take(aux_slots).copied().collect(),
                    accuracy: opt(r[a], r[a + 1]),
                    nmi: opt(r[a + 2], r[a + 3]),
                }
            })
            .collect();
        if let Some(name) = map.keys().next() {
            return Err(CheckpointError::Malformed(format!(
                "unexpected tensor '{name}'"
            )));
        }
        Ok(Checkpoint {
            params,
            heads: Heads { overall, aux },
            config,
            progress,
            history: TrainHistory { records },
            rng: file.rng,
        })
    }
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    cp.to_file().save(path)
}

/// The bytes [`save_checkpoint`] would write.
pub fn encode_checkpoint(cp: &Checkpoint) -> Vec<u8> {
    cp.to_file().encode()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::from_file(TensorFile::load(path)?)?)
}

fn dictionary_file(dict: &Dictionary, rng: &Rng) -> TensorFile {
    TensorFile {
        tensors: vec![("dict/D".into(), dict.atoms().clone())],
        rng: rng.state(),
    }
}

/// Stores a dictionary as the single tensor `dict/D`.
pub fn save_dictionary(path: &Path, dict: &Dictionary, rng: &Rng) -> Result<()> {
    dictionary_file(dict, rng).save(path)
}

pub fn encode_dictionary(dict: &Dictionary, rng: &Rng) -> Vec<u8> {
    dictionary_file(dict, rng).encode()
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    let file = TensorFile::load(path)?;
    let d = file
        .tensors
        .into_iter()
        .find(|(n, _)| n == "dict/D")
        .ok_or_else(|| CheckpointError::Malformed("missing tensor 'dict/D'".into()))?
        .1;
    Dictionary::new(d)
}
