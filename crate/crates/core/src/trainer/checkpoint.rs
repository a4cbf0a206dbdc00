//! Binary checkpoint format.
//!
//! ```text
//! "PHDS" | version u32 | meta_len u64 | meta (UTF-8 JSON)
//! repeated: name_len u32 | name | dtype u8 | rank u32 | dims u64 × rank | payload
//! ```
//!
//! All integers and payloads are little-endian. dtype 0 is f32 and 1 is f64;
//! load-balance accumulators are always stored as f64.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LoadBalanceStats, Model, ModelConfig, ModelError};
use crate::schedule::SparsitySchedule;
use crate::tensor::{DType, Scalar, Tensor};

use super::KMetrics;

pub const MAGIC: &[u8; 4] = b"PHDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint format error in {record}: {msg}")]
    Format { record: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn format_err<T>(record: impl Into<String>, msg: impl Into<String>) -> Result<T, CheckpointError> {
    Err(CheckpointError::Format {
        record: record.into(),
        msg: msg.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub step: u64,
    pub schedule: Option<SparsitySchedule>,
    pub rng: RngState,
    pub regime: Option<String>,
    #[serde(default)]
    pub metrics: BTreeMap<usize, KMetrics>,
    /// Banked `k` values, ascending.
    pub aux_ks: Vec<usize>,
}

impl CheckpointMeta {
    pub fn new<T: Scalar>(model: &Model<T>, step: u64, seed: u64) -> Self {
        Self {
            config: model.config.clone(),
            step,
            schedule: None,
            rng: RngState { seed, step },
            regime: None,
            metrics: BTreeMap::new(),
            aux_ks: model.aux.ks().collect(),
        }
    }
}

fn lb_names(k: usize) -> [String; 3] {
    [
        format!("aux.k{k}.lb.f_sum"),
        format!("aux.k{k}.lb.p_sum"),
        format!("aux.k{k}.lb.batches"),
    ]
}

fn put_record(
    out: &mut Vec<u8>,
    name: &str,
    dtype: DType,
    shape: &[usize],
    payload: impl Iterator<Item = [u8; 8]>,
) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype as u8);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    for b in payload {
        out.extend_from_slice(&b[..width]);
    }
}

fn scalar_bytes<T: Scalar>(v: T) -> [u8; 8] {
    let mut b = [0u8; 8];
    match T::DTYPE {
        DType::F32 => b[..4].copy_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        DType::F64 => b.copy_from_slice(&v.as_f64().to_le_bytes()),
    }
    b
}

/// Serializes `model` and `meta` to bytes.
pub fn encode<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    model.visit(|name, t| {
        put_record(
            &mut out,
            name,
            T::DTYPE,
            t.shape(),
            t.data().iter().map(|&v| scalar_bytes(v)),
        );
    });
    for (k, entry) in model.aux.iter() {
        let lb = &entry.lb;
        let [f, p, n] = lb_names(k);
        let shape = [lb.n_layers, lb.n_experts];
        put_record(
            &mut out,
            &f,
            DType::F64,
            &shape,
            lb.f_sum.iter().map(|v| v.to_le_bytes()),
        );
        put_record(
            &mut out,
            &p,
            DType::F64,
            &shape,
            lb.p_sum.iter().map(|v| v.to_le_bytes()),
        );
        put_record(
            &mut out,
            &n,
            DType::F64,
            &[1],
            std::iter::once((lb.batches as f64).to_le_bytes()),
        );
    }
    out
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = encode(model, meta);
    let file = path.file_name().ok_or_else(|| {
        io::Error::new(
            io::ErrorKind::InvalidInput,
            "checkpoint path has no file name",
        )
    })?;
    let tmp = path.with_file_name(format!(".{}.tmp", file.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, record: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return format_err(
                record,
                format!("truncated: need {n} bytes at offset {}", self.pos),
            );
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, record: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, record)?.try_into().unwrap(),
        ))
    }

    fn u64(&mut self, record: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, record)?.try_into().unwrap(),
        ))
    }
}

struct RawRecord {
    dtype: DType,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Parses bytes into a model and its metadata. Nothing is returned unless
/// every record is present, well-formed and consumed.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, CheckpointMeta), CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "header")? != MAGIC {
        return format_err("header", "bad magic bytes");
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return format_err("header", format!("unsupported version {version}"));
    }
    let meta_len = r.u64("metadata")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .or_else(|e| format_err("metadata", e.to_string()))?;
    meta.config
        .validate()
        .or_else(|e| format_err("metadata", e.to_string()))?;

    let mut records: BTreeMap<String, RawRecord> = BTreeMap::new();
    while r.pos < bytes.len() {
        let at = format!("record at offset {}", r.pos);
        let name_len = r.u32(&at)? as usize;
        let name = String::from_utf8(r.take(name_len, &at)?.to_vec())
            .or_else(|_| format_err(&at, "name is not UTF-8"))?;
        let dtype = match r.take(1, &name)?[0] {
            0 => DType::F32,
            1 => DType::F64,
            c => return format_err(&name, format!("unknown dtype code {c}")),
        };
        let rank = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&name)? as usize);
        }
        let n: usize = shape.iter().product();
        let width = if dtype == DType::F32 { 4 } else { 8 };
        let payload = r.take(n.checked_mul(width).unwrap_or(usize::MAX), &name)?;
        let values = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        if records
            .insert(
                name.clone(),
                RawRecord {
                    dtype,
                    shape,
                    values,
                },
            )
            .is_some()
        {
            return format_err(&name, "duplicate record");
        }
    }

    let mut model = Model::<T>::zeros(meta.config.clone(), meta.aux_ks.iter().copied())?;
    let mut failure: Option<CheckpointError> = None;
    model.visit_mut(|name, t| {
        if failure.is_some() {
            return;
        }
        let Some(rec) = records.remove(name) else {
            failure = Some(CheckpointError::Format {
                record: name.into(),
                msg: "missing".into(),
            });
            return;
        };
        if rec.dtype != T::DTYPE || rec.shape != t.shape() {
            failure = Some(CheckpointError::Format {
                record: name.into(),
                msg: format!(
                    "expected {:?} {:?}, found {:?} {:?}",
                    T::DTYPE,
                    t.shape(),
                    rec.dtype,
                    rec.shape
                ),
            });
            return;
        }
        *t = Tensor::from_f64(rec.shape, &rec.values).expect("shape checked");
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let ks: Vec<usize> = model.aux.ks().collect();
    for k in ks {
        let entry = model.aux.get_mut(k)?;
        let (l, e) = (entry.lb.n_layers, entry.lb.n_experts);
        let [f, p, n] = lb_names(k);
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>, CheckpointError> {
            match records.remove(name) {
                Some(rec) if rec.dtype == DType::F64 && rec.shape == shape => Ok(rec.values),
                Some(_) => format_err(name, format!("expected f64 {shape:?}")),
                None => format_err(name, "missing"),
            }
        };
        let f_sum = take(&f, &[l, e])?;
        let p_sum = take(&p, &[l, e])?;
        let batches = take(&n, &[1])?[0];
        if batches < 0.0 || batches.fract() != 0.0 {
            return format_err(&n, "batch count is not a non-negative integer");
        }
        entry.lb = LoadBalanceStats {
            n_layers: l,
            n_experts: e,
            f_sum,
            p_sum,
            batches: batches as u64,
        };
    }
    if let Some(name) = records.keys().next() {
        return format_err(name.as_str(), "unexpected record");
    }
    Ok((model, meta))
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(Model<T>, CheckpointMeta), CheckpointError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        let mut cfg = ModelConfig::toy(2);
        cfg.n_layers = 1;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_expert = 4;
        cfg.context_len = 8;
        Model::init(cfg, 5).unwrap()
    }

    #[test]
    fn encode_decode_encode_is_stable() {
        let mut m = tiny();
        m.aux
            .get_mut(1)
            .unwrap()
            .lb
            .record(&[(vec![0.125; 8], vec![0.1; 8])]);
        let meta = CheckpointMeta::new(&m, 7, 3);
        let a = encode(&m, &meta);
        let (m2, meta2) = decode::<f32>(&a).unwrap();
        assert_eq!(m, m2);
        assert_eq!(meta, meta2);
        assert_eq!(a, encode(&m2, &meta2));
    }

    #[test]
    fn corrupt_inputs_name_the_record() {
        let m = tiny();
        let bytes = encode(&m, &CheckpointMeta::new(&m, 0, 0));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(
            matches!(decode::<f32>(&bad), Err(CheckpointError::Format { record, .. }) if record == "header")
        );
        let cut = &bytes[..bytes.len() - 3];
        match decode::<f32>(cut) {
            Err(CheckpointError::Format { record, .. }) => assert_eq!(record, "aux.k2.lb.batches"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(decode::<f64>(&bytes).is_err());
    }
}
