//! Self-describing checkpoint container.
//!
//! ```text
//! b"WMAGECKP" | u32 LE format version | u64 LE header length | JSON header | payload
//! ```
//! The JSON header lists every tensor (parameters, batch-norm buffers and
//! optimizer moments) with its shape and element offset into the payload,
//! which is a flat run of little-endian `f64`s.

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::tensor::ParamStore;
use super::NnError;

pub const MAGIC: &[u8; 8] = b"WMAGECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    RunningMean,
    RunningVar,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    #[serde(default)]
    weight_decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
    optimizer: Option<OptimizerHeader>,
}

pub fn save(store: &ParamStore, optimizer: Option<&Adam>, meta: serde_json::Value) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let mut push = |name: &str, kind: Kind, shape: Vec<usize>, data: &[f64]| {
        entries.push(Entry {
            name: name.to_string(),
            kind,
            shape,
            offset: payload.len(),
        });
        payload.extend_from_slice(data);
    };
    for p in store.params() {
        push(
            &p.name,
            Kind::Param,
            p.value.shape().to_vec(),
            p.value.data(),
        );
    }
    for b in store.buffers() {
        push(&b.name, Kind::RunningMean, vec![b.mean.len()], &b.mean);
        push(&b.name, Kind::RunningVar, vec![b.var.len()], &b.var);
    }
    if let Some(opt) = optimizer {
        for (p, (m, v)) in store.params().iter().zip(opt.m.iter().zip(&opt.v)) {
            push(&p.name, Kind::AdamM, p.value.shape().to_vec(), m);
            push(&p.name, Kind::AdamV, p.value.shape().to_vec(), v);
        }
    }
    let header = Header {
        meta,
        tensors: entries,
        optimizer: optimizer.map(|o| OptimizerHeader {
            t: o.t,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            weight_decay: o.weight_decay,
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(20 + json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads only the JSON metadata block.
pub fn read_meta(bytes: &[u8]) -> Result<serde_json::Value, NnError> {
    Ok(parse(bytes)?.0.meta)
}

fn parse(bytes: &[u8]) -> Result<(Header, &[u8]), NnError> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    Ok((header, &body[hlen..]))
}

/// Loads values into a store that already has the same parameter names and
/// shapes (built from the same model spec). With `optimizer`, Adam moments
/// and step count are restored as well. Returns the metadata block.
pub fn load_into(
    bytes: &[u8],
    store: &mut ParamStore,
    optimizer: Option<&mut Adam>,
) -> Result<serde_json::Value, NnError> {
    let (header, payload) = parse(bytes)?;
    let read = |e: &Entry| -> Result<Vec<f64>, NnError> {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let raw = payload
            .get(start..start + n * 8)
            .ok_or_else(|| NnError::Checkpoint(format!("payload for {} is truncated", e.name)))?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut seen = 0;
    let mut opt = optimizer;
    if let (Some(o), Some(h)) = (opt.as_deref_mut(), &header.optimizer) {
        *o = Adam::new(store, h.lr);
        o.t = h.t;
        o.beta1 = h.beta1;
        o.beta2 = h.beta2;
        o.epsilon = h.epsilon;
        o.weight_decay = h.weight_decay;
    }
    for e in &header.tensors {
        match e.kind {
            Kind::Param | Kind::AdamM | Kind::AdamV => {
                let id = store
                    .find(&e.name)
                    .ok_or_else(|| NnError::Checkpoint(format!("unknown parameter {}", e.name)))?;
                if store.value(id).shape() != e.shape.as_slice() {
                    return Err(NnError::Checkpoint(format!(
                        "{}: checkpoint shape {:?}, model shape {:?}",
                        e.name,
                        e.shape,
                        store.value(id).shape()
                    )));
                }
                let data = read(e)?;
                match e.kind {
                    Kind::Param => {
                        store.value_mut(id).data_mut().copy_from_slice(&data);
                        seen += 1;
                    }
                    Kind::AdamM => {
                        if let Some(o) = opt.as_deref_mut() {
                            o.m[id.0] = data;
                        }
                    }
                    _ => {
                        if let Some(o) = opt.as_deref_mut() {
                            o.v[id.0] = data;
                        }
                    }
                }
            }
            Kind::RunningMean | Kind::RunningVar => {
                let data = read(e)?;
                let buf = store
                    .buffers_mut()
                    .iter_mut()
                    .find(|b| b.name == e.name)
                    .ok_or_else(|| NnError::Checkpoint(format!("unknown buffer {}", e.name)))?;
                let dst = if e.kind == Kind::RunningMean {
                    &mut buf.mean
                } else {
                    &mut buf.var
                };
                if dst.len() != data.len() {
                    return Err(NnError::Checkpoint(format!(
                        "{}: buffer length mismatch",
                        e.name
                    )));
                }
                *dst = data;
            }
        }
    }
    if seen != store.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint holds {seen} of {} parameters",
            store.len()
        )));
    }
    Ok(header.meta)
}
