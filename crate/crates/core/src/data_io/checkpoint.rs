use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{ParameterSet, Tensor};
use crate::model::{check_shapes, ModelConfig};
use crate::train::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLDTACK1";

/// Storage precision of checkpoint tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Bit-exact round trip.
    #[default]
    F64,
    /// Each value is rounded to the nearest `f32` on save and widened back
    /// exactly on load. Optimizer moments are always kept at `f64`.
    F32,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRow {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerRow {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    /// Parameters with moments, in payload order.
    names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    precision: Precision,
    tensors: Vec<TensorRow>,
    optimizer: Option<OptimizerRow>,
}

/// Model configuration, parameters and optional optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParameterSet,
    pub optimizer: Option<OptimizerState>,
    pub precision: Precision,
}

impl Checkpoint {
    /// Fails with [`Error::Checkpoint`] unless the stored configuration
    /// equals `expected`.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model != expected {
            return Err(Error::Checkpoint(format!(
                "configuration mismatch: checkpoint has {:?}, expected {:?}",
                self.model, expected
            )));
        }
        Ok(())
    }
}

/// File layout: magic `CLDTACK1`, header length as `u32` LE, JSON header,
/// then every tensor in header order (little-endian, `precision` width),
/// then the optimizer's first and second moments per parameter as `f64`.
pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    params: &ParameterSet,
    optimizer: Option<&OptimizerState>,
    precision: Precision,
) -> Result<()> {
    check_shapes(params, model)?;
    let header = Header {
        format_version: 1,
        model: model.clone(),
        precision,
        tensors: params
            .iter()
            .map(|(name, e)| TensorRow {
                name: name.to_string(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
        optimizer: optimizer.map(|o| OptimizerRow {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            step: o.step,
            names: o.m.keys().cloned().collect(),
        }),
    };
    if let Some(o) = optimizer {
        if o.m.keys().ne(o.v.keys()) {
            return Err(Error::Checkpoint("optimizer moments name different parameters".into()));
        }
    }
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, e) in params.iter() {
        for &v in e.value.data() {
            match precision {
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    if let Some(o) = optimizer {
        for moments in [&o.m, &o.v] {
            for m in moments.values() {
                for &v in m {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
    total: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, expected_total: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: expected_total,
                found: self.total,
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "CLDTACK1",
        });
    }
    let mut r = Reader {
        bytes: &bytes,
        at: 8,
        path,
        total: bytes.len(),
    };
    let len = u32::from_le_bytes(r.take(4, 12)?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len, 12 + len)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format_version != 1 {
        return Err(Error::Checkpoint(format!("format_version {}", header.format_version)));
    }
    let width = header.precision.width();
    let n_values: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let moment_values = match &header.optimizer {
        Some(o) => o
            .names
            .iter()
            .map(|n| {
                header
                    .tensors
                    .iter()
                    .find(|t| &t.name == n)
                    .map(|t| t.shape.iter().product::<usize>())
                    .ok_or_else(|| Error::Checkpoint(format!("moments for unknown tensor {n:?}")))
            })
            .sum::<Result<usize>>()?,
        None => 0,
    };
    let expected = 12 + len + width * n_values + 16 * moment_values;

    let mut params = ParameterSet::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = r.take(width * n, expected)?;
        let data: Vec<f64> = match header.precision {
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
        };
        let value = Tensor::new(t.shape.clone(), data)?;
        if t.trainable {
            params.insert(t.name.clone(), value)?;
        } else {
            params.insert_buffer(t.name.clone(), value)?;
        }
    }
    let optimizer = match &header.optimizer {
        Some(o) => {
            let mut moments = [BTreeMap::new(), BTreeMap::new()];
            for map in moments.iter_mut() {
                for name in &o.names {
                    let n = params.get(name)?.len();
                    let raw = r.take(8 * n, expected)?;
                    let v: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    map.insert(name.clone(), v);
                }
            }
            let [m, v] = moments;
            let state = OptimizerState {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                step: o.step,
                m,
                v,
            };
            state.validate()?;
            Some(state)
        }
        None => None,
    };
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the payload",
            bytes.len() - r.at
        )));
    }
    header.model.validate()?;
    check_shapes(&params, &header.model)?;
    Ok(Checkpoint {
        model: header.model,
        params,
        optimizer,
        precision: header.precision,
    })
}

/// Loads a checkpoint and checks it was written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    ck.ensure_config(expected)?;
    Ok(ck)
}
