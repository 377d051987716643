//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"DGRD"
//! version    u32
//! header     u64 byte length + JSON {"model": DenseNetConfig, "metadata": {..}}
//! records    u64 count, then per tensor:
//!              u64 name length, UTF-8 name,
//!              u8 dtype (0 = f32, 1 = f64),
//!              u64 rank, rank × u64 dims,
//!              raw values
//! optimizer  u8 flag; when 1: u64 step, f64 beta1, f64 beta2, f64 epsilon,
//!            then a record list named "adam.m/<param>" and "adam.v/<param>"
//! ```
//!
//! Batch-norm running statistics are stored as `<norm>.running_mean` and
//! `<norm>.running_var` records next to the parameters.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{DenseNetConfig, Model};
use crate::autograd::RunningStats;
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};
use crate::train::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGRD";
pub const CHECKPOINT_VERSION: u32 = 1;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";
const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real = f32> {
    pub model: Model<T>,
    pub optimizer: Option<OptimizerState<T>>,
    /// Free-form string annotations (task, normalization, epoch, ...).
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: DenseNetConfig,
    metadata: BTreeMap<String, String>,
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    model: &Model<T>,
    optimizer: Option<&OptimizerState<T>>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model, optimizer, metadata)?;
    let tmp = path.with_extension("ckpt.partial");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, None)
}

/// Loads the tensors of a checkpoint into an explicitly given architecture,
/// ignoring the stored one. Fails when the tensor names or shapes differ.
pub fn load_checkpoint_as<T: Real>(
    path: impl AsRef<Path>,
    config: &DenseNetConfig,
) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, Some(config))
}

pub(crate) fn encode<T: Real>(
    model: &Model<T>,
    optimizer: Option<&OptimizerState<T>>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        model: model.config().clone(),
        metadata: metadata.clone(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    put_u64(&mut out, header.len() as u64);
    out.extend_from_slice(&header);

    let count = model.params().len() + 2 * model.norms().len();
    put_u64(&mut out, count as u64);
    for (name, t) in model.params() {
        put_record(&mut out, name, t);
    }
    for (name, stats) in model.norms() {
        put_record(&mut out, &format!("{name}{RUNNING_MEAN}"), &stats.mean);
        put_record(&mut out, &format!("{name}{RUNNING_VAR}"), &stats.var);
    }

    match optimizer {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            put_u64(&mut out, state.step);
            for v in [state.beta1, state.beta2, state.epsilon] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_u64(
                &mut out,
                (state.first_moment.len() + state.second_moment.len()) as u64,
            );
            for (name, t) in &state.first_moment {
                put_record(&mut out, &format!("{FIRST_MOMENT}{name}"), t);
            }
            for (name, t) in &state.second_moment {
                put_record(&mut out, &format!("{SECOND_MOMENT}{name}"), t);
            }
        }
    }
    Ok(out)
}

pub(crate) fn decode<T: Real>(
    bytes: &[u8],
    config: Option<&DenseNetConfig>,
) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = r.len_u64()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;

    let mut params = IndexMap::new();
    let mut means = IndexMap::new();
    let mut vars = IndexMap::new();
    let count = r.len_u64()?;
    for _ in 0..count {
        let (name, t) = r.record::<T>()?;
        if let Some(base) = name.strip_suffix(RUNNING_MEAN) {
            means.insert(base.to_string(), t);
        } else if let Some(base) = name.strip_suffix(RUNNING_VAR) {
            vars.insert(base.to_string(), t);
        } else if params.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate record `{name}`")));
        }
    }
    let mut norms = IndexMap::new();
    for (name, mean) in means {
        let var = vars
            .swap_remove(&name)
            .ok_or_else(|| Error::Format(format!("`{name}` has a running mean but no variance")))?;
        norms.insert(name, RunningStats { mean, var });
    }
    if let Some(name) = vars.keys().next() {
        return Err(Error::Format(format!(
            "`{name}` has a running variance but no mean"
        )));
    }
    let config = config.cloned().unwrap_or(header.model);
    let model = Model::from_parts(config, params, norms)?;

    let optimizer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let step = r.len_u64()? as u64;
            let mut f = [0.0f64; 3];
            for v in &mut f {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
            let mut state = OptimizerState::new(f[0], f[1], f[2]);
            state.step = step;
            for _ in 0..r.len_u64()? {
                let (name, t) = r.record::<T>()?;
                if let Some(p) = name.strip_prefix(FIRST_MOMENT) {
                    state.first_moment.insert(p.to_string(), t);
                } else if let Some(p) = name.strip_prefix(SECOND_MOMENT) {
                    state.second_moment.insert(p.to_string(), t);
                } else {
                    return Err(Error::Format(format!("unexpected optimizer record `{name}`")));
                }
            }
            Some(state)
        }
        other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        metadata: header.metadata,
    })
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: needed {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} out of range")))
    }

    fn record<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let name_len = self.len_u64()?;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_tag(self.take(1)?[0])
            .ok_or_else(|| Error::Format(format!("`{name}` has an unknown dtype tag")))?;
        let rank = self.len_u64()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.len_u64()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("`{name}` has an overflowing shape")))?;
        let raw = self.take(
            numel
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("`{name}` is too large")))?,
        )?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        Ok((name, Tensor::new(shape, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        Model::build(DenseNetConfig::tiny(18), 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut model = tiny();
        model.norms_mut()["stem.norm"].mean.data_mut()[0] = 0.125;
        let mut opt = OptimizerState {
            step: 9,
            ..OptimizerState::default()
        };
        opt.first_moment
            .insert("head.bias".into(), Tensor::full([18], 0.5f32));
        opt.second_moment
            .insert("head.bias".into(), Tensor::full([18], 0.25f32));
        let meta = BTreeMap::from([("task".to_string(), "fine18".to_string())]);
        let bytes = encode(&model, Some(&opt), &meta).unwrap();
        let back: Checkpoint<f32> = decode(&bytes, None).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.optimizer, Some(opt));
        assert_eq!(back.metadata, meta);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&tiny(), None, &BTreeMap::new()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = decode::<f32>(&bad, None).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        bytes[4] = 7;
        let err = decode::<f32>(&bytes, None).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode(&tiny(), None, &BTreeMap::new()).unwrap();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode::<f32>(&bytes[..cut], None), Err(Error::Format(_))));
        }
    }

    #[test]
    fn tiny_tensors_do_not_fit_densenet201() {
        let bytes = encode(&tiny(), None, &BTreeMap::new()).unwrap();
        let err = decode::<f32>(&bytes, Some(&DenseNetConfig::densenet201(18))).unwrap_err();
        assert!(err.to_string().contains("name set"), "{err}");
    }

    #[test]
    fn f32_file_loads_as_f64() {
        let model = tiny();
        let bytes = encode(&model, None, &BTreeMap::new()).unwrap();
        let wide: Checkpoint<f64> = decode(&bytes, None).unwrap();
        let a = &model.params()["head.weight"];
        let b = &wide.model.params()["head.weight"];
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x as f64 == *y));
    }
}
