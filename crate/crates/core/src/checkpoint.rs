//! Named-tensor checkpoints plus `key=value` metadata and vocabulary sidecars.
//!
//! Binary layout, all integers little-endian:
//! `MAGIC`, `u32` tensor count, then per tensor `u32` name length, UTF-8 name,
//! `u32` rank, `rank × u64` dims, `numel × f64` data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::params::Parameters;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CRUCKPT1";

pub fn encode_tensors(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    path: &'b Path,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                line: 0,
                message: format!("truncated checkpoint at byte {}", self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if !(1..=3).contains(&rank) {
            return Err(bad(format!("tensor `{name}` has unsupported rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| {
                bad(format!(
                    "tensor `{name}` has an implausible shape {shape:?}"
                ))
            })?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::write(path, encode_tensors(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes, path)
}

/// Copies `tensors` into `model`, which must have exactly the same names and
/// shapes; errors name the first offending tensor.
pub fn restore_params<M: Parameters>(
    model: &mut M,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let Some(t) = tensors.get(name) else {
            return Err(Error::Checkpoint {
                name: name.clone(),
                message: "missing from checkpoint".into(),
            });
        };
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint {
                name: name.clone(),
                message: format!(
                    "checkpoint shape {:?} but configured shape {:?}",
                    t.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = t.clone();
    }
    Ok(())
}

/// Names whose tensors belong to the model, as opposed to optimizer state.
fn is_model_tensor(name: &str) -> bool {
    !name.starts_with("adam.")
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, "meta")
}

pub fn vocab_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, "vocab")
}

fn sidecar(ckpt: &Path, ext: &str) -> PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn write_meta(path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_key_values(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected key=value, found `{line}`"),
            });
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text, path)
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let text: String = vocab.tokens().iter().map(|t| format!("{t}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::from_tokens(text.lines().map(String::from).collect())
}

/// Model tensors, then `adam.t`, `adam.m.<name>` and `adam.v.<name>`.
pub fn save<M: Parameters>(
    path: &Path,
    model: &M,
    adam: Option<&AdamState>,
    meta: &BTreeMap<String, String>,
    vocab: &Vocab,
) -> Result<()> {
    let params = model.named_params();
    let mut tensors: Vec<(String, &Tensor)> = params.iter().map(|(n, t)| (n.clone(), *t)).collect();
    let step;
    if let Some(a) = adam {
        if a.m.len() != params.len() {
            return Err(Error::Contract(
                "optimizer state does not match the model".into(),
            ));
        }
        step = Tensor::scalar(a.t as f64);
        tensors.push(("adam.t".into(), &step));
        for ((n, _), m) in params.iter().zip(&a.m) {
            tensors.push((format!("adam.m.{n}"), m));
        }
        for ((n, _), v) in params.iter().zip(&a.v) {
            tensors.push((format!("adam.v.{n}"), v));
        }
    }
    write_tensors(path, &tensors)?;
    write_meta(&meta_path(path), meta)?;
    write_vocab(&vocab_path(path), vocab)
}

/// Everything stored next to a checkpoint, before it is bound to a model.
#[derive(Clone, Debug)]
pub struct Stored {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
    pub vocab: Vocab,
}

pub fn load(path: &Path) -> Result<Stored> {
    let tensors = read_tensors(path)?.into_iter().collect();
    Ok(Stored {
        tensors,
        meta: read_meta(&meta_path(path))?,
        vocab: read_vocab(&vocab_path(path))?,
    })
}

impl Stored {
    /// Copies the model tensors into `model`; unknown model tensors are an error.
    pub fn restore<M: Parameters>(&self, model: &mut M) -> Result<()> {
        let known: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| is_model_tensor(k) && !known.contains(k))
        {
            return Err(Error::Checkpoint {
                name: extra.clone(),
                message: "present in checkpoint but not in the configured model".into(),
            });
        }
        restore_params(model, &self.tensors)
    }

    /// Optimizer state for `model`'s parameter list, when it was saved.
    pub fn adam<M: Parameters>(&self, model: &M, config: AdamConfig) -> Result<Option<AdamState>> {
        let Some(t) = self.tensors.get("adam.t") else {
            return Ok(None);
        };
        let mut state = AdamState::new(config, model.named_params().into_iter().map(|(_, t)| t));
        state.t = t.item() as u64;
        for (i, (name, p)) in model.named_params().into_iter().enumerate() {
            for (kind, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let key = format!("adam.{kind}.{name}");
                let stored = self.tensors.get(&key).ok_or_else(|| Error::Checkpoint {
                    name: key.clone(),
                    message: "missing from checkpoint".into(),
                })?;
                if stored.shape() != p.shape() {
                    return Err(Error::Checkpoint {
                        name: key,
                        message: format!("shape {:?} vs {:?}", stored.shape(), p.shape()),
                    });
                }
                *slot = stored.clone();
            }
        }
        Ok(Some(state))
    }
}
