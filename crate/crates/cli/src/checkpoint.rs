//! Versioned checkpoint container.
//!
//! Layout: the magic `FNAVCKPT`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then the payload as
//! little-endian `f64` values in header order: every parameter, every buffer,
//! then the Adam first and second moments of each parameter listed in the
//! header.

use std::fs;
use std::path::Path;

use fusenav::model::{init_model, ModelState};
use fusenav::numeric::{AdamState, Tensor, TensorStore};
use fusenav::{Error, Result};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"FNAVCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Parameters with stored moments, each `len` values of m then of v.
    moments: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    params: Vec<Entry>,
    buffers: Vec<Entry>,
    adam: AdamHeader,
    epoch: usize,
    best_val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: ModelState<f64>,
    pub adam: AdamState<f64>,
    /// Epochs completed when the checkpoint was taken.
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
}

fn ckpt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::format(format!("checkpoint v{VERSION} {}", path.display()), detail)
}

fn entries(store: &TensorStore<f64>) -> Vec<Entry> {
    store
        .iter()
        .map(|(name, t)| Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let moments: Vec<Entry> = self
            .adam
            .m
            .iter()
            .map(|(name, m)| Entry {
                name: name.clone(),
                shape: vec![m.len()],
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            params: entries(&self.model.params),
            buffers: entries(&self.model.buffers),
            adam: AdamHeader {
                t: self.adam.t,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
                moments,
            },
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::contract(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(json.len() + 8 * self.model.params.num_scalars() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for (_, t) in self.model.params.iter() {
            put(t.data());
        }
        for (_, t) in self.model.buffers.iter() {
            put(t.data());
        }
        for (name, m) in &self.adam.m {
            put(m);
            let v = self
                .adam
                .v
                .get(name)
                .ok_or_else(|| Error::contract(format!("adam state has m but no v for '{name}'")))?;
            put(v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(ckpt_err(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ckpt_err(path, format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(ckpt_err(path, "truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| ckpt_err(path, format!("header: {e}")))?;
        let payload = &body[hlen..];
        if payload.len() % 8 != 0 {
            return Err(ckpt_err(path, "payload is not a whole number of f64 values"));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize, what: &str| -> Result<Vec<f64>> {
            let v: Vec<f64> = values.by_ref().take(n).collect();
            if v.len() != n {
                return Err(ckpt_err(path, format!("payload ends inside '{what}'")));
            }
            Ok(v)
        };
        let mut read_store = |list: &[Entry]| -> Result<TensorStore<f64>> {
            let mut store = TensorStore::new();
            for e in list {
                let data = take(e.shape.iter().product(), &e.name)?;
                let t = Tensor::new(&e.shape, data).map_err(|err| ckpt_err(path, format!("'{}': {err}", e.name)))?;
                store.insert(e.name.clone(), t).map_err(|err| ckpt_err(path, err.to_string()))?;
            }
            Ok(store)
        };
        let params = read_store(&header.params)?;
        let buffers = read_store(&header.buffers)?;
        let mut adam = AdamState::new(header.adam.beta1, header.adam.beta2, header.adam.eps);
        adam.t = header.adam.t;
        let (mut m, mut v) = (IndexMap::new(), IndexMap::new());
        for e in &header.adam.moments {
            let n = e.shape.iter().product();
            m.insert(e.name.clone(), take(n, &e.name)?);
            v.insert(e.name.clone(), take(n, &e.name)?);
        }
        adam.m = m;
        adam.v = v;
        if values.next().is_some() {
            return Err(ckpt_err(path, "trailing payload values"));
        }
        Ok(Checkpoint {
            config: header.config,
            model: ModelState { params, buffers },
            adam,
            epoch: header.epoch,
            best_val_loss: header.best_val_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Fails unless the stored tensors have exactly the names and shapes a
    /// model built from `cfg` would have.
    pub fn check_shapes(&self, cfg: &RunConfig, path: &Path) -> Result<()> {
        let fresh = init_model::<f64>(&cfg.model, 0)?;
        for (what, want, have) in [
            ("parameter", &fresh.params, &self.model.params),
            ("buffer", &fresh.buffers, &self.model.buffers),
        ] {
            for (name, t) in want.iter() {
                match have.get(name) {
                    Ok(h) if h.shape() == t.shape() => {}
                    Ok(h) => {
                        return Err(ckpt_err(
                            path,
                            format!("{what} '{name}' has shape {:?}, config expects {:?}", h.shape(), t.shape()),
                        ))
                    }
                    Err(_) => return Err(ckpt_err(path, format!("{what} '{name}' missing"))),
                }
            }
            if let Some((extra, _)) = have.iter().find(|(n, _)| want.index_of(n).is_none()) {
                return Err(ckpt_err(path, format!("{what} '{extra}' not in the configured model")));
            }
        }
        Ok(())
    }
}
