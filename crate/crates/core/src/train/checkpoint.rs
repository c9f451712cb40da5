//! Single-file checkpoint container: an 8-byte magic, the manifest length as
//! a little-endian `u64`, a JSON manifest, then raw little-endian `f64`s.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamState;
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SMCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Param,
    FirstMoment,
    SecondMoment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fingerprint: String,
    pub config: TrainConfig,
    pub step: u64,
    pub stats: ChannelStats,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub stats: ChannelStats,
    pub params: BTreeMap<String, Tensor>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, step: u64, stats: ChannelStats, params: &ParamStore, adam: &AdamState) -> Self {
        Self {
            config: config.clone(),
            step,
            stats,
            params: params.iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
            adam: adam.clone(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let groups = [
            (Role::Param, &self.params),
            (Role::FirstMoment, &self.adam.m),
            (Role::SecondMoment, &self.adam.v),
        ];
        for (role, map) in groups {
            for (name, t) in map {
                entries.push(Entry {
                    name: name.clone(),
                    role,
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                });
                payload.extend_from_slice(t.data());
            }
        }
        let manifest = Manifest {
            fingerprint: self.config.fingerprint(),
            config: self.config.clone(),
            step: self.step,
            stats: self.stats,
            entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| Error::Checkpoint("manifest truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.fingerprint != manifest.config.fingerprint() {
            return Err(Error::Checkpoint("config fingerprint mismatch".into()));
        }
        let payload = &bytes[16 + len..];
        if payload.len() % 8 != 0 {
            return Err(Error::Checkpoint("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("payload truncated at {}", e.name)))?;
            let t = Tensor::new(&e.shape, data.to_vec())?;
            let slot = match e.role {
                Role::Param => &mut params,
                Role::FirstMoment => &mut m,
                Role::SecondMoment => &mut v,
            };
            slot.insert(e.name, t);
        }
        Ok(Self {
            config: manifest.config,
            step: manifest.step,
            stats: manifest.stats,
            params,
            adam: AdamState { m, v, t: manifest.step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies the stored weights into `store`, which must hold exactly the
    /// same parameter names and shapes.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            if store.get(name).is_none() {
                return Err(Error::Checkpoint(format!("unknown parameter {name}")));
            }
            store.set(name, t.clone())?;
        }
        Ok(())
    }
}
