//! Checkpoint files: the magic `HWBPCKPT`, a little-endian `u64` header
//! length, a TOML header (training config, step, array names and shapes),
//! then every array as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::engine::ModelGraph;
use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::numkit::Mat64;

pub const MAGIC: &[u8; 8] = b"HWBPCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: usize,
    config: TrainConfig,
    arrays: Vec<ArrayInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Optimizer steps taken before the parameters were saved.
    pub step: usize,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, step: usize, params: ParamSet) -> Self {
        Self { config, step, params }
    }

    /// The configured model with these parameters.
    pub fn model(&self) -> Result<ModelGraph> {
        let fresh = self.config.build_model()?;
        fresh.params.check_same_shape(&self.params, "checkpoint")?;
        ModelGraph::from_parts(fresh.layers, fresh.layer_group, self.params.clone(), fresh.head, fresh.attach)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            step: self.step,
            config: self.config.clone(),
            arrays: self
                .params
                .arrays()
                .map(|(name, m)| ArrayInfo {
                    name,
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let text = toml::to_string(&header).expect("header is always representable as TOML");
        let mut out = Vec::with_capacity(16 + text.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (_, m) in self.params.arrays() {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Input(format!("bad checkpoint: {what}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let text = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| bad("truncated header"))?;
        let text = std::str::from_utf8(text).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| bad(&e.to_string()))?;
        header.config.validate()?;

        let mut params = header.config.build_model()?.params.zeros_like();
        let names: Vec<String> = params.arrays().map(|(n, _)| n).collect();
        if names.len() != header.arrays.len() {
            return Err(bad("array list does not match the configured model"));
        }
        let mut data = &bytes[16 + len..];
        for ((slot, name), info) in params.arrays_mut().zip(&names).zip(&header.arrays) {
            if *name != info.name || slot.shape() != (info.rows, info.cols) {
                return Err(bad(&format!("array {} does not match the configured model", info.name)));
            }
            let n = info.rows * info.cols * 8;
            if data.len() < n {
                return Err(bad("truncated data"));
            }
            let values = data[..n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *slot = Mat64::new(info.rows, info.cols, values)?;
            data = &data[n..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
