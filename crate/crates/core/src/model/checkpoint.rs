use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamGroup, ParamStore};
use crate::numerics::Tensor;
use crate::{Error, Result};

const FORMAT: &str = "jepa-align-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

/// First line of a checkpoint file; the f64 payload follows the newline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub step: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn of(model: &Model, step: usize) -> Self {
        let params = model
            .store()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                format: FORMAT.into(),
                version: VERSION,
                config: model.config().clone(),
                step,
                params,
            },
            store: model.store().clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for p in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("no header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
        }
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[nl + 1..];
        let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, manifest implies {}",
                payload.len(),
                total * 8
            )));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut store = ParamStore::default();
        for e in &header.params {
            let n = e.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            store.add(e.name.clone(), e.group, Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self { header, store })
    }

    /// Rebuilds the model, checking that the stored manifest matches what
    /// the stored config would allocate.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.header.config)?;
        if model.store().len() != self.store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} parameters stored, config allocates {}",
                self.store.len(),
                model.store().len()
            )));
        }
        for (dst, src) in model.store_mut().iter_mut().zip(self.store.iter()) {
            if dst.name != src.name || dst.group != src.group || dst.value.shape() != src.value.shape() {
                return Err(Error::CheckpointMismatch(format!("{} vs stored {}", dst.name, src.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(model)
    }
}

pub fn write_checkpoint(path: &Path, model: &Model, step: usize) -> Result<()> {
    fs::write(path, Checkpoint::of(model, step).to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
