//! JSON checkpoints: named tensors, the run config and a shape fingerprint.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{config_hash, RunConfig};
use crate::error::{Error, Result};
use crate::fusion::{InitConfig, ModelDims, ModelParams};
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config_hash: String,
    pub dims: ModelDims,
    pub step: usize,
    /// Dev accuracy per cutoff at `step`; empty when no dev split was used.
    pub dev_metrics: BTreeMap<usize, f64>,
    pub config: RunConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, step: usize, dev_metrics: BTreeMap<usize, f64>, config: &RunConfig) -> Self {
        Self {
            format: CHECKPOINT_FORMAT,
            config_hash: config_hash(&params.dims),
            dims: params.dims,
            step,
            dev_metrics,
            config: config.clone(),
            tensors: params.named_tensors().into_iter().map(|(name, m)| NamedTensor { name, tensor: m.clone() }).collect(),
        }
    }

    /// Rebuilds the parameters, checking names, shapes and the fingerprint.
    pub fn params(&self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("format {} (expected {CHECKPOINT_FORMAT})", self.format)));
        }
        if self.config_hash != config_hash(&self.dims) {
            return Err(Error::Checkpoint("config hash does not match the stored dimensions".into()));
        }
        let mut params = ModelParams::init(self.dims, InitConfig { noise: 0.0, gate_logit: 0.0 }, 0)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!("{} tensors stored, model has {}", self.tensors.len(), names.len())));
        }
        for ((slot, name), stored) in params.tensors_mut().into_iter().zip(&names).zip(&self.tensors) {
            if &stored.name != name {
                return Err(Error::Checkpoint(format!("tensor `{}` where `{name}` was expected", stored.name)));
            }
            let t = &stored.tensor;
            if t.shape() != slot.shape() || t.data().len() != t.rows() * t.cols() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor `{name}` holds non-finite values")));
            }
            *slot = t.clone();
        }
        Ok(params)
    }

    /// Fails unless the checkpoint was trained for `dims`.
    pub fn check_compatible(&self, dims: &ModelDims) -> Result<()> {
        let want = config_hash(dims);
        if self.config_hash != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} is incompatible with {want} (d_in={}, d={}, heads={})",
                self.config_hash, dims.d_in, dims.d, dims.heads
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::init(ModelDims { d_in: 4, d: 4, heads: 2 }, InitConfig::default(), 3).unwrap()
    }

    #[test]
    fn save_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let p = params();
        let mut dev = BTreeMap::new();
        dev.insert(1, 0.123456789012345);
        Checkpoint::new(&p, 7, dev.clone(), &RunConfig::default()).save(&path).unwrap();
        let c = Checkpoint::load(&path).unwrap();
        assert_eq!(c.params().unwrap(), p);
        assert_eq!(c.dev_metrics, dev);
        assert_eq!(c.step, 7);
    }

    #[test]
    fn rejects_mismatches() {
        let p = params();
        let c = Checkpoint::new(&p, 0, BTreeMap::new(), &RunConfig::default());
        assert!(c.check_compatible(&ModelDims { d_in: 4, d: 4, heads: 4 }).is_err());
        c.check_compatible(&p.dims).unwrap();

        let mut bad = c.clone();
        bad.dims.heads = 4;
        assert!(matches!(bad.params(), Err(Error::Checkpoint(_))));
        let mut bad = c.clone();
        bad.tensors[0].tensor = Matrix::zeros(2, 2);
        assert!(matches!(bad.params(), Err(Error::Checkpoint(_))));
        let mut bad = c;
        bad.tensors.swap(0, 1);
        assert!(matches!(bad.params(), Err(Error::Checkpoint(_))));
    }
}
