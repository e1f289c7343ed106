//! Run configuration: one flat TOML table of documented keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{InitConfig, ModelDims};
use crate::objectives::LossConfig;
use crate::retrieval::DEFAULT_LAMBDA;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Shared embedding width after projection.
    pub d: usize,
    pub heads: usize,

    pub tau: f64,
    /// Weight of the coarse contrastive term.
    pub alpha: f64,
    /// Weight of the triplet term.
    pub beta: f64,
    pub margin: f64,
    pub n_hard: usize,
    pub n_inbatch: usize,

    pub learning_rate: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Upper bound on passes over the training split.
    pub epochs: usize,
    /// Optimizer steps between dev evaluations.
    pub eval_every: usize,
    pub dropout: f64,
    /// Dev evaluations without a T@1 improvement before stopping; 0 disables.
    pub patience: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub init_noise: f64,
    pub gate_logit: f64,

    /// Candidate set size.
    pub lambda: usize,
    pub seed: u64,
    /// Train and evaluate without object, face and identity inputs.
    pub text_only: bool,
    /// Evaluation fans out over samples when true.
    pub parallel_eval: bool,

    pub train_samples: Option<PathBuf>,
    pub dev_samples: Option<PathBuf>,
    pub test_samples: Option<PathBuf>,
    pub entities: Option<PathBuf>,
    /// Feature store files, merged in order.
    pub features: Vec<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            d: 512,
            heads: 8,
            tau: loss.tau,
            alpha: loss.alpha,
            beta: loss.beta,
            margin: loss.margin,
            n_hard: loss.n_hard,
            n_inbatch: loss.n_inbatch,
            learning_rate: 5e-5,
            weight_decay: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 300,
            eval_every: 2000,
            dropout: 0.4,
            patience: 0,
            max_steps: 0,
            init_noise: InitConfig::default().noise,
            gate_logit: InitConfig::default().gate_logit,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            text_only: false,
            parallel_eval: true,
            train_samples: None,
            dev_samples: None,
            test_samples: None,
            entities: None,
            features: Vec::new(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.train_samples, &mut self.dev_samples, &mut self.test_samples, &mut self.entities, &mut self.output_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        self.features.iter_mut().for_each(fix);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
            margin: self.margin,
            n_hard: self.n_hard,
            n_inbatch: self.n_inbatch,
        }
    }

    pub fn init(&self) -> InitConfig {
        InitConfig { noise: self.init_noise, gate_logit: self.gate_logit }
    }

    pub fn dims(&self, d_in: usize) -> ModelDims {
        ModelDims { d_in, d: self.d, heads: self.heads }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("eval_every", self.eval_every),
            ("lambda", self.lambda),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for the contrastive terms".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("learning_rate and adam_eps must be positive, weight_decay non-negative".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d = {} is not divisible by heads = {}", self.d, self.heads)));
        }
        self.loss().validate()
    }
}

/// Fingerprint of everything that fixes parameter shapes.
pub fn config_hash(dims: &ModelDims) -> String {
    let mut h = Sha256::new();
    h.update(format!("d_in={};d={};heads={}", dims.d_in, dims.d, dims.heads));
    hex::encode(&h.finalize()[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.d, c.heads, c.batch_size, c.epochs, c.eval_every), (512, 8, 64, 300, 2000));
        assert_eq!((c.learning_rate, c.weight_decay, c.dropout, c.margin), (5e-5, 1e-3, 0.4, 0.5));
        assert_eq!((c.tau, c.alpha, c.beta, c.lambda), (0.1, 1.0, 10.0, 100));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "d = 32\nheads = 4\nseed = 7\nentities = \"kb.jsonl\"\n").unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!((c.d, c.heads, c.seed), (32, 4, 7));
        assert_eq!(c.entities.as_deref(), Some(dir.path().join("kb.jsonl").as_path()));
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);

        std::fs::write(&path, "d = 32\nhead = 4\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        std::fs::write(&path, "d = 30\nheads = 4\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn hash_tracks_shapes_only() {
        let a = config_hash(&ModelDims { d_in: 8, d: 8, heads: 2 });
        assert_eq!(a, config_hash(&ModelDims { d_in: 8, d: 8, heads: 2 }));
        assert_ne!(a, config_hash(&ModelDims { d_in: 8, d: 8, heads: 4 }));
        assert_eq!(a.len(), 16);
    }
}
