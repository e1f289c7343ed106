//! Configuration, training, evaluation, checkpoints and the file-level
//! pipelines behind the command-line tool.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod optim;
pub mod train;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::{config_hash, RunConfig};
pub use data::{assemble_bundle, prepare_split, EntityTable, PreparedSample, PreparedSplit};
pub use eval::{evaluate, format_ranking, link, render_table, Evaluation, LinkedCandidate, MetricsTable};
pub use optim::{AdamW, AdamWConfig};
pub use train::{train, EvalRecord, LossRecord, TrainOutcome};

use crate::attributes::SamplePrompts;
use crate::datamodel::{self, EntityRecord, MentionSample};
use crate::encoders::{keys, toy_encode_text, FeatureStore};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::retrieval::EntityIndex;

/// Entities, features and the derived lookup structures shared by all splits.
pub struct Inputs {
    pub entities: Vec<EntityRecord>,
    pub store: FeatureStore,
    pub table: EntityTable,
    pub index: EntityIndex,
}

impl Inputs {
    pub fn new(entities: Vec<EntityRecord>, store: FeatureStore) -> Result<Self> {
        let table = EntityTable::from_store(&entities, &store)?;
        let index = EntityIndex::build(&entities)?;
        Ok(Self { entities, store, table, index })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let entities_path = require_path(&cfg.entities, "entities")?;
        if cfg.features.is_empty() {
            return Err(Error::Config("no feature store configured (key `features`)".into()));
        }
        let entities = datamodel::load_entities(entities_path)?;
        let store = FeatureStore::open_all(&cfg.features)?;
        Self::new(entities, store)
    }

    pub fn prepare(&self, name: &str, samples: &[MentionSample], cfg: &RunConfig) -> Result<PreparedSplit> {
        let exec = if cfg.parallel_eval { Exec::Parallel } else { Exec::Sequential };
        prepare_split(name, samples, &self.table, &self.index, &self.store, cfg.lambda, cfg.text_only, exec)
    }

    pub fn prepare_file(&self, name: &str, path: &Path, cfg: &RunConfig) -> Result<PreparedSplit> {
        let samples = datamodel::load_samples(path)?;
        self.prepare(name, &samples, cfg)
    }
}

pub fn require_path<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("missing path `{key}` in the run config")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub const CHECKPOINT_FILE: &str = "best.ckpt.json";
pub const LOSS_LOG_FILE: &str = "loss.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_step: usize,
    pub stopped_early: bool,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub dev_metrics: BTreeMap<usize, f64>,
    pub evals: Vec<EvalRecord>,
    pub checkpoint: PathBuf,
}

/// Trains from the files named in `cfg` and writes the resolved config, the
/// loss log, the best checkpoint and a summary into the output directory.
pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out_dir = require_path(&cfg.output_dir, "output_dir")?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.save(&out_dir.join(RESOLVED_CONFIG_FILE))?;

    let inputs = Inputs::load(cfg)?;
    let train_split = inputs.prepare_file("train", require_path(&cfg.train_samples, "train_samples")?, cfg)?;
    let dev = match &cfg.dev_samples {
        Some(p) => Some(inputs.prepare_file("dev", p, cfg)?),
        None => None,
    };
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let outcome = train(cfg, &train_split, dev.as_ref(), &inputs.table, Some(&mut writer))?;
    drop(writer);

    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    outcome.best.save(&ckpt_path)?;
    let summary = TrainSummary {
        steps: outcome.steps,
        best_step: outcome.best.step,
        stopped_early: outcome.stopped_early,
        initial_loss: outcome.losses.first().map(|r| r.loss),
        final_loss: outcome.losses.last().map(|r| r.loss),
        dev_metrics: outcome.best.dev_metrics.clone(),
        evals: outcome.evals,
        checkpoint: ckpt_path,
    };
    write_json(&out_dir.join(TRAIN_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Evaluates a checkpoint on the samples at `samples`.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, samples: &Path, dataset: &str, split: &str) -> Result<MetricsTable> {
    if !checkpoint.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let inputs = Inputs::load(cfg)?;
    ckpt.check_compatible(&cfg.dims(inputs.store.dim()))?;
    let params = ckpt.params()?;
    let prepared = inputs.prepare_file(split, samples, cfg)?;
    let exec = if cfg.parallel_eval { Exec::Parallel } else { Exec::Sequential };
    let ev = evaluate(&params, &prepared, &inputs.table, exec)?;
    Ok(MetricsTable::new(dataset, split, prepared.len(), cfg.lambda, &ckpt.config_hash, &ev.topk))
}

/// Ranked candidates for one sample of `samples`.
pub fn run_link(cfg: &RunConfig, checkpoint: &Path, samples: &Path, sample_id: &str) -> Result<Vec<LinkedCandidate>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let inputs = Inputs::load(cfg)?;
    ckpt.check_compatible(&cfg.dims(inputs.store.dim()))?;
    let params = ckpt.params()?;
    let all = datamodel::load_samples(samples)?;
    let sample = all
        .into_iter()
        .find(|s| s.sample_id == sample_id)
        .ok_or_else(|| Error::InvalidInput(format!("no sample `{sample_id}` in {}", samples.display())))?;
    let mut bundle = assemble_bundle(&sample, &inputs.store)?;
    if cfg.text_only {
        bundle.strip_visual();
    }
    let candidates = data::sample_candidates(&sample, &inputs.index, cfg.lambda)
        .iter()
        .map(|q| inputs.table.row(q).ok_or_else(|| Error::MissingFeature(keys::entity(q))))
        .collect::<Result<Vec<_>>>()?;
    link(&params, &bundle, &candidates, &inputs.table)
}

/// Merges saved metric tables (single objects or arrays) in file order.
pub fn merge_reports<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<MetricsTable>> {
    let mut rows = Vec::new();
    for p in paths {
        let v: serde_json::Value = read_json(p.as_ref())?;
        if v.is_array() {
            rows.extend(serde_json::from_value::<Vec<MetricsTable>>(v)?);
        } else {
            rows.push(serde_json::from_value(v)?);
        }
    }
    Ok(rows)
}

/// Encodes every text input with the toy encoder: mentions, sample texts,
/// entity representations and attribute prompts. Image and object rows come
/// from external encoders.
pub fn encode_toy(
    samples: &[MentionSample],
    entities: &[EntityRecord],
    prompts: &[SamplePrompts],
    seed: u64,
    dim: usize,
    exec: Exec,
) -> Result<FeatureStore> {
    let mut jobs: Vec<(String, String)> = Vec::new();
    for s in samples {
        jobs.push((keys::mention(&s.sample_id), s.mention.clone()));
        jobs.push((keys::text(&s.sample_id), s.text.clone()));
    }
    for e in entities {
        jobs.push((keys::entity(&e.qid), e.er_text.clone()));
    }
    for p in prompts {
        for (i, text) in &p.faces {
            jobs.push((keys::face(&p.sample_id, *i), text.clone()));
        }
        for (i, text) in &p.identities {
            jobs.push((keys::identity(&p.sample_id, *i), text.clone()));
        }
    }
    let vectors = exec.try_map(&jobs, |(_, text)| toy_encode_text(text, seed, dim))?;
    let mut store = FeatureStore::new(dim);
    for ((key, _), v) in jobs.into_iter().zip(vectors) {
        store.insert_f64(key, &v)?;
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub stats: datamodel::DatasetStats,
    pub missing_gold: Vec<String>,
    pub empty_er: Vec<String>,
    pub samples_kept: usize,
    pub entities_kept: usize,
}

/// Validates a dataset, drops unusable records and writes the cleaned files.
pub fn run_prepare(samples_path: &Path, entities_path: &Path, out_dir: &Path) -> Result<PrepareReport> {
    let samples = datamodel::load_samples(samples_path)?;
    let entities = datamodel::load_entities(entities_path)?;
    let report = datamodel::validate_dataset(&samples, &entities);
    let (samples, entities) = datamodel::apply_drops(samples, entities, &report);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    datamodel::write_jsonl(&out_dir.join("samples.jsonl"), &samples)?;
    datamodel::write_jsonl(&out_dir.join("entities.jsonl"), &entities)?;
    let out = PrepareReport {
        stats: datamodel::compute_stats(&samples, &entities),
        missing_gold: report.missing_gold.clone(),
        empty_er: report.empty_er.clone(),
        samples_kept: samples.len(),
        entities_kept: entities.len(),
    };
    write_json(&out_dir.join("prepare_report.json"), &out)?;
    Ok(out)
}

pub fn write_report(path: &Path, value: &impl Serialize) -> Result<()> {
    write_json(path, value)
}
