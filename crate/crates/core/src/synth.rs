//! Synthetic benchmarks with planted structure.
//!
//! Every entity gets a random unit vector as its entity-representation
//! embedding. A sample's mention, text, object and face features are noisy
//! copies of its gold entity's vector, so a model that learns to pool the
//! views can recover the gold among name-retrieved candidates.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{self, EntityRecord, ErSource, MentionSample};
use crate::encoders::{keys, FeatureStore};
use crate::error::{Error, Result};
use crate::harness::RunConfig;
use crate::tensor::normalized;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub entities: usize,
    pub dim: usize,
    /// Standard deviation of the per-component noise added to every view.
    pub noise: f64,
    pub train_per_entity: usize,
    pub dev_per_entity: usize,
    pub test_per_entity: usize,
    /// Random object rows added next to the gold object.
    pub distractor_objects: usize,
    /// Share of samples that carry a face row for the gold object.
    pub face_rate: f64,
    /// Entities sharing a surname.
    pub family_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            dim: 32,
            noise: 0.3,
            train_per_entity: 4,
            dev_per_entity: 1,
            test_per_entity: 1,
            distractor_objects: 2,
            face_rate: 0.5,
            family_size: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Every view carries its own gold entity's signal.
    Ranking,
    /// Entities come in same-name pairs whose mention and text features carry
    /// the pair's shared signal; only object and face rows identify the gold.
    SharedText,
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub entities: Vec<EntityRecord>,
    pub train: Vec<MentionSample>,
    pub dev: Vec<MentionSample>,
    pub test: Vec<MentionSample>,
    pub store: FeatureStore,
}

const SYLLABLES: &[&str] =
    &["ka", "lo", "mi", "ra", "ve", "to", "su", "na", "de", "po", "li", "ga", "ze", "bo", "fi", "mu", "sa", "te", "ri", "no"];

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w: String = (0..syllables).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
    if let Some(first) = w.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    w
}

/// Distinct "Given Family" names; consecutive groups of `family_size` share a
/// family name.
fn names(n: usize, family_size: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let mut family = word(rng, 3);
    while out.len() < n {
        if out.len() % family_size.max(1) == 0 {
            family = word(rng, 3);
        }
        let name = format!("{} {family}", word(rng, 2));
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

fn noisy(signal: &[f64], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = signal.iter().map(|x| x + noise.sample(rng)).collect();
    normalized(&v).unwrap_or_else(|| signal.to_vec())
}

/// Surface form of a mention: the full name, the family name alone, or the
/// full name with one character dropped.
fn mention_form(name: &str, rng: &mut ChaCha8Rng) -> String {
    let u: f64 = rng.gen();
    if u < 0.5 {
        name.to_string()
    } else if u < 0.75 {
        name.rsplit(' ').next().unwrap_or(name).to_string()
    } else {
        let chars: Vec<char> = name.chars().collect();
        let drop = rng.gen_range(0..chars.len());
        chars.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, c)| c).collect()
    }
}

pub fn generate(kind: SynthKind, cfg: &SynthConfig) -> Result<SynthBenchmark> {
    if cfg.entities < 2 || cfg.dim == 0 {
        return Err(Error::Config("a synthetic benchmark needs at least two entities and a positive dim".into()));
    }
    if kind == SynthKind::SharedText && !cfg.entities.is_multiple_of(2) {
        return Err(Error::Config("the shared-text benchmark needs an even entity count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;

    let mut entity_names = names(cfg.entities, cfg.family_size, &mut rng);
    if kind == SynthKind::SharedText {
        for i in (0..cfg.entities).step_by(2) {
            entity_names[i + 1] = entity_names[i].clone();
        }
    }
    let vectors: Vec<Vec<f64>> = (0..cfg.entities).map(|_| random_unit(cfg.dim, &mut rng)).collect();
    let mut store = FeatureStore::new(cfg.dim);
    let mut entities = Vec::with_capacity(cfg.entities);
    for (i, name) in entity_names.iter().enumerate() {
        let qid = format!("Q{}", 1000 + i);
        store.insert_f64(keys::entity(&qid), &vectors[i])?;
        entities.push(EntityRecord {
            qid,
            name: name.clone(),
            type_tag: None,
            er_text: format!("{name} is a synthetic entity."),
            er_source: ErSource::Static,
        });
    }

    let shared: Vec<Vec<f64>> = match kind {
        SynthKind::Ranking => vectors.clone(),
        SynthKind::SharedText => (0..cfg.entities)
            .map(|i| {
                let (a, b) = (&vectors[i & !1], &vectors[i | 1]);
                let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                normalized(&sum).unwrap_or_else(|| a.clone())
            })
            .collect(),
    };

    let mut splits: [Vec<MentionSample>; 3] = Default::default();
    let per = [cfg.train_per_entity, cfg.dev_per_entity, cfg.test_per_entity];
    let split_names = ["train", "dev", "test"];
    for (e, entity) in entities.iter().enumerate() {
        for (s, &count) in per.iter().enumerate() {
            for j in 0..count {
                let sample_id = format!("{}-{}-{j}", split_names[s], entity.qid);
                let image_ref = format!("img-{sample_id}");
                store.insert_f64(keys::mention(&sample_id), &noisy(&shared[e], &noise, &mut rng))?;
                store.insert_f64(keys::text(&sample_id), &noisy(&shared[e], &noise, &mut rng))?;
                let l = 1 + cfg.distractor_objects;
                let gold_slot = rng.gen_range(0..l);
                for o in 0..l {
                    let row = if o == gold_slot { noisy(&vectors[e], &noise, &mut rng) } else { random_unit(cfg.dim, &mut rng) };
                    store.insert_f64(keys::object(&image_ref, o), &row)?;
                }
                if rng.gen::<f64>() < cfg.face_rate {
                    store.insert_f64(keys::face(&sample_id, gold_slot), &noisy(&vectors[e], &noise, &mut rng))?;
                }
                splits[s].push(MentionSample {
                    sample_id,
                    mention: mention_form(&entity.name, &mut rng),
                    text: format!("A photo of {}.", entity.name),
                    image_ref: Some(image_ref),
                    gold_qid: entity.qid.clone(),
                    provided_candidates: None,
                    mention_type: None,
                });
            }
        }
    }
    let [train, dev, test] = splits;
    Ok(SynthBenchmark { entities, train, dev, test, store })
}

impl SynthBenchmark {
    /// Writes `entities.jsonl`, `{train,dev,test}.jsonl` and `features.mmfs`
    /// into `dir` and returns a run config pointing at them.
    pub fn write(&self, dir: &Path, base: &RunConfig) -> Result<RunConfig> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        datamodel::write_jsonl(&dir.join("entities.jsonl"), &self.entities)?;
        datamodel::write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        datamodel::write_jsonl(&dir.join("dev.jsonl"), &self.dev)?;
        datamodel::write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        self.store.save(&dir.join("features.mmfs"))?;
        Ok(RunConfig {
            entities: Some(dir.join("entities.jsonl")),
            train_samples: Some(dir.join("train.jsonl")),
            dev_samples: Some(dir.join("dev.jsonl")),
            test_samples: Some(dir.join("test.jsonl")),
            features: vec![dir.join("features.mmfs")],
            output_dir: Some(dir.join("run")),
            ..base.clone()
        })
    }
}

/// Training settings sized for the synthetic benchmarks on one CPU core.
pub fn desk_config(dim: usize, seed: u64) -> RunConfig {
    RunConfig {
        d: dim,
        heads: 4,
        learning_rate: 3e-3,
        weight_decay: 1e-3,
        batch_size: 32,
        epochs: 300,
        eval_every: 100,
        dropout: 0.1,
        max_steps: 2000,
        patience: 5,
        lambda: 20,
        seed,
        ..RunConfig::default()
    }
}
