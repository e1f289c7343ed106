//! Entity and mention records, newline-delimited JSON loading, validation
//! and corpus statistics.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoders::count_tokens;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErSource {
    /// Assembled from knowledge-base properties; no enhancement applied.
    Property,
    /// Knowledge-base page extract.
    Static,
    /// Language-model generated introduction.
    Dynamic,
}

/// A knowledge-base entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub qid: String,
    pub name: String,
    #[serde(default)]
    pub type_tag: Option<String>,
    /// Entity-representation text.
    #[serde(default)]
    pub er_text: String,
    pub er_source: ErSource,
}

/// One linking instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionSample {
    pub sample_id: String,
    pub mention: String,
    pub text: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub gold_qid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provided_candidates: Option<Vec<String>>,
    /// Category used to pick the entity partition when filling candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mention_type: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Distinct (text, image) contexts.
    pub samples: usize,
    pub entities: usize,
    /// Mention rows.
    pub mentions: usize,
    /// Mean token count per context, rounded to one decimal.
    pub mean_text_len: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Samples whose gold entity is not in the collection.
    pub missing_gold: Vec<String>,
    /// Entities without representation text; these are dropped before training.
    pub empty_er: Vec<String>,
    /// Samples with an empty mention string.
    pub empty_mention: Vec<String>,
}

impl ValidationReport {
    pub fn missing_gold_count(&self) -> usize {
        self.missing_gold.len()
    }

    pub fn empty_er_count(&self) -> usize {
        self.empty_er.len()
    }

    pub fn issue_count(&self) -> usize {
        self.missing_gold.len() + self.empty_er.len() + self.empty_mention.len()
    }

    pub fn is_clean(&self) -> bool {
        self.issue_count() == 0
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.to_path_buf(), line: line_no, message: e.to_string() })?;
        out.push((line_no, rec));
    }
    Ok(out)
}

fn require_nonempty(path: &Path, line: usize, field: &str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::Parse { path: path.to_path_buf(), line, message: format!("field `{field}` is empty") });
    }
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<MentionSample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, s) in read_jsonl::<MentionSample>(path)? {
        require_nonempty(path, line, "sample_id", &s.sample_id)?;
        require_nonempty(path, line, "gold_qid", &s.gold_qid)?;
        if !seen.insert(s.sample_id.clone()) {
            return Err(Error::Duplicate { path: path.to_path_buf(), line, kind: "sample_id", id: s.sample_id });
        }
        out.push(s);
    }
    Ok(out)
}

pub fn load_entities(path: &Path) -> Result<Vec<EntityRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, e) in read_jsonl::<EntityRecord>(path)? {
        require_nonempty(path, line, "qid", &e.qid)?;
        if !seen.insert(e.qid.clone()) {
            return Err(Error::Duplicate { path: path.to_path_buf(), line, kind: "qid", id: e.qid });
        }
        out.push(e);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn validate_dataset(samples: &[MentionSample], entities: &[EntityRecord]) -> ValidationReport {
    let qids: HashSet<&str> = entities.iter().map(|e| e.qid.as_str()).collect();
    ValidationReport {
        missing_gold: samples.iter().filter(|s| !qids.contains(s.gold_qid.as_str())).map(|s| s.sample_id.clone()).collect(),
        empty_er: entities.iter().filter(|e| e.er_text.trim().is_empty()).map(|e| e.qid.clone()).collect(),
        empty_mention: samples.iter().filter(|s| s.mention.is_empty()).map(|s| s.sample_id.clone()).collect(),
    }
}

/// Removes entities flagged for dropping and the samples that pointed at them.
pub fn apply_drops(
    samples: Vec<MentionSample>,
    entities: Vec<EntityRecord>,
    report: &ValidationReport,
) -> (Vec<MentionSample>, Vec<EntityRecord>) {
    let dropped: HashSet<&str> = report.empty_er.iter().map(String::as_str).collect();
    let missing: HashSet<&str> = report.missing_gold.iter().map(String::as_str).collect();
    let entities: Vec<_> = entities.into_iter().filter(|e| !dropped.contains(e.qid.as_str())).collect();
    let samples =
        samples.into_iter().filter(|s| !missing.contains(s.sample_id.as_str()) && !dropped.contains(s.gold_qid.as_str())).collect();
    (samples, entities)
}

pub fn compute_stats(samples: &[MentionSample], entities: &[EntityRecord]) -> DatasetStats {
    let contexts: BTreeSet<(&str, Option<&str>)> = samples.iter().map(|s| (s.text.as_str(), s.image_ref.as_deref())).collect();
    let total: usize = contexts.iter().map(|(t, _)| count_tokens(t)).sum();
    let mean = if contexts.is_empty() { 0.0 } else { total as f64 / contexts.len() as f64 };
    DatasetStats { samples: contexts.len(), entities: entities.len(), mentions: samples.len(), mean_text_len: (mean * 10.0).round() / 10.0 }
}
