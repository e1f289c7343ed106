//! Evaluation, metric tables and single-sample linking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::data::{EntityTable, PreparedSplit};
use crate::error::Result;
use crate::exec::Exec;
use crate::fusion::{self, FeatureBundle, ModelParams};
use crate::retrieval::{self, RankResult, DEFAULT_KS};
use crate::tensor::Matrix;

/// Normalized entity embeddings for a subset of entity-table rows.
pub struct EntityEmbeddings {
    slot: BTreeMap<usize, usize>,
    matrix: Matrix,
}

impl EntityEmbeddings {
    pub fn encode(rows: impl IntoIterator<Item = usize>, table: &EntityTable, params: &ModelParams) -> Result<Self> {
        let unique: BTreeSet<usize> = rows.into_iter().collect();
        let order: Vec<usize> = unique.into_iter().collect();
        let matrix = fusion::encode_entity_matrix(&table.gather(&order), params)?;
        let slot = order.into_iter().enumerate().map(|(i, r)| (r, i)).collect();
        Ok(Self { slot, matrix })
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.slot.get(&row).map(|&i| self.matrix.row(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub results: Vec<RankResult>,
    pub topk: BTreeMap<usize, f64>,
}

/// Ranks every sample's candidates by cosine to its joint query (no dropout).
pub fn evaluate(params: &ModelParams, split: &PreparedSplit, table: &EntityTable, exec: Exec) -> Result<Evaluation> {
    let embeddings = EntityEmbeddings::encode(split.samples.iter().flat_map(|s| s.candidates.iter().copied()), table, params)?;
    let results = exec.try_map(&split.samples, |s| {
        let q = fusion::query_embedding(&s.bundle, params)?;
        let cands: Vec<(&str, &[f64])> = s.candidates.iter().map(|&r| (table.qid(r), embeddings.get(r).expect("encoded above"))).collect();
        Ok::<_, crate::Error>(retrieval::rank(&s.sample_id, &q, &cands, &s.gold_qid))
    })?;
    let topk = retrieval::topk_accuracy(&results, &DEFAULT_KS)?;
    Ok(Evaluation { results, topk })
}

/// One row of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub dataset: String,
    pub split: String,
    pub samples: usize,
    pub lambda: usize,
    pub config_hash: String,
    /// Accuracy per cutoff k, keyed `"T@k"`.
    pub accuracy: BTreeMap<String, f64>,
}

impl MetricsTable {
    pub fn new(dataset: &str, split: &str, samples: usize, lambda: usize, config_hash: &str, topk: &BTreeMap<usize, f64>) -> Self {
        Self {
            dataset: dataset.to_string(),
            split: split.to_string(),
            samples,
            lambda,
            config_hash: config_hash.to_string(),
            accuracy: topk.iter().map(|(k, v)| (format!("T@{k}"), *v)).collect(),
        }
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        self.accuracy.get(&format!("T@{k}")).copied()
    }
}

/// Fixed-width text rendering of several metric rows, accuracies in percent.
pub fn render_table(rows: &[MetricsTable]) -> String {
    let mut ks: Vec<usize> = rows
        .iter()
        .flat_map(|r| r.accuracy.keys().filter_map(|k| k.strip_prefix("T@")?.parse().ok()))
        .collect::<BTreeSet<usize>>()
        .into_iter()
        .collect();
    if ks.is_empty() {
        ks = DEFAULT_KS.to_vec();
    }
    let mut out = String::new();
    let _ = write!(out, "{:<16} {:<8} {:>8} {:>6}", "dataset", "split", "samples", "lambda");
    for k in &ks {
        let _ = write!(out, " {:>7}", format!("T@{k}"));
    }
    let _ = writeln!(out, "  config");
    for r in rows {
        let _ = write!(out, "{:<16} {:<8} {:>8} {:>6}", r.dataset, r.split, r.samples, r.lambda);
        for &k in &ks {
            match r.at(k) {
                Some(v) => {
                    let _ = write!(out, " {:>7.2}", 100.0 * v);
                }
                None => {
                    let _ = write!(out, " {:>7}", "-");
                }
            }
        }
        let _ = writeln!(out, "  {}", r.config_hash);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedCandidate {
    pub qid: String,
    pub name: String,
    pub score: f64,
}

/// Scores one sample's candidates, best first.
pub fn link(params: &ModelParams, bundle: &FeatureBundle, candidates: &[usize], table: &EntityTable) -> Result<Vec<LinkedCandidate>> {
    bundle.validate(params.dims.d_in)?;
    let q = fusion::query_embedding(bundle, params)?;
    let embeddings = EntityEmbeddings::encode(candidates.iter().copied(), table, params)?;
    let cands: Vec<(&str, &[f64])> = candidates.iter().map(|&r| (table.qid(r), embeddings.get(r).expect("encoded above"))).collect();
    let ranked = retrieval::rank("", &q, &cands, "");
    Ok(ranked
        .ranked
        .into_iter()
        .map(|(qid, score)| {
            let name = table.row(&qid).map(|r| table.name(r).to_string()).unwrap_or_default();
            LinkedCandidate { qid, name, score }
        })
        .collect())
}

/// `Name 0.93` per line, at most `k` lines.
pub fn format_ranking(ranked: &[LinkedCandidate], k: usize) -> String {
    ranked.iter().take(k).map(|c| format!("{} {:.2}\n", c.name, c.score)).collect()
}
