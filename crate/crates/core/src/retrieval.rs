//! Candidate generation by name similarity, cosine ranking and top-k accuracy.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::datamodel::EntityRecord;
use crate::error::{Error, Result};
use crate::fusion;

pub const DEFAULT_LAMBDA: usize = 100;
pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

/// `1 - levenshtein / max_len` over casefolded characters; two empty strings
/// are identical.
pub fn name_similarity(a: &str, b: &str) -> f64 {
    folded_similarity(&a.to_lowercase(), &b.to_lowercase())
}

/// [`name_similarity`] for strings that are already casefolded.
fn folded_similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(a, b) as f64 / max_len as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub qid: String,
    pub name: String,
    pub folded: String,
    pub type_tag: Option<String>,
}

/// Immutable name index over the entity collection, entries sorted by qid.
#[derive(Debug, Clone, Default)]
pub struct EntityIndex {
    entries: Vec<IndexEntry>,
    partitions: BTreeMap<String, Vec<usize>>,
}

impl EntityIndex {
    pub fn build(entities: &[EntityRecord]) -> Result<Self> {
        let mut entries: Vec<IndexEntry> = entities
            .iter()
            .map(|e| IndexEntry { qid: e.qid.clone(), name: e.name.clone(), folded: e.name.to_lowercase(), type_tag: e.type_tag.clone() })
            .collect();
        entries.sort_by(|a, b| a.qid.cmp(&b.qid));
        if let Some(w) = entries.windows(2).find(|w| w[0].qid == w[1].qid) {
            return Err(Error::InvalidInput(format!("duplicate qid `{}` in entity index", w[0].qid)));
        }
        let mut partitions: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if let Some(t) = &e.type_tag {
                partitions.entry(t.clone()).or_default().push(i);
            }
        }
        Ok(Self { entries, partitions })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn partition(&self, type_tag: &str) -> Option<&[usize]> {
        self.partitions.get(type_tag).map(|v| v.as_slice())
    }

    pub fn partition_names(&self) -> impl Iterator<Item = &str> {
        self.partitions.keys().map(String::as_str)
    }

    pub fn get(&self, qid: &str) -> Option<&IndexEntry> {
        self.entries.binary_search_by(|e| e.qid.as_str().cmp(qid)).ok().map(|i| &self.entries[i])
    }
}

/// Retrieved candidates for one mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub qids: Vec<String>,
    /// Name similarity to the mention, aligned with `qids`.
    pub scores: Vec<f64>,
    /// Number of leading dataset-provided candidates; scores are
    /// non-increasing after this prefix.
    #[serde(default)]
    pub provided: usize,
    /// Set when a typed lookup fell back to the whole index.
    #[serde(default)]
    pub fell_back: bool,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.qids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qids.is_empty()
    }

    pub fn contains(&self, qid: &str) -> bool {
        self.qids.iter().any(|q| q == qid)
    }
}

fn by_score_then_qid(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

fn top_by_name<'a>(mention: &str, pool: impl Iterator<Item = &'a IndexEntry>, k: usize) -> Vec<(f64, &'a str)> {
    let folded = mention.to_lowercase();
    let mut scored: Vec<(f64, &str)> = pool.map(|e| (folded_similarity(&folded, &e.folded), e.qid.as_str())).collect();
    scored.sort_by(by_score_then_qid);
    scored.truncate(k);
    scored
}

/// Top-`lambda` entities by name similarity; ties by ascending qid.
pub fn generate_candidates(mention: &str, index: &EntityIndex, lambda: usize) -> CandidateSet {
    let top = top_by_name(mention, index.entries.iter(), lambda);
    CandidateSet {
        qids: top.iter().map(|(_, q)| q.to_string()).collect(),
        scores: top.iter().map(|(s, _)| *s).collect(),
        provided: 0,
        fell_back: false,
    }
}

/// Dataset-provided candidates first, then the best name matches from the
/// mention's type partition up to `lambda` in total.
pub fn generate_candidates_typed(
    mention: &str,
    type_tag: Option<&str>,
    provided: &[String],
    index: &EntityIndex,
    lambda: usize,
) -> CandidateSet {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut qids = Vec::new();
    let mut scores = Vec::new();
    for q in provided {
        if qids.len() == lambda {
            break;
        }
        if seen.insert(q.as_str()) {
            let s = index.get(q).map(|e| name_similarity(mention, &e.name)).unwrap_or(0.0);
            qids.push(q.clone());
            scores.push(s);
        }
    }
    let n_provided = qids.len();
    let partition = type_tag.and_then(|t| index.partition(t));
    let fell_back = partition.is_none();
    if fell_back {
        log::warn!("no entity partition for type {type_tag:?}; filling candidates of `{mention}` from the whole index");
    }
    let pool: Vec<&IndexEntry> = match partition {
        Some(ids) => ids.iter().map(|&i| &index.entries[i]).collect(),
        None => index.entries.iter().collect(),
    };
    let fill = top_by_name(mention, pool.into_iter().filter(|e| !seen.contains(e.qid.as_str())), lambda - n_provided);
    for (s, q) in fill {
        qids.push(q.to_string());
        scores.push(s);
    }
    CandidateSet { qids, scores, provided: n_provided, fell_back }
}

/// Candidates ordered by cosine to the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub sample_id: String,
    pub ranked: Vec<(String, f64)>,
    /// 1-based rank of the gold entity; `None` when it was not a candidate.
    pub gold_rank: Option<usize>,
}

impl RankResult {
    pub fn top(&self) -> Option<&str> {
        self.ranked.first().map(|(q, _)| q.as_str())
    }
}

/// Sorts candidates by cosine with `query` (descending, ties by ascending qid).
pub fn rank(sample_id: &str, query: &[f64], candidates: &[(&str, &[f64])], gold: &str) -> RankResult {
    let scored: Vec<(f64, &str)> = candidates.iter().map(|(q, e)| (fusion::score(query, e).0, *q)).collect();
    rank_scores(sample_id, scored, gold)
}

/// Ranking from precomputed cosines.
pub fn rank_scores(sample_id: &str, mut scored: Vec<(f64, &str)>, gold: &str) -> RankResult {
    scored.sort_by(by_score_then_qid);
    let gold_rank = scored.iter().position(|(_, q)| *q == gold).map(|p| p + 1);
    RankResult { sample_id: sample_id.to_string(), ranked: scored.into_iter().map(|(s, q)| (q.to_string(), s)).collect(), gold_rank }
}

/// Fraction of results with the gold ranked within `k`, for every `k`.
pub fn topk_accuracy(results: &[RankResult], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if results.is_empty() {
        return Err(Error::InvalidInput("top-k accuracy over zero results".into()));
    }
    let n = results.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = results.iter().filter(|r| r.gold_rank.is_some_and(|g| g <= k)).count();
            (k, hits as f64 / n)
        })
        .collect())
}
