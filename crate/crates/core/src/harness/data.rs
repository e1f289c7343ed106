//! Turns samples, entities and stored features into model inputs.

use std::collections::HashMap;

use crate::datamodel::{EntityRecord, MentionSample};
use crate::encoders::{keys, FeatureStore};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::FeatureBundle;
use crate::retrieval::{generate_candidates, generate_candidates_typed, EntityIndex};
use crate::tensor::Matrix;

/// Raw entity-representation embeddings, one row per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityTable {
    qids: Vec<String>,
    names: Vec<String>,
    rows: HashMap<String, usize>,
    raw: Matrix,
}

impl EntityTable {
    pub fn from_store(entities: &[EntityRecord], store: &FeatureStore) -> Result<Self> {
        let mut qids = Vec::with_capacity(entities.len());
        let mut names = Vec::with_capacity(entities.len());
        let mut rows = HashMap::with_capacity(entities.len());
        let mut data = Vec::with_capacity(entities.len() * store.dim());
        for e in entities {
            let key = keys::entity(&e.qid);
            let v = store.get_f64(&key).ok_or(Error::MissingFeature(key))?;
            if rows.insert(e.qid.clone(), qids.len()).is_some() {
                return Err(Error::InvalidInput(format!("duplicate entity `{}`", e.qid)));
            }
            qids.push(e.qid.clone());
            names.push(e.name.clone());
            data.extend(v);
        }
        let raw = Matrix::from_vec(qids.len(), store.dim(), data)?;
        Ok(Self { qids, names, rows, raw })
    }

    pub fn len(&self) -> usize {
        self.qids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qids.is_empty()
    }

    pub fn row(&self, qid: &str) -> Option<usize> {
        self.rows.get(qid).copied()
    }

    pub fn qid(&self, row: usize) -> &str {
        &self.qids[row]
    }

    pub fn name(&self, row: usize) -> &str {
        &self.names[row]
    }

    pub fn raw(&self) -> &Matrix {
        &self.raw
    }

    /// Raw rows for the given entity rows, in order.
    pub fn gather(&self, rows: &[usize]) -> Matrix {
        let d = self.raw.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.raw.row(r));
        }
        Matrix::from_vec(rows.len(), d, data).expect("gathered shape")
    }
}

fn required(store: &FeatureStore, key: String) -> Result<Vec<f64>> {
    store.get_f64(&key).ok_or(Error::MissingFeature(key))
}

/// Rows stored under `{prefix}{index}`, ordered by numeric index.
fn indexed_rows(store: &FeatureStore, prefix: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (key, v) in store.with_prefix(prefix) {
        let suffix = &key[prefix.len()..];
        let i: usize = suffix.parse().map_err(|_| Error::InvalidInput(format!("feature key `{key}` does not end in a row index")))?;
        rows.push((i, v.iter().map(|&x| x as f64).collect()));
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows)
}

fn stack(rows: Vec<Vec<f64>>, d: usize) -> Result<Matrix> {
    Matrix::from_rows(&rows, d)
}

/// Reads one sample's features. Mention and text are required; visual and
/// attribute rows are optional. Object rows must be numbered `0..l`.
pub fn assemble_bundle(sample: &MentionSample, store: &FeatureStore) -> Result<FeatureBundle> {
    let d = store.dim();
    let mention = required(store, keys::mention(&sample.sample_id))?;
    let text = required(store, keys::text(&sample.sample_id))?;
    let mut bundle = FeatureBundle::text_only(mention, text);
    let Some(image_ref) = &sample.image_ref else {
        return Ok(bundle);
    };
    bundle.image = store.get_f64(&keys::image(image_ref));

    let objects = indexed_rows(store, &keys::object_prefix(image_ref))?;
    for (expect, (i, _)) in objects.iter().enumerate() {
        if *i != expect {
            return Err(Error::MissingFeature(keys::object(image_ref, expect)));
        }
    }
    bundle.objects = stack(objects.into_iter().map(|(_, v)| v).collect(), d)?;

    let faces = indexed_rows(store, &keys::face_prefix(&sample.sample_id))?;
    bundle.face_objects = faces.iter().map(|(i, _)| *i).collect();
    bundle.faces = stack(faces.into_iter().map(|(_, v)| v).collect(), d)?;

    let identities: Vec<Vec<f64>> =
        store.with_prefix(&keys::identity_prefix(&sample.sample_id)).map(|(_, v)| v.iter().map(|&x| x as f64).collect()).collect();
    bundle.identities = stack(identities, d)?;
    bundle.validate(d)?;
    Ok(bundle)
}

/// A sample ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub sample_id: String,
    pub gold_qid: String,
    /// Entity-table row of the gold entity.
    pub gold: usize,
    /// Entity-table rows of the retrieved candidates, in retrieval order.
    pub candidates: Vec<usize>,
    pub bundle: FeatureBundle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSplit {
    pub name: String,
    pub samples: Vec<PreparedSample>,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Share of samples whose gold entity was retrieved.
    pub fn candidate_recall(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let hits = self.samples.iter().filter(|s| s.candidates.contains(&s.gold)).count();
        hits as f64 / self.samples.len() as f64
    }
}

/// Candidate qids for one sample: provided-first typed retrieval when the
/// sample carries provided candidates or a type, plain retrieval otherwise.
pub fn sample_candidates(sample: &MentionSample, index: &EntityIndex, lambda: usize) -> Vec<String> {
    if sample.provided_candidates.is_none() && sample.mention_type.is_none() {
        return generate_candidates(&sample.mention, index, lambda).qids;
    }
    let provided = sample.provided_candidates.as_deref().unwrap_or(&[]);
    generate_candidates_typed(&sample.mention, sample.mention_type.as_deref(), provided, index, lambda).qids
}

/// Retrieves candidates and reads features for every sample.
pub fn prepare_split(
    name: &str,
    samples: &[MentionSample],
    table: &EntityTable,
    index: &EntityIndex,
    store: &FeatureStore,
    lambda: usize,
    text_only: bool,
    exec: Exec,
) -> Result<PreparedSplit> {
    let prepared = exec.try_map(samples, |s| {
        let gold = table.row(&s.gold_qid).ok_or_else(|| {
            Error::InvalidInput(format!("sample `{}`: gold entity `{}` is not in the entity table", s.sample_id, s.gold_qid))
        })?;
        let candidates = sample_candidates(s, index, lambda)
            .iter()
            .map(|q| table.row(q).ok_or_else(|| Error::MissingFeature(keys::entity(q))))
            .collect::<Result<Vec<_>>>()?;
        let mut bundle = assemble_bundle(s, store)?;
        if text_only {
            bundle.strip_visual();
        }
        Ok::<_, Error>(PreparedSample { sample_id: s.sample_id.clone(), gold_qid: s.gold_qid.clone(), gold, candidates, bundle })
    })?;
    Ok(PreparedSplit { name: name.to_string(), samples: prepared })
}
