//! Training objectives: mean-shifted contrastive alignment at two
//! granularities, the margin ranking loss on the joint query, their weighted
//! sum, and negative sampling.
//!
//! The contrastive loss for paired rows `A_k <-> B_k` stacks the `2B` rows,
//! subtracts the batch mean, L2-normalizes, and for every anchor `i` with
//! partner `p(i)` takes
//!
//! ```text
//! loss_i = -log( exp(z_i . z_p(i) / tau) / sum_{j != i} exp(z_i . z_j / tau) )
//! ```
//!
//! averaged over all `2B` anchors.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{self, Dropout, FeatureBundle, ForwardOptions, ModelParams, ModelVars, SampleVars};
use crate::tensor::Matrix;

/// Rows whose norm after mean shifting falls below this get a small fixed
/// perturbation so they still have a direction.
const JITTER_NORM: f64 = 1e-8;
const JITTER_SCALE: f64 = 1e-6;
const JITTER_SEED: u64 = 0x6a69_7474_6572;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    /// Weight of the coarse-level contrastive term.
    pub alpha: f64,
    /// Weight of the ranking term.
    pub beta: f64,
    pub margin: f64,
    pub n_hard: usize,
    pub n_inbatch: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.1, alpha: 1.0, beta: 10.0, margin: 0.5, n_hard: 4, n_inbatch: 1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.margin >= 0.0) || !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("margin and loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Contrastive loss over paired rows of `a` and `b` (both `B x d`).
pub fn msc_loss_var(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    let (ba, da) = g.shape(a);
    let (bb, db) = g.shape(b);
    if (ba, da) != (bb, db) {
        return Err(Error::Shape(format!("contrastive pairs {ba}x{da} vs {bb}x{db}")));
    }
    if ba < 2 {
        return Err(Error::InvalidInput(format!("contrastive loss needs at least 2 pairs, got {ba}")));
    }
    let n = 2 * ba;
    let stacked = g.stack_rows(&[a, b])?;
    let mean = g.mean_rows(stacked)?;
    let mut shifted = g.sub_row(stacked, mean)?;

    let low: Vec<usize> = (0..n).filter(|&i| crate::tensor::l2_norm(g.value(shifted).row(i)) < JITTER_NORM).collect();
    if !low.is_empty() {
        let mut jitter = Matrix::zeros(n, da);
        for &i in &low {
            let mut rng = ChaCha8Rng::seed_from_u64(JITTER_SEED ^ i as u64);
            for v in jitter.row_mut(i) {
                *v = (rng.gen::<f64>() * 2.0 - 1.0) * JITTER_SCALE;
            }
        }
        shifted = g.add_const(shifted, &jitter)?;
    }

    let z = g.row_normalize(shifted);
    let zt = g.transpose(z);
    let sim = g.matmul(z, zt)?;
    let logits = g.scale(sim, 1.0 / tau);
    let targets: Vec<usize> = (0..n).map(|i| if i < ba { i + ba } else { i - ba }).collect();
    g.contrastive_ce(logits, &targets)
}

pub fn msc_loss(a: &Matrix, b: &Matrix, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let av = g.constant_ref(a);
    let bv = g.constant_ref(b);
    let l = msc_loss_var(&mut g, av, bv, tau)?;
    Ok(g.scalar(l))
}

/// Aligns text-enhanced with vision-enhanced mention features across the batch.
pub fn coarse_loss_var(g: &mut Graph, outs: &[SampleVars], tau: f64) -> Result<Var> {
    if outs.len() < 2 {
        return Err(Error::InvalidInput(format!("coarse loss needs a batch of at least 2, got {}", outs.len())));
    }
    let mt: Vec<Var> = outs.iter().map(|o| o.m_t).collect();
    let mv: Vec<Var> = outs.iter().map(|o| o.m_v).collect();
    let a = g.stack_rows(&mt)?;
    let b = g.stack_rows(&mv)?;
    msc_loss_var(g, a, b, tau)
}

/// Aligns face-prompt rows with the object rows they describe, pooled over
/// the batch. `None` when fewer than two pairs exist.
pub fn fine_loss_var(g: &mut Graph, outs: &[SampleVars], tau: f64) -> Result<Option<Var>> {
    let pairs: Vec<(Var, Var)> = outs.iter().filter_map(|o| o.face_object_pairs).collect();
    let count: usize = pairs.iter().map(|&(f, _)| g.shape(f).0).sum();
    if count < 2 {
        log::debug!("fine-level loss skipped: {count} face/object pairs in batch");
        return Ok(None);
    }
    let faces: Vec<Var> = pairs.iter().map(|p| p.0).collect();
    let objects: Vec<Var> = pairs.iter().map(|p| p.1).collect();
    let f = g.stack_rows(&faces)?;
    let d = g.stack_rows(&objects)?;
    msc_loss_var(g, f, d, tau).map(Some)
}

pub fn coarse_loss(outputs: &[fusion::FusionOutput], tau: f64) -> Result<f64> {
    let rows = |f: fn(&fusion::FusionOutput) -> &Vec<f64>| -> Result<Matrix> {
        let d = outputs.first().map(|o| f(o).len()).unwrap_or(0);
        Matrix::from_rows(&outputs.iter().map(|o| f(o).clone()).collect::<Vec<_>>(), d)
    };
    if outputs.len() < 2 {
        return Err(Error::InvalidInput(format!("coarse loss needs a batch of at least 2, got {}", outputs.len())));
    }
    msc_loss(&rows(|o| &o.m_t)?, &rows(|o| &o.m_v)?, tau)
}

/// Fine-level loss of a batch under `params` (eval mode). Zero when skipped.
pub fn fine_loss(bundles: &[FeatureBundle], params: &ModelParams, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let mut outs = Vec::with_capacity(bundles.len());
    for b in bundles {
        outs.push(fusion::forward_sample(&mut g, &vars, b, &ForwardOptions::eval())?);
    }
    Ok(match fine_loss_var(&mut g, &outs, tau)? {
        Some(v) => g.scalar(v),
        None => 0.0,
    })
}

/// Mean hinge over negatives from precomputed similarities.
pub fn triplet_from_scores(pos: f64, negs: &[f64], margin: f64) -> Result<f64> {
    if negs.is_empty() {
        return Err(Error::InvalidInput("triplet loss needs at least one negative".into()));
    }
    Ok(negs.iter().map(|&n| (n - pos + margin).max(0.0)).sum::<f64>() / negs.len() as f64)
}

/// Ranking loss for one query: every negative should score at least `margin`
/// below the positive.
pub fn triplet_loss(g: &[f64], pos: &[f64], negs: &[Vec<f64>], margin: f64) -> Result<f64> {
    let p = fusion::score(g, pos).0;
    let n: Vec<f64> = negs.iter().map(|e| fusion::score(g, e).0).collect();
    triplet_from_scores(p, &n, margin)
}

pub fn total_loss(fine: f64, coarse: f64, triplet: f64, cfg: &LossConfig) -> f64 {
    fine + cfg.alpha * coarse + cfg.beta * triplet
}

/// One training query with entity rows given as indices into the batch's
/// raw entity matrix.
#[derive(Debug, Clone)]
pub struct TrainExample<'b> {
    pub bundle: &'b FeatureBundle,
    pub positive: usize,
    pub negatives: Vec<usize>,
    /// Identifies the sample for dropout masks.
    pub key: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub fine: Option<Var>,
    pub coarse: Var,
    pub triplet: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub fine: f64,
    pub coarse: f64,
    pub triplet: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.scalar(self.total),
            fine: self.fine.map(|v| g.scalar(v)).unwrap_or(0.0),
            coarse: g.scalar(self.coarse),
            triplet: g.scalar(self.triplet),
        }
    }
}

/// Builds the full weighted objective for a batch.
pub fn batch_objective(
    g: &mut Graph,
    vars: &ModelVars,
    batch: &[TrainExample],
    entity_raw: &Matrix,
    cfg: &LossConfig,
    dropout: Option<Dropout>,
) -> Result<LossVars> {
    let mut outs = Vec::with_capacity(batch.len());
    for ex in batch {
        let opts = ForwardOptions { dropout, sample_key: ex.key };
        outs.push(fusion::forward_sample(g, vars, ex.bundle, &opts)?);
    }
    let fine = fine_loss_var(g, &outs, cfg.tau)?;
    let coarse = coarse_loss_var(g, &outs, cfg.tau)?;

    let joint: Vec<Var> = outs.iter().map(|o| o.g).collect();
    let q = g.stack_rows(&joint)?;
    let q = g.row_normalize(q);
    let e_raw = g.constant(entity_raw.clone());
    let e = fusion::encode_entities_var(g, e_raw, vars)?;
    let et = g.transpose(e);
    let scores = g.matmul(q, et)?;
    let pos: Vec<usize> = batch.iter().map(|ex| ex.positive).collect();
    let negs: Vec<Vec<usize>> = batch.iter().map(|ex| ex.negatives.clone()).collect();
    let triplet = g.triplet_hinge(scores, &pos, &negs, cfg.margin)?;

    let mut terms = vec![(coarse, cfg.alpha), (triplet, cfg.beta)];
    if let Some(f) = fine {
        terms.push((f, 1.0));
    }
    let total = g.lin_comb(&terms)?;
    Ok(LossVars { total, fine, coarse, triplet })
}

/// Negative entity ids for one training query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSet {
    pub hard: Vec<String>,
    pub in_batch: Vec<String>,
}

impl NegativeSet {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.hard.iter().chain(&self.in_batch)
    }
}

/// Draws hard negatives from the retrieved candidates and in-batch negatives
/// from the golds of the other batch members. Sampled hard negatives keep
/// their candidate order.
pub fn sample_negatives<R: Rng>(gold: &str, candidates: &[String], other_golds: &[&str], cfg: &LossConfig, rng: &mut R) -> NegativeSet {
    let mut seen = BTreeSet::new();
    let pool: Vec<&String> = candidates.iter().filter(|c| c.as_str() != gold && seen.insert(c.as_str())).collect();
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), cfg.n_hard.min(pool.len())).into_vec();
    picked.sort_unstable();
    let hard: Vec<String> = picked.into_iter().map(|i| pool[i].clone()).collect();

    let mut seen = BTreeSet::new();
    let others: Vec<&str> = other_golds.iter().copied().filter(|q| *q != gold && seen.insert(*q)).collect();
    let in_batch = others.choose_multiple(rng, cfg.n_inbatch.min(others.len())).map(|s| s.to_string()).collect();
    NegativeSet { hard, in_batch }
}
