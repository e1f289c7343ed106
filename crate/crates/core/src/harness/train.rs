//! The training loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::{EntityTable, PreparedSplit};
use super::eval::evaluate;
use super::optim::{AdamW, AdamWConfig};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::{Dropout, ModelParams};
use crate::objectives::{batch_objective, sample_negatives, TrainExample};
use crate::tensor::Matrix;

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub l_f: f64,
    pub l_c: f64,
    pub l_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub topk: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best dev T@1 (earliest on ties), or the final
    /// parameters when there is no dev split.
    pub best: Checkpoint,
    pub final_params: ModelParams,
    pub losses: Vec<LossRecord>,
    pub evals: Vec<EvalRecord>,
    pub steps: usize,
    pub stopped_early: bool,
}

fn exec_for(cfg: &RunConfig) -> Exec {
    if cfg.parallel_eval {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

/// Keeps the best dev checkpoint and the patience counter.
struct Selector<'c> {
    cfg: &'c RunConfig,
    best: Option<(f64, Checkpoint)>,
    since_best: usize,
}

impl Selector<'_> {
    /// Returns true when patience is exhausted.
    fn observe(&mut self, params: &ModelParams, step: usize, topk: &BTreeMap<usize, f64>) -> bool {
        let t1 = topk.get(&1).copied().unwrap_or(0.0);
        let improved = self.best.as_ref().is_none_or(|(b, _)| t1 > *b);
        if improved {
            self.best = Some((t1, Checkpoint::new(params, step, topk.clone(), self.cfg)));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.cfg.patience > 0 && self.since_best >= self.cfg.patience
    }
}

/// Trains from a fresh initialization. Every loss record is also written to
/// `log` as one JSON line when given.
pub fn train(
    cfg: &RunConfig,
    train_split: &PreparedSplit,
    dev: Option<&PreparedSplit>,
    table: &EntityTable,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_split.len() < 2 {
        return Err(Error::InvalidInput("training needs at least two samples".into()));
    }
    if table.len() < 2 {
        return Err(Error::InvalidInput("training needs at least two entities".into()));
    }
    let dims = cfg.dims(table.raw().cols());
    let mut params = ModelParams::init(dims, cfg.init(), cfg.seed)?;
    let shapes: Vec<(usize, usize)> = params.named_tensors().iter().map(|(_, m)| m.shape()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        },
        &shapes,
    );
    let loss_cfg = cfg.loss();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let exec = exec_for(cfg);
    let mut selector = Selector { cfg, best: None, since_best: 0 };
    let mut losses = Vec::new();
    let mut evals = Vec::new();
    let mut step = 0;
    let mut last_eval = None;
    let mut stopped_early = false;

    let candidate_qids: Vec<Vec<String>> =
        train_split.samples.iter().map(|s| s.candidates.iter().map(|&r| table.qid(r).to_string()).collect()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_split.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let golds: Vec<&str> = chunk.iter().map(|&i| train_split.samples[i].gold_qid.as_str()).collect();
            // Entity rows used by the batch, in first-use order.
            let mut rows: Vec<usize> = Vec::new();
            let local = |r: usize, rows: &mut Vec<usize>| match rows.iter().position(|&x| x == r) {
                Some(p) => p,
                None => {
                    rows.push(r);
                    rows.len() - 1
                }
            };
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train_split.samples[i];
                let negs = sample_negatives(&s.gold_qid, &candidate_qids[i], &golds, &loss_cfg, &mut rng);
                let mut neg_rows: Vec<usize> = negs.all().filter_map(|q| table.row(q)).collect();
                if neg_rows.is_empty() {
                    let mut r = rng.gen_range(0..table.len() - 1);
                    if r >= s.gold {
                        r += 1;
                    }
                    neg_rows.push(r);
                }
                let positive = local(s.gold, &mut rows);
                let negatives = neg_rows.into_iter().map(|r| local(r, &mut rows)).collect();
                batch.push(TrainExample { bundle: &s.bundle, positive, negatives, key: i as u64 });
            }
            let entity_raw = table.gather(&rows);
            let dropout = (cfg.dropout > 0.0)
                .then(|| Dropout { p: cfg.dropout, seed: cfg.seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) });

            let (values, grads) = {
                let mut g = Graph::new();
                let vars = params.bind(&mut g);
                let lv = batch_objective(&mut g, &vars, &batch, &entity_raw, &loss_cfg, dropout)?;
                let values = lv.values(&g);
                if !values.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: step + 1,
                        detail: format!("l_f={} l_c={} l_t={}", values.fine, values.coarse, values.triplet),
                    });
                }
                let gradients = g.backward(lv.total)?;
                let grads: Vec<Matrix> = vars.all().into_iter().zip(&shapes).map(|(v, &s)| gradients.get_or_zeros(v, s)).collect();
                (values, grads)
            };
            if let Some(bad) = grads.iter().position(|m| !m.is_finite()) {
                let name = params.named_tensors()[bad].0.clone();
                return Err(Error::NonFiniteLoss { step: step + 1, detail: format!("non-finite gradient for `{name}`") });
            }
            opt.step(&mut params.tensors_mut(), &grads)?;
            step += 1;

            let record = LossRecord { step, epoch, loss: values.total, l_f: values.fine, l_c: values.coarse, l_t: values.triplet };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(w, "{line}").map_err(|e| Error::io("loss log", e))?;
            }
            losses.push(record);

            if let Some(dev) = dev {
                if step % cfg.eval_every == 0 {
                    let ev = evaluate(&params, dev, table, exec)?;
                    log::info!("step {step}: dev T@1 {:.4}", ev.topk.get(&1).copied().unwrap_or(0.0));
                    evals.push(EvalRecord { step, topk: ev.topk.clone() });
                    last_eval = Some(step);
                    if selector.observe(&params, step, &ev.topk) {
                        stopped_early = true;
                        break 'epochs;
                    }
                }
            }
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
        }
    }

    if let Some(dev) = dev {
        if last_eval != Some(step) {
            let ev = evaluate(&params, dev, table, exec)?;
            evals.push(EvalRecord { step, topk: ev.topk.clone() });
            selector.observe(&params, step, &ev.topk);
        }
    }
    let best = match selector.best {
        Some((_, c)) => c,
        None => Checkpoint::new(&params, step, BTreeMap::new(), cfg),
    };
    Ok(TrainOutcome { best, final_params: params, losses, evals, steps: step, stopped_early })
}
