//! Self-refinement preference learning.
//!
//! For every training motion `gt` with label `c`, candidates are ranked by
//! semantic reward against `c` within a pool made of `gt` and every motion
//! whose label differs from `c`. When `gt` misses the top-k, the best
//! scoring candidate becomes a hard negative and the model is trained to
//! prefer `gt` over it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, Tape, Tensor};
use crate::motion::{MotionSample, Representation};
use crate::nn::{rng, Adam, OptimConfig};
use crate::reward::{RewardModel, BACKBONE};

/// Top-k candidates for one label, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSet {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RetrievalSet {
    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }
}

/// Exact top-k of `candidates` by `scores[id]`, ties broken by lower id.
pub fn retrieve_topk(scores: &[f64], candidates: &[usize], k: usize) -> Result<RetrievalSet> {
    if candidates.is_empty() {
        return Err(Error::invalid("empty retrieval pool"));
    }
    if k == 0 || k > candidates.len() {
        return Err(Error::OutOfRange {
            what: "k",
            value: k as i64,
            valid: format!("[1, {}]", candidates.len()),
        });
    }
    if let Some(&id) = candidates.iter().find(|&&id| id >= scores.len()) {
        return Err(Error::OutOfRange {
            what: "candidate id",
            value: id as i64,
            valid: format!("[0, {})", scores.len()),
        });
    }
    let mut ranked = candidates.to_vec();
    // Adding 0.0 maps -0.0 to 0.0 so the two tie.
    let rank = |a: &usize, b: &usize| (scores[*b] + 0.0).total_cmp(&(scores[*a] + 0.0)).then(a.cmp(b));
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, rank);
        ranked.truncate(k);
    }
    ranked.sort_by(rank);
    Ok(RetrievalSet {
        scores: ranked.iter().map(|&i| scores[i]).collect(),
        ids: ranked,
    })
}

/// `gt` together with every id whose label differs from `gt`'s.
pub fn mining_pool(labels: &[usize], gt: usize) -> Vec<usize> {
    (0..labels.len())
        .filter(|&i| i == gt || labels[i] != labels[gt])
        .collect()
}

/// Winner, loser and target preference `Q` over (winner, loser).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplPair {
    pub winner: usize,
    pub loser: usize,
    pub target: [f64; 2],
}

impl SplPair {
    pub fn is_hard(&self) -> bool {
        self.winner != self.loser
    }
}

pub fn mine_pair(gt: usize, set: &RetrievalSet) -> SplPair {
    if set.contains(gt) || set.ids.is_empty() {
        SplPair {
            winner: gt,
            loser: gt,
            target: [0.5, 0.5],
        }
    } else {
        SplPair {
            winner: gt,
            loser: set.ids[0],
            target: [1.0, 0.0],
        }
    }
}

/// `KL(Q ‖ softmax(r_w, r_l))` with `0 · ln 0 = 0`.
pub fn spl_loss_value(r_w: f64, r_l: f64, target: [f64; 2]) -> f64 {
    let m = r_w.max(r_l);
    let lse = m + ((r_w - m).exp() + (r_l - m).exp()).ln();
    let log_p = [r_w - lse, r_l - lse];
    target
        .iter()
        .zip(log_p)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, lp)| q * (q.ln() - lp))
        .sum()
}

/// Mean SPL loss of hard pairs with `Q = (1, 0)`, i.e. `softplus(r_l − r_w)`.
pub fn spl_loss_hard(tape: &Tape, r_w: &Tensor, r_l: &Tensor) -> Result<Tensor> {
    tape.mean(&tape.act(&tape.sub(r_l, r_w)?, Activation::Softplus)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplConfig {
    pub epochs: usize,
    pub k: usize,
    pub batch: usize,
    pub repr: Representation,
    pub optim: OptimConfig,
}

impl Default for SplConfig {
    fn default() -> Self {
        SplConfig {
            epochs: 20,
            k: 5,
            batch: 32,
            repr: Representation::Joint,
            optim: OptimConfig::with_lr(1e-3),
        }
    }
}

/// One mined pair as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct MiningRow {
    pub epoch: usize,
    pub label: usize,
    pub gt: usize,
    pub gt_in_topk: bool,
    pub loser: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplLog {
    pub rows: Vec<MiningRow>,
    /// Fraction of motions missing their own label's top-k, per epoch.
    pub failure_rate: Vec<f64>,
    /// Gradient norm of the last update in each epoch (0 when no update).
    pub grad_norm: Vec<f64>,
}

impl SplLog {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,label,gt_in_topk,loser,loss")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.epoch, r.label, u8::from(r.gt_in_topk), r.loser, r.loss)?;
        }
        Ok(())
    }
}

/// Mine one pair per motion with the current model.
pub fn mine_all(model: &RewardModel, corpus: &[MotionSample], k: usize, repr: Representation) -> Result<Vec<(SplPair, f64)>> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let refs: Vec<&MotionSample> = corpus.iter().collect();
    let sem = model.semantic_matrix(&refs, repr)?;
    let labels: Vec<usize> = corpus.iter().map(|s| s.label).collect();
    (0..corpus.len())
        .map(|gt| {
            let c = labels[gt];
            let scores: Vec<f64> = sem.column(c).to_vec();
            let pool = mining_pool(&labels, gt);
            let set = retrieve_topk(&scores, &pool, k.min(pool.len()))?;
            let pair = mine_pair(gt, &set);
            let loss = if pair.is_hard() {
                spl_loss_value(scores[pair.winner], scores[pair.loser], pair.target)
            } else {
                0.0
            };
            Ok((pair, loss))
        })
        .collect()
}

/// Re-mine once per epoch and minimize the mean SPL loss of the hard pairs,
/// updating the motion and label encoders.
pub fn refine(model: &mut RewardModel, corpus: &[MotionSample], config: &SplConfig, seed: u64) -> Result<SplLog> {
    let mut log = SplLog::default();
    let mut opt = Adam::new(config.optim.clone());
    let mut order_rng = rng::stream(seed, 30);
    let saved = model.params.trainable_flags();
    model.params.set_trainable_where(|n| n.starts_with(BACKBONE) && !n.contains(".dec."));
    let tape = Tape::new();
    let result = (|| {
        for epoch in 0..config.epochs {
            let mined = mine_all(model, corpus, config.k, config.repr)?;
            let mut hard = Vec::new();
            for (pair, loss) in &mined {
                log.rows.push(MiningRow {
                    epoch,
                    label: corpus[pair.winner].label,
                    gt: pair.winner,
                    gt_in_topk: !pair.is_hard(),
                    loser: pair.loser,
                    loss: *loss,
                });
                if pair.is_hard() {
                    hard.push(*pair);
                }
            }
            log.failure_rate.push(hard.len() as f64 / corpus.len() as f64);
            rand::seq::SliceRandom::shuffle(hard.as_mut_slice(), &mut order_rng);
            let mut last_norm = 0.0;
            for chunk in hard.chunks(config.batch.max(1)) {
                let winners: Vec<&MotionSample> = chunk.iter().map(|p| &corpus[p.winner]).collect();
                let losers: Vec<&MotionSample> = chunk.iter().map(|p| &corpus[p.loser]).collect();
                let both: Vec<&MotionSample> = winners.iter().chain(&losers).copied().collect();
                let labels: Vec<usize> = winners.iter().chain(&winners).map(|s| s.label).collect();
                tape.reset();
                let x = Tensor::constant(model.stack_samples(&both, config.repr)?);
                let r = model.semantic(&tape, &x, config.repr, &vec![0; both.len()], &labels)?;
                let n = chunk.len();
                let loss = spl_loss_hard(&tape, &tape.slice_rows(&r, 0, n)?, &tape.slice_rows(&r, n, n)?)?;
                let grads = tape.backward(&loss)?;
                last_norm = opt.step(&mut model.params, &grads).grad_norm;
            }
            log.grad_norm.push(last_norm);
        }
        Ok(())
    })();
    model.params.set_trainable_flags(&saved);
    result.map(|_| log)
}
