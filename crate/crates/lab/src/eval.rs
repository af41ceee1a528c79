//! Evaluation suite: text-to-motion retrieval, preference and deepfake
//! classification metrics, latent Fréchet distance and seed-replicated
//! confidence intervals.
//!
//! The counting cores take plain score arrays so that they can be checked
//! against brute-force oracles and fed with synthetic scorers; the
//! `eval_*` wrappers compute those scores with a reward model.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::seq::index;
use statrs::distribution::{ContinuousCDF, StudentsT};

use rft_core::diffusion::{Denoiser, DiffusionModel};
use rft_core::finetune::RewardContext;
use rft_core::graph::{Tape, Tensor};
use rft_core::motion::{DeepfakeExample, MotionSample, PreferencePair, Representation};
use rft_core::nn::rng;
use rft_core::reward::{Path, RewardModel};

use crate::error::{LabError, Result};

/// Top-k accuracy for each requested `k`.
///
/// Query `i` asks for label `labels[i]`; its candidates are motion `i` and
/// `candidates − 1` motions drawn without replacement from the other
/// labels. Motion `i` ranks after every candidate with a higher score and
/// after equal-scoring candidates of lower index.
pub fn retrieval_topk(
    scores: &Array2<f64>,
    labels: &[usize],
    candidates: usize,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let n = labels.len();
    if scores.nrows() != n {
        return Err(LabError::eval("one score row per motion required"));
    }
    if candidates == 0 || candidates > n {
        return Err(LabError::eval(format!("candidate set of {candidates} from a corpus of {n}")));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > candidates) {
        return Err(LabError::eval(format!("k = {k} outside [1, {candidates}]")));
    }
    let mut rng = rng::stream(seed, 40);
    let mut hits = vec![0usize; ks.len()];
    for i in 0..n {
        let c = labels[i];
        if c >= scores.ncols() {
            return Err(LabError::eval(format!("label {c} has no score column")));
        }
        let others: Vec<usize> = (0..n).filter(|&j| labels[j] != c).collect();
        if others.len() < candidates - 1 {
            return Err(LabError::eval(format!(
                "label {c} has only {} motions of other labels for {candidates} candidates",
                others.len()
            )));
        }
        let target = scores[[i, c]];
        let rank = index::sample(&mut rng, others.len(), candidates - 1)
            .iter()
            .map(|p| others[p])
            .filter(|&j| scores[[j, c]] > target || (scores[[j, c]] == target && j < i))
            .count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    Ok(ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n as f64)).collect())
}

pub fn eval_retrieval(
    model: &RewardModel,
    corpus: &[MotionSample],
    repr: Representation,
    candidates: usize,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let refs: Vec<&MotionSample> = corpus.iter().collect();
    let scores = model.semantic_matrix(&refs, repr)?;
    let labels: Vec<usize> = corpus.iter().map(|s| s.label).collect();
    retrieval_topk(&scores, &labels, candidates, ks, seed)
}

/// Confusion counts with the positive class first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> BinaryMetrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        BinaryMetrics {
            accuracy: ratio(self.tp + self.tn, self.total()),
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BinaryMetrics {
    pub fn named(&self, prefix: &str) -> Vec<(String, f64)> {
        [("accuracy", self.accuracy), ("precision", self.precision), ("recall", self.recall), ("f1", self.f1)]
            .into_iter()
            .map(|(n, v)| (format!("{prefix}.{n}"), v))
            .collect()
    }
}

/// Which pairs are presented loser-first, each with probability ½.
pub fn swap_flags(n: usize, seed: u64) -> Vec<bool> {
    use rand::Rng;
    let mut rng = rng::stream(seed, 41);
    (0..n).map(|_| rng.random::<bool>()).collect()
}

/// Preference metrics for scores of winners and losers. When a pair is
/// swapped the loser is presented first. The prediction is "first is
/// better" when its score is at least the second's; the positive class is
/// "first is better".
pub fn preference_metrics(winner: &[f64], loser: &[f64], swapped: &[bool]) -> Result<BinaryMetrics> {
    if winner.len() != loser.len() || winner.len() != swapped.len() {
        return Err(LabError::eval("winner, loser and swap lists differ in length"));
    }
    let mut pred = Vec::with_capacity(winner.len());
    let mut truth = Vec::with_capacity(winner.len());
    for i in 0..winner.len() {
        let (first, second) = if swapped[i] { (loser[i], winner[i]) } else { (winner[i], loser[i]) };
        pred.push(first >= second);
        truth.push(!swapped[i]);
    }
    Ok(Confusion::from_predictions(&pred, &truth).metrics())
}

fn head_scores(model: &RewardModel, samples: &[&MotionSample], repr: Representation, path: Path) -> Result<Vec<f64>> {
    let tape = Tape::new();
    tape.set_recording(false);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let x = Tensor::constant(model.stack_samples(chunk, repr)?);
        let steps = vec![0; chunk.len()];
        let s = match path {
            Path::Preference => model.preference(&tape, &x, repr, &steps)?,
            Path::Authenticity => model.authenticity(&tape, &x, repr, &steps)?,
            Path::Semantic => return Err(LabError::eval("semantic scores need labels")),
        };
        out.extend(s.value().iter().copied());
    }
    Ok(out)
}

pub fn eval_preference(model: &RewardModel, pairs: &[PreferencePair], repr: Representation, seed: u64) -> Result<BinaryMetrics> {
    let winners: Vec<&MotionSample> = pairs.iter().map(|p| &p.winner).collect();
    let losers: Vec<&MotionSample> = pairs.iter().map(|p| &p.loser).collect();
    let w = head_scores(model, &winners, repr, Path::Preference)?;
    let l = head_scores(model, &losers, repr, Path::Preference)?;
    preference_metrics(&w, &l, &swap_flags(pairs.len(), seed))
}

/// Real/generated metrics with "real" as the positive class and a 0.5
/// threshold on the authenticity probability.
pub fn deepfake_metrics(prob_real: &[f64], is_real: &[bool]) -> Result<BinaryMetrics> {
    if prob_real.len() != is_real.len() {
        return Err(LabError::eval("one probability per example required"));
    }
    let pred: Vec<bool> = prob_real.iter().map(|&p| p >= 0.5).collect();
    Ok(Confusion::from_predictions(&pred, is_real).metrics())
}

pub fn eval_deepfake(model: &RewardModel, set: &[DeepfakeExample], repr: Representation) -> Result<BinaryMetrics> {
    let motions: Vec<&MotionSample> = set.iter().map(|e| &e.motion).collect();
    let p = head_scores(model, &motions, repr, Path::Authenticity)?;
    let real: Vec<bool> = set.iter().map(|e| e.is_real).collect();
    deepfake_metrics(&p, &real)
}

/// Jitter added to both covariances when either is singular.
pub const FRECHET_JITTER: f64 = 1e-6;

fn mean_cov(x: &Array2<f64>) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let m = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let mean = m.row_mean().transpose();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn is_singular(c: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(c.clone());
    let max = eig.eigenvalues.amax();
    eig.eigenvalues.min() <= 1e-12 * max.max(1.0)
}

/// Fréchet distance between Gaussians fitted to the rows of `a` and `b`:
/// `‖m₁−m₂‖² + tr(C₁ + C₂ − 2(C₁C₂)^{1/2})`.
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 || a.ncols() != b.ncols() {
        return Err(LabError::eval("Fréchet distance needs two sets of at least two rows of equal width"));
    }
    let (m1, mut c1) = mean_cov(a);
    let (m2, mut c2) = mean_cov(b);
    if is_singular(&c1) || is_singular(&c2) {
        let jitter = DMatrix::identity(c1.nrows(), c1.ncols()) * FRECHET_JITTER;
        c1 += &jitter;
        c2 += &jitter;
    }
    let s1 = psd_sqrt(&c1);
    let inner = &s1 * &c2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (m1 - m2).norm_squared();
    Ok((diff + c1.trace() + c2.trace() - 2.0 * cross).max(0.0))
}

/// Latent Fréchet distance between two motion sets under the semantic
/// encoder.
pub fn eval_frechet(model: &RewardModel, generated: &[MotionSample], real: &[MotionSample], repr: Representation) -> Result<f64> {
    let g: Vec<&MotionSample> = generated.iter().collect();
    let r: Vec<&MotionSample> = real.iter().collect();
    frechet_distance(&model.embed(&g, repr, Path::Semantic)?, &model.embed(&r, repr, Path::Semantic)?)
}

/// Clean samples of `model` for `labels` under `seed`, as motions.
pub fn generate<D: Denoiser>(
    model: &DiffusionModel<D>,
    labels: &[usize],
    seed: u64,
    motion: &rft_core::motion::MotionConfig,
) -> Result<Vec<MotionSample>> {
    let traj = model.sample(labels, seed)?;
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| Ok(MotionSample::from_flat(&traj.clean().row(i).to_vec(), l, motion)?))
        .collect()
}

/// Batch-mean aggregated reward of clean samples for `labels`, with the
/// similarity term measured against `reference` under the same seed.
pub fn mean_aggregated_reward<D: Denoiser>(
    ctx: &RewardContext,
    model: &DiffusionModel<D>,
    reference: &DiffusionModel<D>,
    labels: &[usize],
    seed: u64,
) -> Result<f64> {
    Ok(clean_reward(ctx, model, reference, labels, seed)?.total.item())
}

/// Batch means of the semantic, critic, authenticity and similarity terms,
/// unweighted. Heads with zero aggregation weight report 0.
pub fn mean_reward_parts<D: Denoiser>(
    ctx: &RewardContext,
    model: &DiffusionModel<D>,
    reference: &DiffusionModel<D>,
    labels: &[usize],
    seed: u64,
) -> Result<[f64; 4]> {
    Ok(clean_reward(ctx, model, reference, labels, seed)?.parts)
}

fn clean_reward<D: Denoiser>(
    ctx: &RewardContext,
    model: &DiffusionModel<D>,
    reference: &DiffusionModel<D>,
    labels: &[usize],
    seed: u64,
) -> Result<rft_core::finetune::RewardValue> {
    let x = model.sample(labels, seed)?;
    let r = reference.sample(labels, seed)?;
    let tape = Tape::new();
    tape.set_recording(false);
    Ok(ctx.aggregate(&tape, &Tensor::constant(x.clean().clone()), 0, labels, r.clean(), None)?)
}

/// Mean with a two-sided Student-t confidence interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Interval {
    /// With one value the interval collapses to the point.
    pub fn from_values(values: &[f64], level: f64) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(LabError::eval("no values for a confidence interval"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Ok(Interval { mean, lo: mean, hi: mean, n });
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let t = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
            .map_err(|e| LabError::eval(e.to_string()))?
            .inverse_cdf(0.5 + level / 2.0);
        let half = t * (var / n as f64).sqrt();
        Ok(Interval {
            mean,
            lo: mean - half,
            hi: mean + half,
            n,
        })
    }
}

/// Named metrics with 95% intervals over repetitions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, Interval>,
}

impl MetricsReport {
    /// Builds intervals from per-repetition `(name, value)` lists.
    pub fn from_repetitions(reps: &[Vec<(String, f64)>]) -> Result<Self> {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for rep in reps {
            for (name, v) in rep {
                values.entry(name.clone()).or_default().push(*v);
            }
        }
        let metrics = values
            .into_iter()
            .map(|(k, v)| Ok((k, Interval::from_values(&v, 0.95)?)))
            .collect::<Result<_>>()?;
        Ok(MetricsReport { metrics })
    }

    pub fn get(&self, name: &str) -> Option<&Interval> {
        self.metrics.get(name)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "metric,mean,ci_low,ci_high,n")?;
        for (k, v) in &self.metrics {
            writeln!(w, "{k},{},{},{},{}", v.mean, v.lo, v.hi, v.n)?;
        }
        Ok(())
    }

    /// `name = value` lines, with `name.ci_low` and `name.ci_high` alongside.
    pub fn write_report(&self, mut w: impl Write) -> std::io::Result<()> {
        for (k, v) in &self.metrics {
            writeln!(w, "{k} = {}", v.mean)?;
            writeln!(w, "{k}.ci_low = {}", v.lo)?;
            writeln!(w, "{k}.ci_high = {}", v.hi)?;
        }
        Ok(())
    }
}
