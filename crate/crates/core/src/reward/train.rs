use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::{
    combine_semantic, loss_auth, loss_cra, loss_infonce, loss_kl, loss_lat, loss_pref, loss_rec,
    SemanticParts,
};
use super::model::{Path, RewardModel, BACKBONE, OMEGA, PSI};
use crate::diffusion::{forward_noise, standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{Tape, Tensor};
use crate::motion::{DeepfakeExample, MotionSample, PreferencePair, Representation};
use crate::nn::{rng, Adam, OptimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    /// Probability of feeding a forward-noised motion during semantic
    /// training.
    pub noise_prob: f64,
    /// Semantic batches hold each label once per round instead of a
    /// uniform shuffle.
    pub balanced_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch: 24,
            optim: OptimConfig {
                lr: 2e-3,
                ..Default::default()
            },
            noise_prob: 0.5,
            balanced_batches: false,
        }
    }
}

/// One semantic-training batch: the same motions rendered in two different
/// representations, with the clean first view as reconstruction target.
#[derive(Clone, Debug)]
pub struct SemanticBatch {
    pub primary: Representation,
    pub secondary: Representation,
    pub input: Array2<f64>,
    pub input_secondary: Array2<f64>,
    pub target: Array2<f64>,
    pub steps: Vec<usize>,
    pub labels: Vec<usize>,
}

impl SemanticBatch {
    /// Noises each motion with probability `noise_prob` at a uniform
    /// timestep `τ`, recording state index `τ + 1`; clean motions get 0.
    pub fn build(
        model: &RewardModel,
        samples: &[&MotionSample],
        primary: Representation,
        secondary: Representation,
        schedule: Option<&NoiseSchedule>,
        noise_prob: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cfg = &model.motion;
        let mut inputs = Vec::with_capacity(samples.len());
        let mut steps = Vec::with_capacity(samples.len());
        for s in samples {
            match schedule {
                Some(sched) if rng.random::<f64>() < noise_prob => {
                    let tau = rng.random_range(0..sched.steps());
                    let eps = standard_normal(cfg.frames, cfg.joint_dim(), rng);
                    let noisy = forward_noise(sched, &s.joint, tau, &eps)?;
                    inputs.push(MotionSample::from_joint(noisy, s.label, cfg)?);
                    steps.push(tau + 1);
                }
                _ => {
                    inputs.push((*s).clone());
                    steps.push(0);
                }
            }
        }
        let refs: Vec<&MotionSample> = inputs.iter().collect();
        Ok(SemanticBatch {
            primary,
            secondary,
            input: model.stack_samples(&refs, primary)?,
            input_secondary: model.stack_samples(&refs, secondary)?,
            target: model.stack_samples(samples, primary)?,
            steps,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }
}

/// Full semantic objective on one batch. With `rng = None` all latents are
/// posterior means.
pub fn semantic_loss(
    model: &RewardModel,
    tape: &Tape,
    batch: &SemanticBatch,
    mut rng: Option<&mut rng::Rng>,
) -> Result<SemanticParts> {
    let c = &model.config;
    let x1 = Tensor::constant(batch.input.clone());
    let x2 = Tensor::constant(batch.input_secondary.clone());
    let qm = model.encode_motion(tape, &x1, batch.primary, &batch.steps, Path::Semantic)?;
    let qm2 = model.encode_motion(tape, &x2, batch.secondary, &batch.steps, Path::Semantic)?;
    let qc = model.encode_labels(tape, &batch.labels)?;
    let zm = model.sample_latent(tape, &qm, rng.as_deref_mut())?.z;
    let zm2 = model.sample_latent(tape, &qm2, rng.as_deref_mut())?.z;
    let zc = model.sample_latent(tape, &qc, rng.as_deref_mut())?.z;
    let target = Tensor::constant(batch.target.clone());
    let rec = loss_rec(
        tape,
        &target,
        &model.decode(tape, &zm, batch.primary)?,
        &model.decode(tape, &zc, batch.primary)?,
        c.huber_delta,
    )?;
    let kl = loss_kl(tape, &qc, &qm)?;
    let lat = loss_lat(tape, &zm, &zc, c.huber_delta)?;
    let cl = loss_infonce(tape, &zm, &zc, c.temperature)?;
    let cra = loss_cra(tape, &zm, &zm2, &qm, &qm2, c.cra_alpha, c.temperature, c.huber_delta)?.total;
    combine_semantic(tape, rec, kl, lat, cl, cra, c.lambda)
}

/// Batches in which, as far as possible, every label appears once, so the
/// contrastive terms see distinct conditions.
pub fn label_balanced_batches(samples: &[MotionSample], batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let labels = samples.iter().map(|s| s.label).max().map_or(0, |m| m + 1);
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); labels];
    for (i, s) in samples.iter().enumerate() {
        queues[s.label].push(i);
    }
    for q in &mut queues {
        q.shuffle(rng);
    }
    let mut order = Vec::with_capacity(samples.len());
    let mut label_order: Vec<usize> = (0..labels).collect();
    while queues.iter().any(|q| !q.is_empty()) {
        label_order.shuffle(rng);
        for &l in &label_order {
            if let Some(i) = queues[l].pop() {
                order.push(i);
            }
        }
    }
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn two_reprs(rng: &mut impl Rng) -> (Representation, Representation) {
    let first = rng.random_range(0..3);
    let second = (first + rng.random_range(1..3)) % 3;
    (Representation::ALL[first], Representation::ALL[second])
}

/// Runs `f` with only the parameters under `prefix` trainable.
fn with_trainable<R>(
    model: &mut RewardModel,
    prefix: &str,
    f: impl FnOnce(&mut RewardModel) -> Result<R>,
) -> Result<R> {
    let saved = model.params.trainable_flags();
    model.params.set_trainable_where(|name| name.starts_with(prefix));
    let out = f(model);
    model.params.set_trainable_flags(&saved);
    out
}

/// Trains the backbone on the semantic objective. Returns the mean loss per
/// epoch. `schedule` enables noise-aware training.
pub fn pretrain_semantic(
    model: &mut RewardModel,
    corpus: &[MotionSample],
    schedule: Option<&NoiseSchedule>,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut rng = rng::stream(seed, 20);
    let mut opt = Adam::new(config.optim.clone());
    let tape = Tape::new();
    with_trainable(model, BACKBONE, |model| {
        let mut history = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            let batches = if config.balanced_batches {
                label_balanced_batches(corpus, config.batch, &mut rng)
            } else {
                let mut order: Vec<usize> = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
                order.chunks(config.batch.max(1)).map(|c| c.to_vec()).collect()
            };
            let mut total = 0.0;
            for idx in &batches {
                let samples: Vec<&MotionSample> = idx.iter().map(|&i| &corpus[i]).collect();
                let (o1, o2) = two_reprs(&mut rng);
                let batch = SemanticBatch::build(model, &samples, o1, o2, schedule, config.noise_prob, &mut rng)?;
                tape.reset();
                let loss = semantic_loss(model, &tape, &batch, Some(&mut rng))?.total;
                let grads = tape.backward(&loss)?;
                opt.step(&mut model.params, &grads);
                total += loss.item();
            }
            history.push(total / batches.len() as f64);
        }
        Ok(history)
    })
}

/// Trains only the ψ adapter and critic head on preference pairs. Returns
/// the mean loss per epoch.
pub fn train_preference(
    model: &mut RewardModel,
    pairs: &[PreferencePair],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    adapter_loop(model, pairs.len(), PSI, config, seed, |model, tape, idx, repr| {
        let winners: Vec<&MotionSample> = idx.iter().map(|&i| &pairs[i].winner).collect();
        let losers: Vec<&MotionSample> = idx.iter().map(|&i| &pairs[i].loser).collect();
        let both: Vec<&MotionSample> = winners.iter().chain(&losers).copied().collect();
        let x = Tensor::constant(model.stack_samples(&both, repr)?);
        let scores = model.preference(tape, &x, repr, &vec![0; both.len()])?;
        let n = idx.len();
        loss_pref(tape, &tape.slice_rows(&scores, 0, n)?, &tape.slice_rows(&scores, n, n)?)
    })
}

/// Trains only the ω adapter and classifier head on real/generated labels.
pub fn train_authenticity(
    model: &mut RewardModel,
    examples: &[DeepfakeExample],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    adapter_loop(model, examples.len(), OMEGA, config, seed, |model, tape, idx, repr| {
        let motions: Vec<&MotionSample> = idx.iter().map(|&i| &examples[i].motion).collect();
        let real: Vec<bool> = idx.iter().map(|&i| examples[i].is_real).collect();
        let x = Tensor::constant(model.stack_samples(&motions, repr)?);
        let q = model.encode_motion(tape, &x, repr, &vec![0; motions.len()], Path::Authenticity)?;
        loss_auth(tape, &model.classifier_logit(tape, &q.mu)?, &real)
    })
}

fn adapter_loop(
    model: &mut RewardModel,
    n: usize,
    prefix: &str,
    config: &TrainConfig,
    seed: u64,
    loss_fn: impl Fn(&RewardModel, &Tape, &[usize], Representation) -> Result<Tensor>,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("empty training set"));
    }
    let mut rng = rng::stream(seed, 21);
    let mut opt = Adam::new(config.optim.clone());
    let tape = Tape::new();
    let mut order: Vec<usize> = (0..n).collect();
    with_trainable(model, prefix, |model| {
        let mut history = Vec::with_capacity(config.epochs);
        let mut step = 0usize;
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let chunks: Vec<&[usize]> = order.chunks(config.batch.max(1)).collect();
            let mut total = 0.0;
            for idx in &chunks {
                let repr = Representation::ALL[step % 3];
                step += 1;
                tape.reset();
                let loss = loss_fn(model, &tape, idx, repr)?;
                let grads = tape.backward(&loss)?;
                opt.step(&mut model.params, &grads);
                total += loss.item();
            }
            history.push(total / chunks.len() as f64);
        }
        Ok(history)
    })
}
