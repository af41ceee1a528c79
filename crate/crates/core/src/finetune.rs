//! Reward fine-tuning of a pre-trained denoiser.
//!
//! Two engines share the reward plumbing. The trajectory engine samples a
//! fully tape-linked trajectory and backpropagates the reward of `x_0`
//! through every reverse step. EasyTune samples with detached inputs and
//! applies one update per step of a curriculum window, so the graph never
//! spans more than one reverse step.
//!
//! Step numbering follows [`crate::diffusion`]: window entries are
//! timesteps `τ`, and optimizing `τ` means producing the state `x_τ` from
//! `x_{τ+1}` and scoring it with the reward model at state index `τ`.

use std::io::Write;
use std::time::{Duration, Instant};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionModel};
use crate::error::{Error, Result};
use crate::graph::{Activation, Tape, Tensor};
use crate::motion::Representation;
use crate::nn::{Adam, OptimConfig};
use crate::reward::RewardModel;

/// Weights of semantic, preference, authenticity and similarity rewards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub weights: [f64; 4],
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            weights: [1.0, 0.002, 0.002, 1.0],
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!("aggregator weights must be non-negative, got {:?}", self.weights)));
        }
        Ok(())
    }

    pub fn combine(&self, parts: [f64; 4]) -> f64 {
        self.weights.iter().zip(parts).map(|(w, p)| w * p).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Fraction of training over which the window sweeps to step 0.
    pub rho: f64,
    /// Window width.
    pub k: usize,
    pub steps: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig { rho: 0.4, k: 10, steps: 50 }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::invalid(format!("sweep ratio must lie in (0, 1], got {}", self.rho)));
        }
        if self.k == 0 || self.k > self.steps {
            return Err(Error::OutOfRange {
                what: "curriculum window",
                value: self.k as i64,
                valid: format!("[1, {}]", self.steps),
            });
        }
        Ok(())
    }

    /// `s(p) = (T−k) − round((p/ρ)(T−k))` for `p ≤ ρ`, else 0.
    pub fn start(&self, p: f64) -> usize {
        let span = (self.steps - self.k) as f64;
        if p > self.rho {
            return 0;
        }
        let p = p.max(0.0);
        (span - (p / self.rho * span).round()).max(0.0) as usize
    }
}

/// Timesteps `{s(p), …, s(p)+k−1}` eligible at progress `p`.
pub fn curriculum_window(p: f64, cfg: &CurriculumConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let s = cfg.start(p);
    Ok((s..s + cfg.k).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Score the one-step clean prediction as a clean motion. The default,
    /// since the sampler is deterministic.
    #[default]
    OdePredict,
    /// Score the noised state with the noise-conditioned reward model.
    Perceive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Trajectory,
    #[serde(rename = "easytune")]
    EasyTune,
}

impl EngineKind {
    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Trajectory => "trajectory",
            EngineKind::EasyTune => "easytune",
        }
    }
}

impl std::str::FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trajectory" => Ok(EngineKind::Trajectory),
            "easytune" => Ok(EngineKind::EasyTune),
            _ => Err(Error::invalid(format!("unknown engine {s:?}"))),
        }
    }
}

/// Optimizer updates applied per sampled trajectory.
pub fn updates_per_trajectory(kind: EngineKind, cfg: &CurriculumConfig) -> Result<usize> {
    match kind {
        EngineKind::Trajectory => Ok(1),
        EngineKind::EasyTune => {
            cfg.validate()?;
            Ok(cfg.k)
        }
    }
}

/// Reward model, aggregation and evaluation mode shared by both engines.
/// The generator's flat joint rows are reshaped to `(B·frames) x 3J`
/// reward inputs.
#[derive(Clone, Debug)]
pub struct RewardContext {
    pub model: RewardModel,
    pub aggregator: AggregatorConfig,
    pub mode: RewardMode,
}

/// Batch-mean reward components and their aggregate.
#[derive(Clone, Debug)]
pub struct RewardValue {
    pub total: Tensor,
    pub parts: [f64; 4],
}

impl RewardContext {
    /// Freezes a copy of `model`; fine-tuning never updates it.
    pub fn new(model: &RewardModel, aggregator: AggregatorConfig, mode: RewardMode) -> Result<Self> {
        aggregator.validate()?;
        let mut model = model.clone();
        model.params.freeze_all();
        Ok(RewardContext { model, aggregator, mode })
    }

    fn as_views(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let (b, cols) = x.shape();
        let f = self.model.motion.frames;
        let d = self.model.motion.joint_dim();
        if cols != f * d {
            return Err(Error::shape("reward context", format!("rows of width {cols}, expected {}", f * d)));
        }
        tape.reshape(x, b * f, d)
    }

    /// Aggregated reward of the states `x` at state index `t`, with
    /// `reference` the frozen model's states for the same seed and step.
    pub fn aggregate(
        &self,
        tape: &Tape,
        x: &Tensor,
        t: usize,
        labels: &[usize],
        reference: &Array2<f64>,
        clean: Option<&Tensor>,
    ) -> Result<RewardValue> {
        let w = self.aggregator.weights;
        let repr = Representation::Joint;
        let (scored, step) = match (self.mode, clean) {
            (RewardMode::OdePredict, Some(c)) if t > 0 => (c.clone(), 0),
            (RewardMode::OdePredict, None) if t > 0 => {
                return Err(Error::invalid("clean prediction required for ode_predict rewards"));
            }
            _ => (x.clone(), t),
        };
        let views = self.as_views(tape, &scored)?;
        let b = x.shape().0;
        let steps = vec![step; b];
        let mut parts = [0.0; 4];
        let mut total: Option<Tensor> = None;
        let mut accumulate = |tape: &Tape, i: usize, rows: Tensor| -> Result<()> {
            let m = tape.mean(&rows)?;
            parts[i] = m.item();
            let term = tape.scale(&m, w[i])?;
            total = Some(match total.take() {
                Some(acc) => tape.add(&acc, &term)?,
                None => term,
            });
            Ok(())
        };
        if w[0] != 0.0 {
            accumulate(tape, 0, self.model.semantic(tape, &views, repr, &steps, labels)?)?;
        }
        if w[1] != 0.0 {
            accumulate(tape, 1, self.model.preference(tape, &views, repr, &steps)?)?;
        }
        if w[2] != 0.0 {
            accumulate(tape, 2, self.model.authenticity(tape, &views, repr, &steps)?)?;
        }
        if w[3] != 0.0 {
            if reference.dim() != x.shape() {
                return Err(Error::shape("similarity reward", "reference and state shapes differ"));
            }
            let diff = tape.sub(x, &Tensor::constant(reference.clone()))?;
            let sq = tape.act(&diff, Activation::Square)?;
            accumulate(tape, 3, tape.scale(&sq, -1.0)?)?;
        }
        Ok(RewardValue {
            total: total.unwrap_or_else(|| Tensor::scalar(0.0)),
            parts,
        })
    }
}

/// Noise-aware reward of states `x_t` (state index `t`, 0 = clean), with
/// the aggregate built from `ctx`.
pub fn noise_aware_reward<D: Denoiser>(
    tape: &Tape,
    ctx: &RewardContext,
    model: &DiffusionModel<D>,
    x_t: &Tensor,
    t: usize,
    labels: &[usize],
    reference: &Array2<f64>,
) -> Result<RewardValue> {
    if t > model.steps() {
        return Err(Error::OutOfRange {
            what: "state index",
            value: t as i64,
            valid: format!("[0, {}]", model.steps()),
        });
    }
    let clean = match (ctx.mode, t) {
        (RewardMode::OdePredict, t) if t > 0 => Some(model.predict_clean(tape, x_t, t - 1, labels)?),
        _ => None,
    };
    ctx.aggregate(tape, x_t, t, labels, reference, clean.as_ref())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub kind: EngineKind,
    /// Outer iterations, one sampled trajectory each.
    pub iterations: usize,
    pub batch: usize,
    /// Prompt labels cycled through the batches.
    pub labels: Vec<usize>,
    pub optim: OptimConfig,
    pub aggregator: AggregatorConfig,
    pub curriculum: CurriculumConfig,
    pub mode: RewardMode,
    /// EasyTune: draw a fresh `x_T` for every window update instead of
    /// continuing one trajectory.
    pub resample: bool,
    /// Run the evaluation hook every this many outer iterations (0 = never).
    pub eval_every: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            kind: EngineKind::EasyTune,
            iterations: 40,
            batch: 8,
            labels: vec![0, 1, 2],
            optim: OptimConfig {
                lr: 1e-4,
                warmup_steps: 10,
                cosine: true,
                clip_norm: 1.0,
                ..OptimConfig::default()
            },
            aggregator: AggregatorConfig::default(),
            curriculum: CurriculumConfig::default(),
            mode: RewardMode::OdePredict,
            resample: false,
            eval_every: 0,
        }
    }
}

/// One optimizer update.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub update: usize,
    /// Optimized timestep, `None` for the trajectory engine.
    pub step: Option<usize>,
    pub reward: f64,
    pub grad_norm: f64,
    /// `‖∂R/∂x_T‖ / ‖∂R/∂x_0‖` for the trajectory engine; 1 for EasyTune,
    /// whose single-step graph carries no coefficient product.
    pub coeff_norm: f64,
    pub peak_nodes: usize,
    /// Training time since the start of the run, evaluation excluded.
    pub millis: f64,
}

/// Output of the evaluation hook at some point of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub iteration: usize,
    pub millis: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineRun {
    pub kind: EngineKind,
    pub trace: Vec<TraceRow>,
    /// Trajectory engine: `‖∂R/∂x_t‖ / ‖∂R/∂x_0‖` for `t = 0..=T` at each
    /// update.
    pub coeff_profiles: Vec<Vec<f64>>,
    pub evals: Vec<EvalPoint>,
}

impl EngineRun {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "update,t,reward,grad_norm,coeff_norm,peak_nodes,millis")?;
        for r in &self.trace {
            let t = r.step.map_or(-1, |s| s as i64);
            writeln!(
                w,
                "{},{},{},{},{},{},{:.3}",
                r.update, t, r.reward, r.grad_norm, r.coeff_norm, r.peak_nodes, r.millis
            )?;
        }
        Ok(())
    }

    pub fn peak_nodes(&self) -> usize {
        self.trace.iter().map(|r| r.peak_nodes).max().unwrap_or(0)
    }
}

/// Evaluation callback, invoked with the current generator. Its running
/// time is excluded from the engine clock.
pub type EvalHook<'a, D> = dyn FnMut(&DiffusionModel<D>) -> Result<f64> + 'a;

struct Clock {
    spent: Duration,
    since: Instant,
}

impl Clock {
    fn start() -> Self {
        Clock {
            spent: Duration::ZERO,
            since: Instant::now(),
        }
    }

    fn millis(&self) -> f64 {
        (self.spent + self.since.elapsed()).as_secs_f64() * 1e3
    }

    fn pause(&mut self) {
        self.spent += self.since.elapsed();
    }

    fn resume(&mut self) {
        self.since = Instant::now();
    }
}

fn iteration_seed(seed: u64, iteration: usize, sub: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((iteration as u64) << 20)
        .wrapping_add(sub as u64)
}

/// Optimizer for a run; a cosine schedule without an explicit horizon
/// decays over the run's total number of updates.
fn optimizer(cfg: &EngineConfig, per_iteration: usize) -> Adam {
    let mut optim = cfg.optim.clone();
    if optim.cosine && optim.total_steps == 0 {
        optim.total_steps = cfg.iterations * per_iteration;
    }
    Adam::new(optim)
}

fn batch_labels(cfg: &EngineConfig, iteration: usize) -> Vec<usize> {
    (0..cfg.batch)
        .map(|i| cfg.labels[(iteration * cfg.batch + i) % cfg.labels.len()])
        .collect()
}

/// Runs the configured engine on `model` in place.
pub fn run_engine<D: Denoiser + Clone>(
    model: &mut DiffusionModel<D>,
    reward: &RewardModel,
    cfg: &EngineConfig,
    seed: u64,
    eval: Option<&mut EvalHook<'_, D>>,
) -> Result<EngineRun> {
    if cfg.labels.is_empty() || cfg.batch == 0 {
        return Err(Error::invalid("fine-tuning needs prompt labels and a positive batch"));
    }
    if model.data_dim() != reward.motion.flat_dim() {
        return Err(Error::shape("fine-tuning", "generator width does not match the reward model's joint view"));
    }
    let ctx = RewardContext::new(reward, cfg.aggregator, cfg.mode)?;
    match cfg.kind {
        EngineKind::Trajectory => run_trajectory_engine(model, &ctx, cfg, seed, eval),
        EngineKind::EasyTune => run_easytune_engine(model, &ctx, cfg, seed, eval),
    }
}

fn maybe_eval<D: Denoiser>(
    eval: &mut Option<&mut EvalHook<'_, D>>,
    model: &DiffusionModel<D>,
    cfg: &EngineConfig,
    iteration: usize,
    clock: &mut Clock,
    out: &mut Vec<EvalPoint>,
) -> Result<()> {
    let due = iteration == 0 || iteration == cfg.iterations || (cfg.eval_every > 0 && iteration % cfg.eval_every == 0);
    if let (Some(hook), true) = (eval.as_mut(), due && cfg.eval_every > 0) {
        clock.pause();
        let millis = clock.millis();
        let value = hook(model)?;
        out.push(EvalPoint { iteration, millis, value });
        clock.resume();
    }
    Ok(())
}

/// Full-trajectory reward backpropagation.
pub fn run_trajectory_engine<D: Denoiser + Clone>(
    model: &mut DiffusionModel<D>,
    ctx: &RewardContext,
    cfg: &EngineConfig,
    seed: u64,
    mut eval: Option<&mut EvalHook<'_, D>>,
) -> Result<EngineRun> {
    let frozen = model.clone();
    let mut opt = optimizer(cfg, 1);
    let tape = Tape::new();
    let steps = model.steps();
    let mut run = EngineRun {
        kind: EngineKind::Trajectory,
        trace: Vec::with_capacity(cfg.iterations),
        coeff_profiles: Vec::with_capacity(cfg.iterations),
        evals: Vec::new(),
    };
    let mut clock = Clock::start();
    for it in 0..cfg.iterations {
        maybe_eval(&mut eval, model, cfg, it, &mut clock, &mut run.evals)?;
        let labels = batch_labels(cfg, it);
        let s = iteration_seed(seed, it, 0);
        let reference = frozen.sample(&labels, s)?;
        tape.reset();
        let mut x = tape.watch(&Tensor::constant(model.initial_noise(labels.len(), s)));
        let mut states = vec![x.clone()];
        for t in (1..=steps).rev() {
            x = model.reverse_step(&tape, &x, t, &labels)?;
            states.push(x.clone());
        }
        let r = noise_aware_reward(&tape, ctx, model, &x, 0, &labels, reference.clean())?;
        let loss = tape.scale(&r.total, -1.0)?;
        let watch: Vec<&Tensor> = states.iter().collect();
        let grads = tape.backward_with(&loss, &watch)?;
        let peak = tape.metrics().peak_node_count;
        let norm_of = |t: &Tensor| grads.wrt(t).map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt());
        // states[i] holds x_{T−i}; profile is indexed by state number.
        let base = norm_of(&states[steps]);
        let profile: Vec<f64> = (0..=steps)
            .map(|t| if base > 0.0 { norm_of(&states[steps - t]) / base } else { 0.0 })
            .collect();
        let stats = opt.step(&mut model.params, &grads);
        run.trace.push(TraceRow {
            update: it,
            step: None,
            reward: r.total.item(),
            grad_norm: stats.grad_norm,
            coeff_norm: profile[steps],
            peak_nodes: peak,
            millis: clock.millis(),
        });
        run.coeff_profiles.push(profile);
    }
    maybe_eval(&mut eval, model, cfg, cfg.iterations, &mut clock, &mut run.evals)?;
    Ok(run)
}

/// Untracked reverse steps from state `from` down to state `to`.
fn advance<D: Denoiser>(model: &DiffusionModel<D>, x: Tensor, from: usize, to: usize, labels: &[usize]) -> Result<Tensor> {
    let tape = Tape::new();
    tape.set_recording(false);
    let mut x = x;
    for t in (to + 1..=from).rev() {
        x = model.reverse_step(&tape, &x, t, labels)?;
    }
    Ok(Tensor::constant(x.value().clone()))
}

/// Step-wise optimization with stop-gradient sampling over the curriculum
/// window, one update per window step in descending order.
pub fn run_easytune_engine<D: Denoiser + Clone>(
    model: &mut DiffusionModel<D>,
    ctx: &RewardContext,
    cfg: &EngineConfig,
    seed: u64,
    mut eval: Option<&mut EvalHook<'_, D>>,
) -> Result<EngineRun> {
    let steps = model.steps();
    let curriculum = CurriculumConfig { steps, ..cfg.curriculum };
    curriculum.validate()?;
    let frozen = model.clone();
    let mut opt = optimizer(cfg, curriculum.k);
    let tape = Tape::new();
    let mut run = EngineRun {
        kind: EngineKind::EasyTune,
        trace: Vec::with_capacity(cfg.iterations * curriculum.k),
        coeff_profiles: Vec::new(),
        evals: Vec::new(),
    };
    let mut clock = Clock::start();
    let mut update = 0;
    for it in 0..cfg.iterations {
        maybe_eval(&mut eval, model, cfg, it, &mut clock, &mut run.evals)?;
        let labels = batch_labels(cfg, it);
        let p = it as f64 / cfg.iterations as f64;
        let window = curriculum_window(p, &curriculum)?;
        let s = iteration_seed(seed, it, 0);
        let reference = frozen.sample(&labels, s)?;
        let top = *window.last().expect("non-empty window");
        let mut x = advance(model, Tensor::constant(model.initial_noise(labels.len(), s)), steps, top + 1, &labels)?;
        for (j, &tau) in window.iter().rev().enumerate() {
            let (prev, reference) = if cfg.resample && j > 0 {
                let s = iteration_seed(seed, it, j);
                let start = Tensor::constant(model.initial_noise(labels.len(), s));
                (advance(model, start, steps, tau + 1, &labels)?, frozen.sample(&labels, s)?)
            } else {
                (x.clone(), reference.clone())
            };
            tape.reset();
            let x_tau = model.reverse_step_sg(&tape, &prev, tau + 1, &labels)?;
            let r = noise_aware_reward(&tape, ctx, model, &x_tau, tau, &labels, reference.state(tau))?;
            let loss = tape.scale(&r.total, -1.0)?;
            let grads = tape.backward(&loss)?;
            let peak = tape.metrics().peak_node_count;
            let stats = opt.step(&mut model.params, &grads);
            run.trace.push(TraceRow {
                update,
                step: Some(tau),
                reward: r.total.item(),
                grad_norm: stats.grad_norm,
                coeff_norm: 1.0,
                peak_nodes: peak,
                millis: clock.millis(),
            });
            update += 1;
            x = Tensor::constant(x_tau.value().clone());
        }
    }
    maybe_eval(&mut eval, model, cfg, cfg.iterations, &mut clock, &mut run.evals)?;
    Ok(run)
}
