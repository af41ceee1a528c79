//! Figure-data exports.
//!
//! Four comma-separated files:
//!
//! * `grad_norm.csv`: `t,grad_norm,coeff_norm`. For one full trajectory the
//!   per-step direct term `⟨∂R/∂x_{t−1}, ∂π(sg x_t, t)/∂θ⟩` is backpropagated
//!   on its own and its parameter-gradient norm recorded, alongside the
//!   adjoint ratio `‖∂R/∂x_t‖ / ‖∂R/∂x_0‖`.
//! * `similarity.csv`: `t,cosine`, the corpus-mean cosine between the
//!   semantic latent of the state-`t` noised motion and of the clean one.
//! * `memory.csv`: `engine,steps,peak_nodes`, one row per (engine, T).
//! * `live_nodes.csv`: `engine,update,nodes` from engine traces.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use rft_core::diffusion::{forward_noise, standard_normal, Denoiser, DiffusionModel, MlpConfig, MlpDenoiser, ScheduleConfig};
use rft_core::finetune::{noise_aware_reward, run_engine, EngineConfig, EngineKind, EngineRun, RewardContext};
use rft_core::graph::{Tape, Tensor};
use rft_core::motion::{MotionSample, Representation};
use rft_core::nn::{rng, ParamStore};
use rft_core::reward::{normalize, Path as RewardPath, RewardModel};

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub t: usize,
    pub grad_norm: f64,
    pub coeff_norm: f64,
}

/// Direct-term gradient norm of every step of one trajectory, indexed by
/// the state `t` the step starts from (`1..=T`).
pub fn step_gradient_norms<D: Denoiser>(
    model: &DiffusionModel<D>,
    ctx: &RewardContext,
    labels: &[usize],
    seed: u64,
) -> Result<Vec<GradRow>> {
    let steps = model.steps();
    let reference = model.sample(labels, seed)?;
    let tape = Tape::new();
    let mut x = tape.watch(&Tensor::constant(model.initial_noise(labels.len(), seed)));
    let mut states = vec![x.clone()];
    for t in (1..=steps).rev() {
        x = model.reverse_step(&tape, &x, t, labels)?;
        states.push(x.clone());
    }
    let r = noise_aware_reward(&tape, ctx, model, &x, 0, labels, reference.clean())?;
    let watch: Vec<&Tensor> = states.iter().collect();
    let grads = tape.backward_with(&r.total, &watch)?;
    // states[i] holds x_{T−i}.
    let adj = |t: usize| grads.wrt(&states[steps - t]).cloned();
    let input = |t: usize| states[steps - t].value().clone();
    let base = adj(0).map_or(0.0, |a| frob(&a));
    let mut rows = Vec::with_capacity(steps);
    for t in 1..=steps {
        let a = adj(t - 1).ok_or_else(|| LabError::eval(format!("no adjoint for state {}", t - 1)))?;
        let xt = input(t);
        let local = Tape::new();
        let y = model.reverse_step_sg(&local, &Tensor::constant(xt), t, labels)?;
        let dot = local.sum(&local.mul(&y, &Tensor::constant(a))?)?;
        let g = local.backward(&dot)?;
        let coeff = adj(t).map_or(0.0, |a| frob(&a));
        rows.push(GradRow {
            t,
            grad_norm: model.params.grad_norm(&g),
            coeff_norm: if base > 0.0 { coeff / base } else { 0.0 },
        });
    }
    Ok(rows)
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Corpus-mean semantic-latent cosine between state `t` and the clean
/// motion for `t = 0..=T`. One noise draw per motion is shared by all `t`.
pub fn noise_similarity(
    reward: &RewardModel,
    corpus: &[MotionSample],
    schedule: &rft_core::diffusion::NoiseSchedule,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let repr = Representation::Joint;
    let refs: Vec<&MotionSample> = corpus.iter().collect();
    let clean = normalize(&reward.embed(&refs, repr, RewardPath::Semantic)?);
    let mut rng = rng::stream(seed, 50);
    let eps: Vec<Array2<f64>> = corpus
        .iter()
        .map(|s| {
            let (r, c) = s.joint.dim();
            standard_normal(r, c, &mut rng)
        })
        .collect();
    let tape = Tape::new();
    tape.set_recording(false);
    let mut out = vec![(0, 1.0)];
    for tau in 0..schedule.steps() {
        let noised = corpus
            .iter()
            .zip(&eps)
            .map(|(s, e)| forward_noise(schedule, &s.joint, tau, e))
            .collect::<rft_core::Result<Vec<_>>>()?;
        let views: Vec<&Array2<f64>> = noised.iter().collect();
        let x = Tensor::constant(reward.stack(&views, repr)?);
        let q = reward.encode_motion(&tape, &x, repr, &vec![tau + 1; corpus.len()], RewardPath::Semantic)?;
        let z = normalize(q.mu.value());
        let cos = (&z * &clean).sum() / corpus.len() as f64;
        out.push((tau + 1, cos));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryRow {
    pub engine: EngineKind,
    pub steps: usize,
    pub peak_nodes: usize,
}

/// Peak tape nodes of one engine iteration for every (engine, T). Uses
/// untrained models of the configured widths; node counts do not depend
/// on parameter values.
pub fn memory_comparison(
    reward: &RewardModel,
    net: &MlpConfig,
    schedule: &ScheduleConfig,
    engine: &EngineConfig,
    steps: &[usize],
    seed: u64,
) -> Result<Vec<MemoryRow>> {
    let mut rows = Vec::new();
    for kind in [EngineKind::Trajectory, EngineKind::EasyTune] {
        for &t in steps {
            let sched = ScheduleConfig { steps: t, ..schedule.clone() }.build()?;
            let mut store = ParamStore::new();
            let denoiser = MlpDenoiser::new(net.clone(), &mut store, &mut rng::stream(seed, 51));
            let mut model = DiffusionModel::new(sched, denoiser, store);
            let mut cfg = engine.clone();
            cfg.kind = kind;
            cfg.iterations = 1;
            cfg.eval_every = 0;
            cfg.curriculum.steps = t;
            cfg.curriculum.k = cfg.curriculum.k.min(t);
            let run = run_engine(&mut model, reward, &cfg, seed, None)?;
            rows.push(MemoryRow {
                engine: kind,
                steps: t,
                peak_nodes: run.peak_nodes(),
            });
        }
    }
    Ok(rows)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| LabError::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| LabError::io(path, e))
}

pub fn write_grad_norms(path: &Path, rows: &[GradRow]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "t,grad_norm,coeff_norm")?;
        rows.iter().try_for_each(|r| writeln!(w, "{},{},{}", r.t, r.grad_norm, r.coeff_norm))
    })
}

pub fn write_similarity(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "t,cosine")?;
        rows.iter().try_for_each(|(t, c)| writeln!(w, "{t},{c}"))
    })
}

pub fn write_memory(path: &Path, rows: &[MemoryRow]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "engine,steps,peak_nodes")?;
        rows.iter().try_for_each(|r| writeln!(w, "{},{},{}", r.engine.name(), r.steps, r.peak_nodes))
    })
}

pub fn write_live_nodes(path: &Path, runs: &[&EngineRun]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "engine,update,nodes")?;
        for run in runs {
            for (i, row) in run.trace.iter().enumerate() {
                writeln!(w, "{},{i},{}", run.kind.name(), row.peak_nodes)?;
            }
        }
        Ok(())
    })
}
