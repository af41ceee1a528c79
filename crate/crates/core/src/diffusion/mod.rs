//! Toy denoising diffusion: schedule, noise predictors, the deterministic
//! reverse step and its stop-gradient variant, one-step clean prediction,
//! samplers and ε-prediction pre-training.
//!
//! Indexing: schedule arrays and denoiser timesteps use `τ ∈ [0, T)`.
//! Trajectory states are numbered `x_T … x_0`; the reverse step that
//! produces `x_{t−1}` from `x_t` (`1 ≤ t ≤ T`) uses timestep `τ = t − 1`.
//! `forward_noise(x0, τ)` therefore produces a sample distributed like the
//! state `x_{τ+1}`.

mod denoiser;
mod schedule;

pub use denoiser::{Denoiser, LinearDenoiser, MlpConfig, MlpDenoiser};
pub use schedule::{NoiseSchedule, ScheduleConfig};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{mse, Tape, Tensor};
use crate::nn::{rng, Adam, OptimConfig, ParamStore};

/// Smallest ᾱ for which one-step clean prediction is attempted.
pub const MIN_ALPHA_BAR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Posterior mean only.
    #[default]
    Ode,
    /// Posterior mean plus `√β · z` on every step except the last.
    Sde,
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// `√ᾱ_τ x0 + √(1−ᾱ_τ) ε`.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
) -> Result<Array2<f64>> {
    schedule.check_timestep(t)?;
    if x0.dim() != eps.dim() {
        return Err(Error::shape(
            "forward_noise",
            format!("x0 {:?} vs eps {:?}", x0.dim(), eps.dim()),
        ));
    }
    let ab = schedule.alpha_bar()[t];
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Row-wise forward noising with a separate timestep per row.
pub fn forward_noise_rows(
    schedule: &NoiseSchedule,
    x0: &Array2<f64>,
    steps: &[usize],
    eps: &Array2<f64>,
) -> Result<Array2<f64>> {
    if steps.len() != x0.nrows() || x0.dim() != eps.dim() {
        return Err(Error::shape("forward_noise_rows", "rows, steps and eps disagree"));
    }
    let mut out = Array2::zeros(x0.dim());
    for (i, &t) in steps.iter().enumerate() {
        schedule.check_timestep(t)?;
        let ab = schedule.alpha_bar()[t];
        let row = &x0.row(i) * ab.sqrt() + &eps.row(i) * (1.0 - ab).sqrt();
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

/// Denoising trajectory `x_T … x_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// State `x_t`.
    pub fn state(&self, t: usize) -> &Array2<f64> {
        &self.states[self.steps() - t]
    }

    pub fn clean(&self) -> &Array2<f64> {
        self.states.last().expect("trajectory has at least x_T")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 400,
            batch: 32,
            optim: OptimConfig {
                lr: 2e-3,
                clip_norm: 1.0,
                ..Default::default()
            },
        }
    }
}

/// A noise schedule, a denoiser architecture and its parameters.
#[derive(Clone, Debug)]
pub struct DiffusionModel<D> {
    pub schedule: NoiseSchedule,
    pub net: D,
    pub params: ParamStore,
}

impl<D: Denoiser> DiffusionModel<D> {
    pub fn new(schedule: NoiseSchedule, net: D, params: ParamStore) -> Self {
        DiffusionModel {
            schedule,
            net,
            params,
        }
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn data_dim(&self) -> usize {
        self.net.data_dim()
    }

    /// ε_θ at timestep `t` for every row.
    pub fn eps(&self, tape: &Tape, x: &Tensor, t: usize, labels: &[usize]) -> Result<Tensor> {
        self.schedule.check_timestep(t)?;
        let steps = vec![t; x.shape().0];
        self.net.predict_eps(tape, &self.params, x, &steps, labels)
    }

    fn check_state_index(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange {
                what: "reverse step",
                value: t as i64,
                valid: format!("[1, {}]", self.steps()),
            });
        }
        Ok(())
    }

    /// `x_{t−1} = (1/√α)(x_t − β/√(1−ᾱ) ε_θ(x_t))`, fully tape-linked.
    pub fn reverse_step(&self, tape: &Tape, x_t: &Tensor, t: usize, labels: &[usize]) -> Result<Tensor> {
        self.check_state_index(t)?;
        let tau = t - 1;
        let (a, b) = self.schedule.reverse_coefficients(tau);
        let eps = self.eps(tape, x_t, tau, labels)?;
        tape.sub(&tape.scale(x_t, a)?, &tape.scale(&eps, b)?)
    }

    /// Same values as [`reverse_step`](Self::reverse_step), but `x_t` is
    /// detached so only the current step's parameter dependence remains.
    pub fn reverse_step_sg(&self, tape: &Tape, x_t: &Tensor, t: usize, labels: &[usize]) -> Result<Tensor> {
        self.reverse_step(tape, &tape.stop_gradient(x_t), t, labels)
    }

    /// Stochastic reverse step: posterior mean plus `√β z` for `t > 1`.
    pub fn reverse_step_sde(
        &self,
        tape: &Tape,
        x_t: &Tensor,
        t: usize,
        labels: &[usize],
        z: &Array2<f64>,
    ) -> Result<Tensor> {
        let mean = self.reverse_step(tape, x_t, t, labels)?;
        if t == 1 {
            return Ok(mean);
        }
        let sigma = self.schedule.beta()[t - 1].sqrt();
        tape.add(&mean, &Tensor::constant(z * sigma))
    }

    /// `x̂_0 = (x − √(1−ᾱ_τ) ε_θ(x, τ)) / √ᾱ_τ`.
    pub fn predict_clean(&self, tape: &Tape, x: &Tensor, t: usize, labels: &[usize]) -> Result<Tensor> {
        self.schedule.check_timestep(t)?;
        let ab = self.schedule.alpha_bar()[t];
        if ab < MIN_ALPHA_BAR {
            return Err(Error::invalid(format!(
                "alpha_bar {ab:e} at timestep {t} too small for clean prediction"
            )));
        }
        let eps = self.eps(tape, x, t, labels)?;
        let num = tape.sub(x, &tape.scale(&eps, (1.0 - ab).sqrt())?)?;
        tape.scale(&num, 1.0 / ab.sqrt())
    }

    /// `x_T ∼ N(0, I)` for a batch, drawn from the seed's first stream.
    pub fn initial_noise(&self, batch: usize, seed: u64) -> Array2<f64> {
        standard_normal(batch, self.data_dim(), &mut rng::stream(seed, 0))
    }

    pub fn sample(&self, labels: &[usize], seed: u64) -> Result<Trajectory> {
        self.sample_with(labels, seed, Sampler::Ode)
    }

    /// Untracked sampling of one trajectory per label.
    pub fn sample_with(&self, labels: &[usize], seed: u64, sampler: Sampler) -> Result<Trajectory> {
        let tape = Tape::new();
        tape.set_recording(false);
        let mut noise_rng = rng::stream(seed, 1);
        let mut x = Tensor::constant(self.initial_noise(labels.len(), seed));
        let mut states = vec![x.value().clone()];
        for t in (1..=self.steps()).rev() {
            x = match sampler {
                Sampler::Ode => self.reverse_step(&tape, &x, t, labels)?,
                Sampler::Sde => {
                    let z = standard_normal(labels.len(), self.data_dim(), &mut noise_rng);
                    self.reverse_step_sde(&tape, &x, t, labels, &z)?
                }
            };
            states.push(x.value().clone());
        }
        Ok(Trajectory {
            states,
            labels: labels.to_vec(),
            seed,
        })
    }

    /// ε-prediction pre-training on rows of `data`. Returns the mean loss of
    /// every epoch.
    pub fn pretrain(
        &mut self,
        data: &Array2<f64>,
        labels: &[usize],
        config: &PretrainConfig,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if data.nrows() != labels.len() || data.ncols() != self.data_dim() {
            return Err(Error::shape("pretrain", "data rows, labels and width disagree"));
        }
        let mut rng = rng::stream(seed, 2);
        let mut opt = Adam::new(config.optim.clone());
        let mut order: Vec<usize> = (0..data.nrows()).collect();
        let mut history = Vec::with_capacity(config.epochs);
        let tape = Tape::new();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let (mut total, mut batches) = (0.0, 0);
            for chunk in order.chunks(config.batch.max(1)) {
                let x0 = data.select(Axis(0), chunk);
                let lab: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let steps: Vec<usize> = chunk.iter().map(|_| rng.random_range(0..self.steps())).collect();
                let eps = standard_normal(chunk.len(), self.data_dim(), &mut rng);
                let xt = forward_noise_rows(&self.schedule, &x0, &steps, &eps)?;
                tape.reset();
                let pred = self
                    .net
                    .predict_eps(&tape, &self.params, &Tensor::constant(xt), &steps, &lab)?;
                let loss = mse(&tape, &pred, &Tensor::constant(eps))?;
                let grads = tape.backward(&loss)?;
                opt.step(&mut self.params, &grads);
                total += loss.item();
                batches += 1;
            }
            history.push(total / batches as f64);
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_model(theta: f64) -> DiffusionModel<LinearDenoiser> {
        let mut store = ParamStore::new();
        let net = LinearDenoiser::new(&mut store, 1, theta);
        let schedule = NoiseSchedule::from_betas(vec![0.05, 0.01]).unwrap();
        DiffusionModel::new(schedule, net, store)
    }

    #[test]
    fn forward_noise_arithmetic() {
        // β chosen so that ᾱ_0 = 0.25.
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let x = forward_noise(&s, &array![[2.0]], 0, &array![[0.0]]).unwrap();
        assert!((x[[0, 0]] - 1.0).abs() < 1e-15);
        assert!(forward_noise(&s, &array![[2.0]], 1, &array![[0.0]]).is_err());
    }

    #[test]
    fn reverse_step_arithmetic() {
        // α = 0.99, β = 0.01 at the used step, ᾱ = 0.9 via a preceding step.
        let s = NoiseSchedule::from_betas(vec![1.0 - 0.9 / 0.99, 0.01]).unwrap();
        assert!((s.alpha_bar()[1] - 0.9).abs() < 1e-12);
        let mut store = ParamStore::new();
        let net = LinearDenoiser::new(&mut store, 1, 1.0);
        let m = DiffusionModel::new(s, net, store);
        let tape = Tape::new();
        // ε_θ = θ x = 1 at x = 1.
        let y = m.reverse_step(&tape, &Tensor::scalar(1.0), 2, &[0]).unwrap();
        let expected = (1.0 / 0.99f64.sqrt()) * (1.0 - 0.01 / 0.1f64.sqrt());
        assert!((y.item() - expected).abs() < 1e-12);
        assert!((y.item() - 0.973_255_728_951).abs() < 1e-11);
        assert!(m.reverse_step(&tape, &Tensor::scalar(1.0), 0, &[0]).is_err());
        assert!(m.reverse_step(&tape, &Tensor::scalar(1.0), 3, &[0]).is_err());
    }

    #[test]
    fn predict_clean_arithmetic() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let mut store = ParamStore::new();
        let net = LinearDenoiser::new(&mut store, 1, 0.0);
        let m = DiffusionModel::new(s, net, store);
        let tape = Tape::new();
        let x0 = m.predict_clean(&tape, &Tensor::scalar(1.0), 0, &[0]).unwrap();
        assert!((x0.item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = scalar_model(0.3);
        let a = m.sample(&[0, 0], 9).unwrap();
        let b = m.sample(&[0, 0], 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.len(), 3);
        let c = m.sample_with(&[0, 0], 9, Sampler::Sde).unwrap();
        assert_eq!(c, m.sample_with(&[0, 0], 9, Sampler::Sde).unwrap());
        assert_ne!(a.clean(), c.clean());
    }
}
