use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, Dim, Tape, Tensor};
use crate::nn::{sinusoidal, Embedding, Linear, ParamId, ParamStore};

/// Noise predictor ε_θ(x_t, t, c). Rows of `x` are independent samples;
/// `steps` holds the timestep index of each row and `labels` its condition.
pub trait Denoiser {
    fn data_dim(&self) -> usize;

    fn predict_eps(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: &Tensor,
        steps: &[usize],
        labels: &[usize],
    ) -> Result<Tensor>;
}

pub(crate) fn check_batch(x: &Tensor, dim: usize, steps: &[usize], labels: &[usize]) -> Result<()> {
    let (rows, cols) = x.shape();
    if cols != dim || steps.len() != rows || labels.len() != rows {
        return Err(Error::shape(
            "denoiser",
            format!(
                "x is {rows}x{cols} (expected width {dim}), {} steps, {} labels",
                steps.len(),
                labels.len()
            ),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub labels: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            data_dim: 288,
            hidden: 128,
            depth: 2,
            time_dim: 16,
            cond_dim: 16,
            labels: 6,
        }
    }
}

/// Dense network over `[x, sinusoidal(t), embed(c)]` with SiLU hidden layers.
///
/// With preconditioning the network output `G` is read as a scaled clean
/// estimate: for `x̃ = x/√ᾱ` at noise level `σ² = (1−ᾱ)/ᾱ`, it computes
/// `D = c_skip x̃ + c_out G(c_in x̃)` in the usual way and returns
/// `ε = (x̃ − D)/σ`. The identity path then needs no hidden capacity,
/// which a narrow net cannot otherwise provide at high noise.
#[derive(Clone, Debug)]
pub struct MlpDenoiser {
    pub config: MlpConfig,
    cond: Embedding,
    layers: Vec<Linear>,
    precond: Option<Precond>,
}

#[derive(Clone, Debug)]
struct Precond {
    alpha_bar: Vec<f64>,
    sigma_data: f64,
}

impl Precond {
    /// `(input scale, skip scale, output scale)` applied to `x` and `G`.
    fn scales(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar[t];
        let s2 = (1.0 - ab) / ab;
        let sd2 = self.sigma_data * self.sigma_data;
        let norm = (s2 + sd2).sqrt();
        (1.0 / (norm * ab.sqrt()), s2.sqrt() / ((s2 + sd2) * ab.sqrt()), self.sigma_data / norm)
    }
}

impl MlpDenoiser {
    pub fn new(config: MlpConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let cond = Embedding::new(store, "denoiser.cond", config.labels, config.cond_dim, rng);
        let mut layers = Vec::new();
        let mut width = config.data_dim + config.time_dim + config.cond_dim;
        for i in 0..config.depth {
            layers.push(Linear::new(store, &format!("denoiser.l{i}"), width, config.hidden, rng));
            width = config.hidden;
        }
        layers.push(Linear::new(store, "denoiser.out", width, config.data_dim, rng));
        MlpDenoiser {
            config,
            cond,
            layers,
            precond: None,
        }
    }

    /// Switches on preconditioning for `alpha_bar` with data scale
    /// `sigma_data`.
    pub fn preconditioned(mut self, alpha_bar: &[f64], sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0) || alpha_bar.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::invalid("preconditioning needs sigma_data > 0 and alpha_bar in (0, 1)"));
        }
        self.precond = Some(Precond {
            alpha_bar: alpha_bar.to_vec(),
            sigma_data,
        });
        Ok(self)
    }

    pub fn is_preconditioned(&self) -> bool {
        self.precond.is_some()
    }

    fn row_scales(&self, p: &Precond, steps: &[usize], which: usize) -> Result<Tensor> {
        let mut m = Array2::zeros((steps.len(), self.config.data_dim));
        for (i, &t) in steps.iter().enumerate() {
            if t >= p.alpha_bar.len() {
                return Err(Error::OutOfRange {
                    what: "timestep",
                    value: t as i64,
                    valid: format!("[0, {})", p.alpha_bar.len()),
                });
            }
            let s = p.scales(t);
            m.row_mut(i).fill([s.0, s.1, s.2][which]);
        }
        Ok(Tensor::constant(m))
    }
}

impl Denoiser for MlpDenoiser {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn predict_eps(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: &Tensor,
        steps: &[usize],
        labels: &[usize],
    ) -> Result<Tensor> {
        check_batch(x, self.config.data_dim, steps, labels)?;
        if let Some(&l) = labels.iter().find(|&&l| l >= self.config.labels) {
            return Err(Error::OutOfRange {
                what: "label",
                value: l as i64,
                valid: format!("[0, {})", self.config.labels),
            });
        }
        let temb = Tensor::constant(sinusoidal(steps, self.config.time_dim));
        let cemb = self.cond.forward(tape, store, labels)?;
        let input = match &self.precond {
            Some(p) => tape.mul(x, &self.row_scales(p, steps, 0)?)?,
            None => x.clone(),
        };
        let mut h = tape.concat(&[&input, &temb, &cemb], Dim::Cols)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, &h)?;
            if i < last {
                h = tape.act(&h, Activation::Silu)?;
            }
        }
        match &self.precond {
            Some(p) => {
                let skip = tape.mul(x, &self.row_scales(p, steps, 1)?)?;
                tape.sub(&skip, &tape.mul(&h, &self.row_scales(p, steps, 2)?)?)
            }
            None => Ok(h),
        }
    }
}

/// ε_θ(x) = θ·x with a single scalar θ. Small enough for closed-form
/// gradient checks of the reverse process.
#[derive(Clone, Debug)]
pub struct LinearDenoiser {
    pub theta: ParamId,
    pub dim: usize,
}

impl LinearDenoiser {
    pub fn new(store: &mut ParamStore, dim: usize, theta: f64) -> Self {
        let theta = store.add("denoiser.theta", Array2::from_elem((1, 1), theta));
        LinearDenoiser { theta, dim }
    }
}

impl Denoiser for LinearDenoiser {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn predict_eps(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: &Tensor,
        steps: &[usize],
        labels: &[usize],
    ) -> Result<Tensor> {
        check_batch(x, self.dim, steps, labels)?;
        tape.mul(x, &store.bind(tape, self.theta))
    }
}
