use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::graph::{Tape, Tensor};

pub fn normal_init(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Dense layer `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_init(in_dim, out_dim, std, rng));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, out_dim)));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = store.bind(tape, self.weight);
        let b = store.bind(tape, self.bias);
        tape.add(&tape.matmul(x, &w)?, &b)
    }
}

/// Low-rank update pair: the adapted weight is `W + (alpha / r) A B`.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraPair {
    /// `A` small Gaussian, `B` zero, so the adapter starts as an exact no-op.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let a = store.add(format!("{name}.lora_a"), normal_init(in_dim, rank, 0.02, rng));
        let b = store.add(format!("{name}.lora_b"), Array2::zeros((rank, out_dim)));
        LoraPair { a, b, rank, alpha }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The low-rank delta `(alpha / r) A B` as a dense matrix.
    pub fn delta(&self, store: &ParamStore) -> Array2<f64> {
        store.get(self.a).dot(store.get(self.b)) * self.scale()
    }
}

/// Dense layer with any number of selectable LoRA adapters.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapters: Vec<LoraPair>,
}

impl LoraLinear {
    pub fn new(base: Linear) -> Self {
        LoraLinear {
            base,
            adapters: Vec::new(),
        }
    }

    pub fn push_adapter(&mut self, pair: LoraPair) -> usize {
        self.adapters.push(pair);
        self.adapters.len() - 1
    }

    /// Base output plus, when `adapter` is set, `(alpha/r) (x A) B`.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: &Tensor,
        adapter: Option<usize>,
    ) -> Result<Tensor> {
        let base = self.base.forward(tape, store, x)?;
        let Some(i) = adapter else { return Ok(base) };
        let pair = &self.adapters[i];
        let a = store.bind(tape, pair.a);
        let b = store.bind(tape, pair.b);
        let low = tape.matmul(&tape.matmul(x, &a)?, &b)?;
        tape.add(&base, &tape.scale(&low, pair.scale())?)
    }
}

/// Lookup table of learned row vectors.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        count: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let table = store.add(format!("{name}.table"), normal_init(count, dim, 1.0, rng));
        Embedding { table, count, dim }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
        tape.gather(&store.bind(tape, self.table), ids)
    }
}

/// Fixed sinusoidal embedding of a step index, one row per entry of `steps`.
pub fn sinusoidal(steps: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((steps.len(), dim), |(r, c)| {
        let t = steps[r] as f64;
        let k = c % half.max(1);
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        if c < half {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}
