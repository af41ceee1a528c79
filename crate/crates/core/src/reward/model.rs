use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::Gaussian;
use crate::error::{Error, Result};
use crate::graph::{cosine_rows, Activation, Dim, Reduce, Tape, Tensor};
use crate::motion::{MotionConfig, MotionSample, Representation};
use crate::nn::{normal_init, rng, sinusoidal, Embedding, Linear, LoraLinear, LoraPair, ParamStore};

/// Parameter-name prefixes of the three independently trained parts.
pub const BACKBONE: &str = "reward.backbone.";
pub const PSI: &str = "reward.psi.";
pub const OMEGA: &str = "reward.omega.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub step_dim: usize,
    pub pos_dim: usize,
    pub labels: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub temperature: f64,
    pub huber_delta: f64,
    /// Weights of the KL, latent, contrastive and cross-representation terms.
    pub lambda: [f64; 4],
    /// Weights of the Huber, JS and contrastive parts of cross-representation alignment.
    pub cra_alpha: [f64; 3],
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            latent_dim: 32,
            hidden: 64,
            step_dim: 16,
            pos_dim: 8,
            labels: 6,
            lora_rank: 16,
            lora_alpha: 32.0,
            temperature: 0.1,
            huber_delta: 1.0,
            lambda: [1e-5, 1e-5, 0.1, 0.1],
            cra_alpha: [0.1, 1e-5, 0.1],
        }
    }
}

/// Which encoder adapter a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Path {
    /// Backbone only.
    Semantic,
    /// ψ adapter, feeding the critic head.
    Preference,
    /// ω adapter, feeding the classifier head.
    Authenticity,
}

impl Path {
    fn adapter(self) -> Option<usize> {
        match self {
            Path::Semantic => None,
            Path::Preference => Some(0),
            Path::Authenticity => Some(1),
        }
    }
}

/// Motion-encoder output. `eta` is the reparameterization noise when the
/// latent was sampled; in eval mode `z` is the mean.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub posterior: Gaussian,
    pub z: Tensor,
    pub eta: Option<Array2<f64>>,
}

/// Scalar rewards of one motion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardScores {
    pub semantic: f64,
    pub preference: f64,
    pub authenticity: f64,
}

/// Batched reward tensors, one row per motion.
#[derive(Clone, Debug)]
pub struct RewardTensors {
    pub semantic: Tensor,
    pub preference: Tensor,
    pub authenticity: Tensor,
}

#[derive(Clone, Debug)]
struct Head {
    l1: Linear,
    l2: Linear,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, d: usize, h: usize, rng: &mut impl Rng) -> Self {
        Head {
            l1: Linear::new(store, &format!("{name}.l1"), d, h, rng),
            l2: Linear::new(store, &format!("{name}.l2"), h, 1, rng),
        }
    }

    fn forward(&self, tape: &Tape, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let h = tape.tanh(&self.l1.forward(tape, store, z)?)?;
        self.l2.forward(tape, store, &h)
    }
}

/// Unified reward model: per-representation projections into a shared
/// space, Gaussian motion and label encoders, decoders, and two
/// LoRA-adapted scoring heads.
#[derive(Clone, Debug)]
pub struct RewardModel {
    pub config: RewardConfig,
    pub motion: MotionConfig,
    pub params: ParamStore,
    proj: [Linear; 3],
    enc1: LoraLinear,
    enc2: LoraLinear,
    text_embed: Embedding,
    text1: Linear,
    text2: Linear,
    dec_trunk: Linear,
    dec_heads: [Linear; 3],
    critic: Head,
    classifier: Head,
    frame_pos: Array2<f64>,
    dec_pos: Array2<f64>,
}

impl RewardModel {
    pub fn new(config: RewardConfig, motion: MotionConfig, rng: &mut impl Rng) -> Result<Self> {
        motion.validate()?;
        if config.latent_dim == 0 || config.labels == 0 || config.lora_rank == 0 {
            return Err(Error::invalid("reward model dims must be positive"));
        }
        let (d, h) = (config.latent_dim, config.hidden);
        let mut p = ParamStore::new();
        let b = |s: &str| format!("{BACKBONE}{s}");
        let proj = Representation::ALL.map(|r| {
            Linear::new(&mut p, &b(&format!("proj.{}", r.name())), motion.dim(r), d, rng)
        });
        let mut enc1 = LoraLinear::new(Linear::new(&mut p, &b("enc1"), d + config.step_dim, h, rng));
        let mut enc2 = LoraLinear::new(Linear::new(&mut p, &b("enc2"), h, 2 * d, rng));
        let text_embed = Embedding::new(&mut p, &b("text.embed"), config.labels, d, rng);
        let text1 = Linear::new(&mut p, &b("text.l1"), d, h, rng);
        let text2 = Linear::new(&mut p, &b("text.l2"), h, 2 * d, rng);
        let dec_trunk = Linear::new(&mut p, &b("dec.trunk"), d + config.pos_dim, h, rng);
        let dec_heads = Representation::ALL.map(|r| {
            Linear::new(&mut p, &b(&format!("dec.{}", r.name())), h, motion.dim(r), rng)
        });
        for prefix in [PSI, OMEGA] {
            let (r, a) = (config.lora_rank, config.lora_alpha);
            enc1.push_adapter(LoraPair::new(&mut p, &format!("{prefix}enc1"), d + config.step_dim, h, r, a, rng));
            enc2.push_adapter(LoraPair::new(&mut p, &format!("{prefix}enc2"), h, 2 * d, r, a, rng));
        }
        let critic = Head::new(&mut p, &format!("{PSI}critic"), d, h, rng);
        let classifier = Head::new(&mut p, &format!("{OMEGA}classifier"), d, h, rng);
        let frames: Vec<usize> = (0..motion.frames).collect();
        Ok(RewardModel {
            frame_pos: sinusoidal(&frames, d),
            dec_pos: sinusoidal(&frames, config.pos_dim),
            config,
            motion,
            params: p,
            proj,
            enc1,
            enc2,
            text_embed,
            text1,
            text2,
            dec_trunk,
            dec_heads,
            critic,
            classifier,
        })
    }

    pub fn frames(&self) -> usize {
        self.motion.frames
    }

    /// Rows of `views` stacked into a `(B·frames) x dim` input.
    pub fn stack(&self, views: &[&Array2<f64>], repr: Representation) -> Result<Array2<f64>> {
        let want = (self.motion.frames, self.motion.dim(repr));
        if let Some(v) = views.iter().find(|v| v.dim() != want) {
            return Err(Error::shape(
                "reward input",
                format!("{} view is {:?}, expected {:?}", repr.name(), v.dim(), want),
            ));
        }
        let parts: Vec<_> = views.iter().map(|v| v.view()).collect();
        ndarray::concatenate(Axis(0), &parts).map_err(|e| Error::shape("reward input", e.to_string()))
    }

    pub fn stack_samples(&self, samples: &[&MotionSample], repr: Representation) -> Result<Array2<f64>> {
        let views: Vec<&Array2<f64>> = samples.iter().map(|s| s.view(repr)).collect();
        self.stack(&views, repr)
    }

    fn batch_of(&self, x: &Tensor, repr: Representation) -> Result<usize> {
        let (rows, cols) = x.shape();
        let f = self.motion.frames;
        if cols != self.motion.dim(repr) || rows % f != 0 || rows == 0 {
            return Err(Error::shape(
                "encode_motion",
                format!(
                    "{} input is {rows}x{cols}, expected (B*{f})x{}",
                    repr.name(),
                    self.motion.dim(repr)
                ),
            ));
        }
        Ok(rows / f)
    }

    /// Posterior of the motion encoder for `(B·frames) x dim` input `x`.
    /// `steps` is the noise state of each motion: 0 for clean, `s ≥ 1` for
    /// a motion noised at timestep `s − 1`.
    pub fn encode_motion(
        &self,
        tape: &Tape,
        x: &Tensor,
        repr: Representation,
        steps: &[usize],
        path: Path,
    ) -> Result<Gaussian> {
        let b = self.batch_of(x, repr)?;
        if steps.len() != b {
            return Err(Error::shape("encode_motion", format!("{} steps for {b} motions", steps.len())));
        }
        let f = self.motion.frames;
        let p = &self.params;
        let proj = self.proj[repr.index()].forward(tape, p, x)?;
        let pos = Tensor::constant(tile_rows(&self.frame_pos, b));
        let per_frame_steps: Vec<usize> = steps.iter().flat_map(|&s| std::iter::repeat_n(s, f)).collect();
        let semb = Tensor::constant(sinusoidal(&per_frame_steps, self.config.step_dim));
        let h = tape.concat(&[&tape.add(&proj, &pos)?, &semb], Dim::Cols)?;
        let h = tape.tanh(&self.enc1.forward(tape, p, &h, path.adapter())?)?;
        let pooled = tape.reduce(&h, Reduce::GroupMean(f))?;
        let out = self.enc2.forward(tape, p, &pooled, path.adapter())?;
        let d = self.config.latent_dim;
        Ok(Gaussian {
            mu: tape.slice_cols(&out, 0, d)?,
            log_sigma: tape.slice_cols(&out, d, d)?,
        })
    }

    pub fn encode_labels(&self, tape: &Tape, labels: &[usize]) -> Result<Gaussian> {
        if let Some(&l) = labels.iter().find(|&&l| l >= self.config.labels) {
            return Err(Error::OutOfRange {
                what: "label",
                value: l as i64,
                valid: format!("[0, {})", self.config.labels),
            });
        }
        let p = &self.params;
        let e = self.text_embed.forward(tape, p, labels)?;
        let h = tape.tanh(&self.text1.forward(tape, p, &e)?)?;
        let out = self.text2.forward(tape, p, &h)?;
        let d = self.config.latent_dim;
        Ok(Gaussian {
            mu: tape.slice_cols(&out, 0, d)?,
            log_sigma: tape.slice_cols(&out, d, d)?,
        })
    }

    /// Reparameterized sample `μ + σ·η`; with `rng = None` returns `μ`.
    pub fn sample_latent(&self, tape: &Tape, q: &Gaussian, rng: Option<&mut rng::Rng>) -> Result<Encoded> {
        let Some(rng) = rng else {
            return Ok(Encoded {
                posterior: q.clone(),
                z: q.mu.clone(),
                eta: None,
            });
        };
        let (rows, cols) = q.mu.shape();
        let eta = normal_init(rows, cols, 1.0, rng);
        let noise = tape.mul(&q.sigma(tape)?, &Tensor::constant(eta.clone()))?;
        Ok(Encoded {
            posterior: q.clone(),
            z: tape.add(&q.mu, &noise)?,
            eta: Some(eta),
        })
    }

    /// Reconstruct `(B·frames) x dim` motions in `repr` from latents `z`.
    pub fn decode(&self, tape: &Tape, z: &Tensor, repr: Representation) -> Result<Tensor> {
        let b = z.shape().0;
        let f = self.motion.frames;
        let rep = tape.repeat_rows(z, f)?;
        let pos = Tensor::constant(tile_rows(&self.dec_pos, b));
        let h = tape.concat(&[&rep, &pos], Dim::Cols)?;
        let h = tape.tanh(&self.dec_trunk.forward(tape, &self.params, &h)?)?;
        self.dec_heads[repr.index()].forward(tape, &self.params, &h)
    }

    /// Critic score `h_ψ` on latents from the ψ path.
    pub fn critic(&self, tape: &Tape, z: &Tensor) -> Result<Tensor> {
        self.critic.forward(tape, &self.params, z)
    }

    /// Classifier logit of `h_ω` on latents from the ω path.
    pub fn classifier_logit(&self, tape: &Tape, z: &Tensor) -> Result<Tensor> {
        self.classifier.forward(tape, &self.params, z)
    }

    /// Cosine between motion means and label means, one row per motion.
    pub fn semantic(
        &self,
        tape: &Tape,
        x: &Tensor,
        repr: Representation,
        steps: &[usize],
        labels: &[usize],
    ) -> Result<Tensor> {
        let qm = self.encode_motion(tape, x, repr, steps, Path::Semantic)?;
        let qc = self.encode_labels(tape, labels)?;
        if qm.mu.shape().0 != qc.mu.shape().0 {
            return Err(Error::shape("semantic", "one label per motion required"));
        }
        cosine_rows(tape, &qm.mu, &qc.mu)
    }

    pub fn preference(&self, tape: &Tape, x: &Tensor, repr: Representation, steps: &[usize]) -> Result<Tensor> {
        let q = self.encode_motion(tape, x, repr, steps, Path::Preference)?;
        self.critic(tape, &q.mu)
    }

    pub fn authenticity(&self, tape: &Tape, x: &Tensor, repr: Representation, steps: &[usize]) -> Result<Tensor> {
        let q = self.encode_motion(tape, x, repr, steps, Path::Authenticity)?;
        tape.act(&self.classifier_logit(tape, &q.mu)?, Activation::Sigmoid)
    }

    pub fn score_tensors(
        &self,
        tape: &Tape,
        x: &Tensor,
        repr: Representation,
        steps: &[usize],
        labels: &[usize],
    ) -> Result<RewardTensors> {
        Ok(RewardTensors {
            semantic: self.semantic(tape, x, repr, steps, labels)?,
            preference: self.preference(tape, x, repr, steps)?,
            authenticity: self.authenticity(tape, x, repr, steps)?,
        })
    }

    /// Untracked scores of a single `frames x dim` view.
    pub fn reward_scores(&self, view: &Array2<f64>, repr: Representation, step: usize, label: usize) -> Result<RewardScores> {
        let tape = Tape::new();
        tape.set_recording(false);
        let x = Tensor::constant(self.stack(&[view], repr)?);
        let s = self.score_tensors(&tape, &x, repr, &[step], &[label])?;
        Ok(RewardScores {
            semantic: s.semantic.item(),
            preference: s.preference.item(),
            authenticity: s.authenticity.item(),
        })
    }

    /// Untracked motion-encoder means (`N x d`) of a set of views.
    pub fn embed(&self, samples: &[&MotionSample], repr: Representation, path: Path) -> Result<Array2<f64>> {
        let tape = Tape::new();
        tape.set_recording(false);
        let mut rows = Vec::new();
        for chunk in samples.chunks(256) {
            let x = Tensor::constant(self.stack_samples(chunk, repr)?);
            let q = self.encode_motion(&tape, &x, repr, &vec![0; chunk.len()], path)?;
            rows.push(q.mu.value().clone());
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape("embed", e.to_string()))
    }

    /// Untracked label-encoder means (`K x d`) for every label.
    pub fn embed_labels(&self) -> Result<Array2<f64>> {
        let tape = Tape::new();
        tape.set_recording(false);
        let labels: Vec<usize> = (0..self.config.labels).collect();
        Ok(self.encode_labels(&tape, &labels)?.mu.value().clone())
    }

    /// Semantic reward of every sample against every label (`N x K`).
    pub fn semantic_matrix(&self, samples: &[&MotionSample], repr: Representation) -> Result<Array2<f64>> {
        let m = normalize(&self.embed(samples, repr, Path::Semantic)?);
        let c = normalize(&self.embed_labels()?);
        Ok(m.dot(&c.t()))
    }
}

fn tile_rows(block: &Array2<f64>, times: usize) -> Array2<f64> {
    let parts: Vec<_> = std::iter::repeat_n(block.view(), times).collect();
    ndarray::concatenate(Axis(0), &parts).expect("equal widths")
}

/// Row-wise unit normalisation of an untracked matrix.
pub fn normalize(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}
