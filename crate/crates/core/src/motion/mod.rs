//! Synthetic labelled motions in three consistent views, plus the derived
//! preference and real-versus-generated datasets.

pub mod io;
mod repr;
mod synth;

pub use repr::{
    from_joint, joint_from_kinematic, joint_from_rotation, kinematic_from_joint,
    rotation_from_joint, to_joint, MotionConfig, Representation,
};
pub use synth::{CurveParams, Family};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{Denoiser, DiffusionModel};
use crate::error::{Error, Result};
use crate::nn::rng;

/// Default corruption ladder for preference pairs.
pub const CORRUPTION_LEVELS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSample {
    pub label: usize,
    pub kinematic: Array2<f64>,
    pub joint: Array2<f64>,
    pub rotation: Array2<f64>,
}

impl MotionSample {
    pub fn from_joint(joint: Array2<f64>, label: usize, cfg: &MotionConfig) -> Result<Self> {
        Ok(MotionSample {
            label,
            kinematic: kinematic_from_joint(&joint, cfg)?,
            rotation: rotation_from_joint(&joint, cfg)?,
            joint,
        })
    }

    /// Builds a sample from a flattened `1 x frames·3J` joint row.
    pub fn from_flat(flat: &[f64], label: usize, cfg: &MotionConfig) -> Result<Self> {
        let joint = Array2::from_shape_vec((cfg.frames, cfg.joint_dim()), flat.to_vec())
            .map_err(|_| Error::shape("motion", format!("flat length {} vs {}", flat.len(), cfg.flat_dim())))?;
        Self::from_joint(joint, label, cfg)
    }

    pub fn view(&self, repr: Representation) -> &Array2<f64> {
        match repr {
            Representation::Kinematic => &self.kinematic,
            Representation::Joint => &self.joint,
            Representation::Rotation => &self.rotation,
        }
    }

    pub fn flat_joint(&self) -> Vec<f64> {
        self.joint.iter().copied().collect()
    }
}

/// `n` samples, labels assigned round-robin so classes are balanced.
pub fn generate_corpus(n: usize, labels: usize, seed: u64, cfg: &MotionConfig) -> Result<Vec<MotionSample>> {
    cfg.validate()?;
    if labels == 0 || n < labels {
        return Err(Error::invalid(format!("need n >= K >= 1, got n={n}, K={labels}")));
    }
    let mut rng = rng::stream(seed, 10);
    (0..n)
        .map(|i| {
            let label = i % labels;
            let params = CurveParams::jittered(label, &mut rng);
            MotionSample::from_joint(params.joint_view(cfg), label, cfg)
        })
        .collect()
}

/// Stack the flattened joint views as rows.
pub fn flat_matrix(samples: &[MotionSample]) -> Array2<f64> {
    let width = samples.first().map_or(0, |s| s.joint.len());
    let mut out = Array2::zeros((samples.len(), width));
    for (i, s) in samples.iter().enumerate() {
        for (o, v) in out.row_mut(i).iter_mut().zip(s.joint.iter()) {
            *o = *v;
        }
    }
    out
}

/// Temporal jitter of up to `sigma` frames per frame, by linear
/// interpolation, followed by additive Gaussian noise of scale `sigma`.
pub fn corrupt(joint: &Array2<f64>, sigma: f64, rng: &mut impl Rng) -> Array2<f64> {
    let (frames, cols) = joint.dim();
    let last = (frames - 1) as f64;
    let mut out = Array2::zeros((frames, cols));
    for f in 0..frames {
        let pos = (f as f64 + sigma * rng.random_range(-1.0..1.0)).clamp(0.0, last);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(frames - 1);
        let w = pos - lo as f64;
        for c in 0..cols {
            out[[f, c]] = joint[[lo, c]] * (1.0 - w) + joint[[hi, c]] * w;
        }
    }
    if sigma > 0.0 {
        out.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub winner: MotionSample,
    pub loser: MotionSample,
    pub label: usize,
    pub winner_level: f64,
    pub loser_level: f64,
}

/// For every sample and every pair of corruption levels `l_i < l_j`, the
/// `l_i` copy is preferred over the `l_j` copy.
pub fn build_preference_pairs(
    corpus: &[MotionSample],
    levels: &[f64],
    seed: u64,
    cfg: &MotionConfig,
) -> Result<Vec<PreferencePair>> {
    if levels.len() < 2 {
        return Err(Error::invalid("need at least two corruption levels"));
    }
    if levels.windows(2).any(|w| !(w[0] < w[1])) || levels[0] < 0.0 {
        return Err(Error::invalid("corruption levels must be non-negative and strictly increasing"));
    }
    let mut rng = rng::stream(seed, 11);
    let mut pairs = Vec::with_capacity(corpus.len() * levels.len() * (levels.len() - 1) / 2);
    for sample in corpus {
        let copies = levels
            .iter()
            .map(|&sigma| MotionSample::from_joint(corrupt(&sample.joint, sigma, &mut rng), sample.label, cfg))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..levels.len() {
            for j in i + 1..levels.len() {
                pairs.push(PreferencePair {
                    winner: copies[i].clone(),
                    loser: copies[j].clone(),
                    label: sample.label,
                    winner_level: levels[i],
                    loser_level: levels[j],
                });
            }
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepfakeExample {
    pub motion: MotionSample,
    pub is_real: bool,
}

/// Every corpus sample paired with one generated sample of the same label,
/// interleaved real, fake, real, ...
pub fn build_deepfake_set<D: Denoiser>(
    corpus: &[MotionSample],
    model: &DiffusionModel<D>,
    seed: u64,
    cfg: &MotionConfig,
) -> Result<Vec<DeepfakeExample>> {
    if model.data_dim() != cfg.flat_dim() {
        return Err(Error::shape(
            "deepfake",
            format!("denoiser width {} vs motion width {}", model.data_dim(), cfg.flat_dim()),
        ));
    }
    let labels: Vec<usize> = corpus.iter().map(|s| s.label).collect();
    let traj = model.sample(&labels, seed)?;
    let fakes = traj.clean();
    let mut out = Vec::with_capacity(2 * corpus.len());
    for (i, real) in corpus.iter().enumerate() {
        out.push(DeepfakeExample {
            motion: real.clone(),
            is_real: true,
        });
        let row: Vec<f64> = fakes.row(i).to_vec();
        out.push(DeepfakeExample {
            motion: MotionSample::from_flat(&row, real.label, cfg)?,
            is_real: false,
        });
    }
    Ok(out)
}
