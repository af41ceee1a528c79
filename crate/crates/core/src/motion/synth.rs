//! Parametric motion families.
//!
//! Every motion is a latent 3D curve `γ(s)`, `s ∈ [−½, ½]` over the clip,
//! and joint `j` follows the curve with a lag: `joint_j(f) = γ(s_f − j·lag)`.
//! The label picks a family (`label % 3`) and a variant (`label / 3`) that
//! changes heading, amplitude and frequency. Per-sample variation is a
//! small seeded jitter of phase, speed, amplitude and heading.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;

use super::repr::MotionConfig;

const LAG: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    Walk,
    RampJump,
    Spiral,
}

impl Family {
    pub fn of_label(label: usize) -> Family {
        match label % 3 {
            0 => Family::Walk,
            1 => Family::RampJump,
            _ => Family::Spiral,
        }
    }
}

/// Shape parameters of one motion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveParams {
    pub family: Family,
    pub heading: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub speed: f64,
}

impl CurveParams {
    /// Class-typical parameters of a label, without per-sample jitter.
    pub fn for_label(label: usize) -> Self {
        let variant = (label / 3) as f64;
        CurveParams {
            family: Family::of_label(label),
            heading: 1.1 * variant,
            amplitude: 0.5 + 0.25 * variant,
            frequency: 1.5 + 0.75 * variant,
            phase: 0.0,
            speed: 1.6,
        }
    }

    pub fn jittered(label: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::for_label(label);
        p.heading += rng.random_range(-0.1..0.1);
        p.amplitude *= 1.0 + rng.random_range(-0.1..0.1);
        p.frequency *= 1.0 + rng.random_range(-0.05..0.05);
        p.phase += rng.random_range(-0.3..0.3);
        p.speed *= 1.0 + rng.random_range(-0.1..0.1);
        p
    }

    pub fn point(&self, s: f64) -> [f64; 3] {
        let (c, sn) = (self.heading.cos(), self.heading.sin());
        let w = 2.0 * PI * self.frequency;
        // Local frame: u along heading, v lateral, z up.
        let (u, v, z) = match self.family {
            Family::Walk => (
                self.speed * s,
                0.3 * self.amplitude * (0.5 * w * s + self.phase).sin(),
                self.amplitude * (w * s + self.phase).sin(),
            ),
            Family::RampJump => (
                0.6 * self.speed * s,
                0.0,
                1.2 * s + self.amplitude * (0.5 * w * s + self.phase).sin().abs() - 0.3,
            ),
            Family::Spiral => {
                let a = 0.5 * w * s + self.phase;
                (
                    (0.9 * self.amplitude + 0.3) * a.cos() - 0.5,
                    (0.9 * self.amplitude + 0.3) * a.sin(),
                    0.8 * s,
                )
            }
        };
        [c * u - sn * v, sn * u + c * v, z]
    }

    /// Joint view (`frames x 3J`) sampled from the curve.
    pub fn joint_view(&self, cfg: &MotionConfig) -> Array2<f64> {
        let denom = (cfg.frames - 1) as f64;
        Array2::from_shape_fn((cfg.frames, cfg.joint_dim()), |(f, col)| {
            let (j, a) = (col / 3, col % 3);
            let s = f as f64 / denom - 0.5 - j as f64 * LAG;
            self.point(s)[a]
        })
    }
}
