//! Conversions between the joint, kinematic and rotation views.
//!
//! Joint view: `frames x 3J`, joint `j` occupies columns `3j..3j+3`, joint 0
//! is the root.
//!
//! Kinematic view, per frame: root velocity (3, zero at frame 0), root
//! position (3), root-relative offsets of joints `1..J` (`3(J−1)`), root
//! speed (1), then optional derived channels.
//!
//! Rotation view, per frame: root position (3), then for each segment
//! `j = 1..J` the azimuth, elevation and length of `joint_{j−1} − joint_j`,
//! then optional derived channels. A zero-length segment has both angles 0.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Kinematic,
    Joint,
    Rotation,
}

impl Representation {
    pub const ALL: [Representation; 3] = [
        Representation::Kinematic,
        Representation::Joint,
        Representation::Rotation,
    ];

    pub fn index(self) -> usize {
        match self {
            Representation::Kinematic => 0,
            Representation::Joint => 1,
            Representation::Rotation => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Representation::Kinematic => "kinematic",
            Representation::Joint => "joint",
            Representation::Rotation => "rotation",
        }
    }
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Representation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown representation {s:?}")))
    }
}

/// Motion dimensions. `kin_extra` / `rot_extra` pad the kinematic and
/// rotation views with derived channels to reach larger target widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub frames: usize,
    pub joints: usize,
    pub kin_extra: usize,
    pub rot_extra: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            frames: 24,
            joints: 4,
            kin_extra: 0,
            rot_extra: 0,
        }
    }
}

impl MotionConfig {
    /// 22 joints with 263 kinematic and 135 rotation channels per frame.
    pub fn large_preset() -> Self {
        MotionConfig {
            frames: 24,
            joints: 22,
            kin_extra: 263 - (3 * 22 + 4),
            rot_extra: 135 - 3 * 22,
        }
    }

    pub fn joint_dim(&self) -> usize {
        3 * self.joints
    }

    pub fn kin_dim(&self) -> usize {
        3 * self.joints + 4 + self.kin_extra
    }

    pub fn rot_dim(&self) -> usize {
        3 * self.joints + self.rot_extra
    }

    pub fn dim(&self, repr: Representation) -> usize {
        match repr {
            Representation::Kinematic => self.kin_dim(),
            Representation::Joint => self.joint_dim(),
            Representation::Rotation => self.rot_dim(),
        }
    }

    /// Width of a flattened joint view.
    pub fn flat_dim(&self) -> usize {
        self.frames * self.joint_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.joints < 2 {
            return Err(Error::invalid("motions need at least 2 frames and 2 joints"));
        }
        Ok(())
    }

    fn check(&self, view: &Array2<f64>, repr: Representation) -> Result<()> {
        let expected = (self.frames, self.dim(repr));
        if view.dim() != expected {
            return Err(Error::shape(
                "motion view",
                format!("{} view is {:?}, expected {:?}", repr.name(), view.dim(), expected),
            ));
        }
        Ok(())
    }
}

fn joint_at(j: &Array2<f64>, f: usize, idx: usize) -> [f64; 3] {
    [j[[f, 3 * idx]], j[[f, 3 * idx + 1]], j[[f, 3 * idx + 2]]]
}

pub fn kinematic_from_joint(joint: &Array2<f64>, cfg: &MotionConfig) -> Result<Array2<f64>> {
    cfg.check(joint, Representation::Joint)?;
    let (f_n, n_j) = (cfg.frames, cfg.joints);
    let base = 3 * n_j + 4;
    let mut k = Array2::zeros((f_n, cfg.kin_dim()));
    for f in 0..f_n {
        let root = joint_at(joint, f, 0);
        if f > 0 {
            let prev = joint_at(joint, f - 1, 0);
            let mut speed = 0.0;
            for a in 0..3 {
                let v = root[a] - prev[a];
                k[[f, a]] = v;
                speed += v * v;
            }
            k[[f, base - 1]] = speed.sqrt();
        }
        for a in 0..3 {
            k[[f, 3 + a]] = root[a];
        }
        for idx in 1..n_j {
            let p = joint_at(joint, f, idx);
            for a in 0..3 {
                k[[f, 3 + 3 * idx + a]] = p[a] - root[a];
            }
        }
        // Derived padding: per-joint velocities, repeated cyclically.
        for e in 0..cfg.kin_extra {
            let c = e % (3 * n_j);
            k[[f, base + e]] = if f > 0 {
                joint[[f, c]] - joint[[f - 1, c]]
            } else {
                0.0
            };
        }
    }
    Ok(k)
}

pub fn joint_from_kinematic(kin: &Array2<f64>, cfg: &MotionConfig) -> Result<Array2<f64>> {
    cfg.check(kin, Representation::Kinematic)?;
    let mut j = Array2::zeros((cfg.frames, cfg.joint_dim()));
    for f in 0..cfg.frames {
        for a in 0..3 {
            let root = kin[[f, 3 + a]];
            j[[f, a]] = root;
            for idx in 1..cfg.joints {
                j[[f, 3 * idx + a]] = root + kin[[f, 3 + 3 * idx + a]];
            }
        }
    }
    Ok(j)
}

pub fn rotation_from_joint(joint: &Array2<f64>, cfg: &MotionConfig) -> Result<Array2<f64>> {
    cfg.check(joint, Representation::Joint)?;
    let n_j = cfg.joints;
    let base = 3 * n_j;
    let mut r = Array2::zeros((cfg.frames, cfg.rot_dim()));
    for f in 0..cfg.frames {
        let root = joint_at(joint, f, 0);
        for a in 0..3 {
            r[[f, a]] = root[a];
        }
        for idx in 1..n_j {
            let p = joint_at(joint, f, idx - 1);
            let q = joint_at(joint, f, idx);
            let v = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let (az, el) = if len == 0.0 {
                (0.0, 0.0)
            } else {
                (v[1].atan2(v[0]), v[2].atan2(v[0].hypot(v[1])))
            };
            r[[f, 3 * idx]] = az;
            r[[f, 3 * idx + 1]] = el;
            r[[f, 3 * idx + 2]] = len;
        }
        // Derived padding: sines then cosines of the segment angles.
        let angles = 2 * (n_j - 1);
        for e in 0..cfg.rot_extra {
            let a = e % angles;
            let col = 3 * (1 + a / 2) + a % 2;
            let v = r[[f, col]];
            r[[f, base + e]] = if (e / angles) % 2 == 0 { v.sin() } else { v.cos() };
        }
    }
    Ok(r)
}

pub fn joint_from_rotation(rot: &Array2<f64>, cfg: &MotionConfig) -> Result<Array2<f64>> {
    cfg.check(rot, Representation::Rotation)?;
    let mut j = Array2::zeros((cfg.frames, cfg.joint_dim()));
    for f in 0..cfg.frames {
        let mut prev = [rot[[f, 0]], rot[[f, 1]], rot[[f, 2]]];
        j.slice_mut(s![f, 0..3]).assign(&ndarray::arr1(&prev));
        for idx in 1..cfg.joints {
            let (az, el, len) = (rot[[f, 3 * idx]], rot[[f, 3 * idx + 1]], rot[[f, 3 * idx + 2]]);
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            for a in 0..3 {
                prev[a] -= len * dir[a];
                j[[f, 3 * idx + a]] = prev[a];
            }
        }
    }
    Ok(j)
}

/// Any view back to the joint view.
pub fn to_joint(view: &Array2<f64>, repr: Representation, cfg: &MotionConfig) -> Result<Array2<f64>> {
    match repr {
        Representation::Kinematic => joint_from_kinematic(view, cfg),
        Representation::Joint => {
            cfg.check(view, repr)?;
            Ok(view.clone())
        }
        Representation::Rotation => joint_from_rotation(view, cfg),
    }
}

/// The joint view rendered in `repr`.
pub fn from_joint(joint: &Array2<f64>, repr: Representation, cfg: &MotionConfig) -> Result<Array2<f64>> {
    match repr {
        Representation::Kinematic => kinematic_from_joint(joint, cfg),
        Representation::Joint => {
            cfg.check(joint, repr)?;
            Ok(joint.clone())
        }
        Representation::Rotation => rotation_from_joint(joint, cfg),
    }
}
