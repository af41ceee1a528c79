//! Corpus snapshots.
//!
//! Binary layout, little-endian:
//!
//! | bytes      | content                                               |
//! |------------|-------------------------------------------------------|
//! | 8          | magic `RFTCORPS`                                      |
//! | 4 (u32)    | version, currently `1`                                |
//! | 6 × 4 (u32)| frames, joints, kinematic dim, rotation dim, K, n     |
//! | 8 (u64)    | generation seed                                       |
//! | per sample | `u32` label, then the kinematic, joint and rotation   |
//! |            | views as row-major binary64 (`frames × dim` each)     |
//!
//! The CSV export has one row per (sample, frame) with columns
//! `sample,label,frame,k0..,j0..,r0..`.

use std::io::{Read, Write};

use ndarray::Array2;

use super::{MotionConfig, MotionSample, Representation};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RFTCORPS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub config: MotionConfig,
    pub labels: usize,
    pub seed: u64,
    pub samples: Vec<MotionSample>,
}

fn u32_le(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("corpus", "value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_snapshot(mut w: impl Write, snap: &Snapshot) -> Result<()> {
    let cfg = &snap.config;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [cfg.frames, cfg.joints, cfg.kin_dim(), cfg.rot_dim(), snap.labels, snap.samples.len()] {
        u32_le(&mut w, v)?;
    }
    w.write_all(&snap.seed.to_le_bytes())?;
    for s in &snap.samples {
        u32_le(&mut w, s.label)?;
        for repr in Representation::ALL {
            let view = s.view(repr);
            if view.dim() != (cfg.frames, cfg.dim(repr)) {
                return Err(Error::shape("corpus snapshot", format!("{} view has wrong shape", repr.name())));
            }
            for v in view.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_view(r: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length matches"))
}

pub fn read_snapshot(mut r: impl Read) -> Result<Snapshot> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("corpus", "bad magic"));
    }
    let version = read_u32(&mut r)? as u32;
    if version != VERSION {
        return Err(Error::format("corpus", format!("unsupported version {version}")));
    }
    let frames = read_u32(&mut r)?;
    let joints = read_u32(&mut r)?;
    let kin_dim = read_u32(&mut r)?;
    let rot_dim = read_u32(&mut r)?;
    let labels = read_u32(&mut r)?;
    let n = read_u32(&mut r)?;
    let mut seed = [0u8; 8];
    r.read_exact(&mut seed)?;
    if kin_dim < 3 * joints + 4 || rot_dim < 3 * joints {
        return Err(Error::format("corpus", "view widths too small for joint count"));
    }
    let config = MotionConfig {
        frames,
        joints,
        kin_extra: kin_dim - (3 * joints + 4),
        rot_extra: rot_dim - 3 * joints,
    };
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = read_u32(&mut r)?;
        let kinematic = read_view(&mut r, frames, kin_dim)?;
        let joint = read_view(&mut r, frames, 3 * joints)?;
        let rotation = read_view(&mut r, frames, rot_dim)?;
        samples.push(MotionSample {
            label,
            kinematic,
            joint,
            rotation,
        });
    }
    Ok(Snapshot {
        config,
        labels,
        seed: u64::from_le_bytes(seed),
        samples,
    })
}

pub fn write_csv(mut w: impl Write, samples: &[MotionSample], cfg: &MotionConfig) -> Result<()> {
    let mut header = vec!["sample".to_string(), "label".into(), "frame".into()];
    for (prefix, repr) in [("k", Representation::Kinematic), ("j", Representation::Joint), ("r", Representation::Rotation)] {
        header.extend((0..cfg.dim(repr)).map(|c| format!("{prefix}{c}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for (i, s) in samples.iter().enumerate() {
        for f in 0..cfg.frames {
            let mut row = vec![i.to_string(), s.label.to_string(), f.to_string()];
            for repr in Representation::ALL {
                row.extend(s.view(repr).row(f).iter().map(|v| format!("{v}")));
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}
