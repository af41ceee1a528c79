//! Named-parameter checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                        |
//! |--------------|------------------------------------------------|
//! | 8            | magic `RFTPARAM`                               |
//! | 4 (u32)      | format version, currently `1`                  |
//! | 4 (u32)      | number of entries `n`                          |
//! | per entry    | `u32` name length, UTF-8 name bytes,           |
//! |              | `u32` rows, `u32` cols,                        |
//! |              | `rows * cols` IEEE-754 binary64 values, row-major |
//!
//! Entries appear in store insertion order. Names are namespaced with `.`
//! (for example `reward.encoder.l1.weight`), so several models can share a
//! file and be loaded selectively by prefix.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RFTPARAM";
pub const VERSION: u32 = 1;

pub fn write_entries<'a, W: Write>(
    mut w: W,
    entries: impl IntoIterator<Item = (&'a str, &'a Array2<f64>)>,
) -> Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, value) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(value.nrows() as u32).to_le_bytes())?;
        w.write_all(&(value.ncols() as u32).to_le_bytes())?;
        for v in value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<(String, Array2<f64>)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("checkpoint", "name is not UTF-8"))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let value = Array2::from_shape_vec((rows, cols), data).expect("length matches");
        out.push((name, value));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_entries(file, store.iter().map(|(_, n, v)| (n, v)))
}

/// Overwrite every parameter of `store` from the file. Extra entries in the
/// file are ignored; a missing or misshapen parameter is an error.
pub fn load_into(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let entries = read_entries(file)?;
    assign(store, entries)
}

pub fn assign(store: &mut ParamStore, entries: Vec<(String, Array2<f64>)>) -> Result<()> {
    assign_where(store, entries, |_| true)
}

/// Overwrite the parameters whose name satisfies `pred`; each of them must
/// be present in `entries`. Other entries are ignored.
pub fn assign_where(
    store: &mut ParamStore,
    entries: Vec<(String, Array2<f64>)>,
    pred: impl Fn(&str) -> bool,
) -> Result<()> {
    let mut found = vec![false; store.len()];
    for (name, value) in entries {
        if !pred(&name) {
            continue;
        }
        if let Some(id) = store.id(&name) {
            store.set(id, value)?;
            found[id.0] = true;
        }
    }
    let missing = store.ids().find(|&id| pred(store.name(id)) && !found[id.0]);
    if let Some(id) = missing {
        return Err(Error::format("checkpoint", format!("missing parameter {}", store.name(id))));
    }
    Ok(())
}
