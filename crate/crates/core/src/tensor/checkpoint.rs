//! Flat binary checkpoint files: named parameters with shape headers and a
//! version tag. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::optim::ParamStore;
use super::{Array, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MDRVCKP\0";
const VERSION: u32 = 1;

fn dtype_tag() -> u8 {
    std::mem::size_of::<Real>() as u8
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(dtype_tag())?;
    w.write_u64::<LittleEndian>(store.step)?;
    w.write_u64::<LittleEndian>(store.skipped_steps)?;
    let names: Vec<&str> = store.names().collect();
    w.write_u64::<LittleEndian>(names.len() as u64)?;
    for (name, entry) in store.entries() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(entry.value.shape().len() as u32)?;
        for &d in entry.value.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for arr in [&entry.value, &entry.m, &entry.v] {
            for &v in arr.data() {
                write_real(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let tag = r.read_u8()?;
    if tag != dtype_tag() {
        return Err(Error::Config(format!(
            "checkpoint precision {tag} bytes does not match build ({} bytes)",
            dtype_tag()
        )));
    }
    let mut store = ParamStore::new();
    store.step = r.read_u64::<LittleEndian>()?;
    store.skipped_steps = r.read_u64::<LittleEndian>()?;
    let count = r.read_u64::<LittleEndian>()?;
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Config(format!("bad parameter name: {e}")))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut arrays = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(read_real(&mut r)?);
            }
            arrays.push(Array::new(shape.clone(), data));
        }
        let v = arrays.pop().unwrap();
        let m = arrays.pop().unwrap();
        let value = arrays.pop().unwrap();
        store.register_with_state(&name, value, m, v);
    }
    Ok(store)
}

#[cfg(not(feature = "f32"))]
fn write_real<W: Write>(w: &mut W, v: Real) -> std::io::Result<()> {
    w.write_f64::<LittleEndian>(v)
}
#[cfg(not(feature = "f32"))]
fn read_real<R: Read>(r: &mut R) -> std::io::Result<Real> {
    r.read_f64::<LittleEndian>()
}
#[cfg(feature = "f32")]
fn write_real<W: Write>(w: &mut W, v: Real) -> std::io::Result<()> {
    w.write_f32::<LittleEndian>(v)
}
#[cfg(feature = "f32")]
fn read_real<R: Read>(r: &mut R) -> std::io::Result<Real> {
    r.read_f32::<LittleEndian>()
}
