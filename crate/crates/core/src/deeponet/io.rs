//! Binary model files.
//!
//! Layout (little-endian): magic `ARZNODON`, format version (u32), `m`, `b`
//! (u64), `c_scale` and the two head scales (f64), a 32-byte configuration
//! hash, then for branch and trunk the layer count (u64), every layer shape
//! `(in, out)` (u64 pairs) and a tanh-on-last flag (u8). Parameter blocks
//! follow as f64 in the fixed tensor order of the model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::dense::{Dense, Mlp};
use super::model::DeepOnet;
use crate::error::{Error, Result};
use crate::kernel::{read_f64, read_f64s, read_u64};

pub const MAGIC: &[u8; 8] = b"ARZNODON";
pub const VERSION: u32 = 1;
const MAX_WIDTH: u64 = 1 << 16;

pub fn write_model<W: Write>(model: &DeepOnet, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(model.m as u64).to_le_bytes())?;
    w.write_all(&(model.b as u64).to_le_bytes())?;
    for v in [model.c_scale, model.out_scale[0], model.out_scale[1]] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&model.tag)?;
    for mlp in [&model.branch, &model.trunk] {
        w.write_all(&(mlp.layers.len() as u64).to_le_bytes())?;
        for d in &mlp.layers {
            let (i, o) = d.shape();
            w.write_all(&(i as u64).to_le_bytes())?;
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        w.write_all(&[mlp.tanh_last as u8])?;
    }
    let mut buf = Vec::with_capacity(8 * model.param_count());
    for t in model.tensors() {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("model file is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_shapes<R: Read>(r: &mut R) -> Result<(Vec<(usize, usize)>, bool)> {
    let n = read_u64(r)?;
    if n == 0 || n > 64 {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let mut shapes = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let (i, o) = (read_u64(r)?, read_u64(r)?);
        if i == 0 || o == 0 || i > MAX_WIDTH || o > MAX_WIDTH {
            return Err(Error::Format(format!("implausible layer shape {i} x {o}")));
        }
        shapes.push((i as usize, o as usize));
    }
    if shapes.windows(2).any(|w| w[0].1 != w[1].0) {
        return Err(Error::Format("layer shapes do not chain".into()));
    }
    let mut flag = [0u8];
    read_exact(r, &mut flag)?;
    Ok((shapes, flag[0] != 0))
}

pub fn read_model<R: Read>(r: &mut R) -> Result<DeepOnet> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a DeepONet model file".into()));
    }
    let mut version = [0u8; 4];
    read_exact(r, &mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model format version {version}")));
    }
    let (m, b) = (read_u64(r)? as usize, read_u64(r)? as usize);
    let c_scale = read_f64(r)?;
    let out_scale = [read_f64(r)?, read_f64(r)?];
    let mut tag = [0u8; 32];
    read_exact(r, &mut tag)?;
    let (branch_shapes, branch_last) = read_shapes(r)?;
    let (trunk_shapes, trunk_last) = read_shapes(r)?;
    if branch_shapes[0].0 != m || branch_shapes.last().unwrap().1 != 2 * b {
        return Err(Error::Format(format!("branch shapes do not match m = {m}, b = {b}")));
    }
    if trunk_shapes[0].0 != 2 || trunk_shapes.last().unwrap().1 != b {
        return Err(Error::Format(format!("trunk shapes do not match b = {b}")));
    }
    let mut read_mlp = |shapes: &[(usize, usize)], tanh_last: bool| -> Result<Mlp> {
        let mut layers = Vec::with_capacity(shapes.len());
        for &(i, o) in shapes {
            let w = Array2::from_shape_vec((i, o), read_f64s(r, i * o)?).unwrap();
            let bias = Array1::from(read_f64s(r, o)?);
            layers.push(Dense { w, b: bias });
        }
        Ok(Mlp { layers, tanh_last })
    };
    let branch = read_mlp(&branch_shapes, branch_last)?;
    let trunk = read_mlp(&trunk_shapes, trunk_last)?;
    let out_bias = Array1::from(read_f64s(r, 2)?);
    Ok(DeepOnet { m, b, c_scale, out_scale, out_bias, branch, trunk, tag })
}

pub fn save_model(model: &DeepOnet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DeepOnet> {
    let mut r = BufReader::new(File::open(path)?);
    read_model(&mut r)
}
