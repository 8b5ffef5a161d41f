//! Versioned binary checkpoint: shape-prefixed little-endian f64 parameter
//! blocks, optionally followed by the optimizer state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adam::{AdamHyper, AdamState};
use super::tensor::Tensor;
use super::AutodiffError;
use crate::num::Real;

const MAGIC: &[u8; 4] = b"PTSC";
const VERSION: u32 = 1;

fn write_tensor<T: Real, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_array<const N: usize, R: Read>(r: &mut R) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_tensor<T: Real, R: Read>(r: &mut R) -> Result<Tensor<T>, AutodiffError> {
    let ndim = u32::from_le_bytes(read_exact_array::<4, _>(r)?) as usize;
    if ndim > 8 {
        return Err(AutodiffError::BadCheckpoint(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(read_exact_array::<8, _>(r)?) as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > 1 << 30 {
        return Err(AutodiffError::BadCheckpoint(format!("implausible size {numel}")));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let v = f64::from_le_bytes(read_exact_array::<8, _>(r)?);
        data.push(T::of(v));
    }
    Ok(Tensor::from_vec(&shape, data))
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    params: &[Tensor<T>],
    adam: Option<&AdamState<T>>,
) -> Result<(), AutodiffError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        write_tensor(&mut w, p)?;
    }
    match adam {
        Some(state) => {
            w.write_all(&[1u8])?;
            w.write_all(&state.step.to_le_bytes())?;
            for v in [
                state.hyper.lr,
                state.hyper.beta1,
                state.hyper.beta2,
                state.hyper.eps,
                state.hyper.weight_decay,
            ] {
                w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
            }
            for t in state.m.iter().chain(&state.v) {
                write_tensor(&mut w, t)?;
            }
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(
    path: &Path,
) -> Result<(Vec<Tensor<T>>, Option<AdamState<T>>), AutodiffError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact_array::<4, _>(&mut r)?;
    if &magic != MAGIC {
        return Err(AutodiffError::BadCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact_array::<4, _>(&mut r)?);
    if version != VERSION {
        return Err(AutodiffError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact_array::<4, _>(&mut r)?) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(read_tensor(&mut r)?);
    }
    let has_adam = read_exact_array::<1, _>(&mut r)?[0];
    let adam = if has_adam == 1 {
        let step = u64::from_le_bytes(read_exact_array::<8, _>(&mut r)?);
        let mut h = [0.0f64; 5];
        for v in h.iter_mut() {
            *v = f64::from_le_bytes(read_exact_array::<8, _>(&mut r)?);
        }
        let hyper = AdamHyper {
            lr: T::of(h[0]),
            beta1: T::of(h[1]),
            beta2: T::of(h[2]),
            eps: T::of(h[3]),
            weight_decay: T::of(h[4]),
        };
        let mut m = Vec::with_capacity(count);
        for _ in 0..count {
            m.push(read_tensor(&mut r)?);
        }
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            v.push(read_tensor(&mut r)?);
        }
        Some(AdamState { hyper, step, m, v })
    } else {
        None
    };
    Ok((params, adam))
}
