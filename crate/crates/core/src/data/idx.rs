//! IDX arrays: two zero bytes, a type code, the rank, `rank` big-endian `u32` dimensions, then
//! the big-endian payload.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxType {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxType {
    pub fn code(self) -> u8 {
        match self {
            IdxType::U8 => 0x08,
            IdxType::I8 => 0x09,
            IdxType::I16 => 0x0B,
            IdxType::I32 => 0x0C,
            IdxType::F32 => 0x0D,
            IdxType::F64 => 0x0E,
        }
    }

    pub fn from_code(code: u8) -> Option<IdxType> {
        Some(match code {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    pub fn width(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            IdxType::U8 => f64::from(b[0]),
            IdxType::I8 => f64::from(b[0] as i8),
            IdxType::I16 => f64::from(i16::from_be_bytes([b[0], b[1]])),
            IdxType::I32 => f64::from(i32::from_be_bytes(b.try_into().unwrap())),
            IdxType::F32 => f64::from(f32::from_be_bytes(b.try_into().unwrap())),
            IdxType::F64 => f64::from_be_bytes(b.try_into().unwrap()),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) -> Result<()> {
        let exact = |ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{v} is not representable as {self:?}"
                )))
            }
        };
        match self {
            IdxType::U8 => {
                exact(v.fract() == 0.0 && (0.0..=255.0).contains(&v))?;
                out.push(v as u8);
            }
            IdxType::I8 => {
                exact(v.fract() == 0.0 && (-128.0..=127.0).contains(&v))?;
                out.push(v as i8 as u8);
            }
            IdxType::I16 => {
                exact(v.fract() == 0.0 && (-32768.0..=32767.0).contains(&v))?;
                out.extend_from_slice(&(v as i16).to_be_bytes());
            }
            IdxType::I32 => {
                exact(
                    v.fract() == 0.0 && (f64::from(i32::MIN)..=f64::from(i32::MAX)).contains(&v),
                )?;
                out.extend_from_slice(&(v as i32).to_be_bytes());
            }
            IdxType::F32 => {
                exact(v.is_nan() || f64::from(v as f32) == v)?;
                out.extend_from_slice(&(v as f32).to_be_bytes());
            }
            IdxType::F64 => out.extend_from_slice(&v.to_be_bytes()),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dtype: IdxType,
    pub dims: Vec<usize>,
    /// Values widened to `f64`, row-major.
    pub data: Vec<f64>,
}

impl IdxArray {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.dims.clone(), self.data.clone())
    }
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let err = |msg: String| Error::format(path, msg);
    if bytes.len() < 4 {
        return Err(err(format!(
            "file of {} bytes has no magic number",
            bytes.len()
        )));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(format!(
            "bad magic 0x{:02x}{:02x}{:02x}{:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let dtype = IdxType::from_code(bytes[2])
        .ok_or_else(|| err(format!("unknown type code 0x{:02x}", bytes[2])))?;
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(err("rank 0 array".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(err(format!(
            "truncated header: need {header} bytes, file has {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err(format!("dimensions {dims:?} overflow")))?;
    let expected = header + count * dtype.width();
    if bytes.len() != expected {
        return Err(err(format!(
            "expected {expected} bytes for {dtype:?} {dims:?}, found {}",
            bytes.len()
        )));
    }
    let data = bytes[header..]
        .chunks_exact(dtype.width())
        .map(|c| dtype.decode(c))
        .collect();
    Ok(IdxArray { dtype, dims, data })
}

pub fn write_idx(path: impl AsRef<Path>, array: &IdxArray) -> Result<()> {
    if array.dims.is_empty() || array.dims.len() > 255 {
        return Err(Error::invalid(format!(
            "IDX rank must be in 1..=255, got {}",
            array.dims.len()
        )));
    }
    if array.dims.iter().product::<usize>() != array.data.len() {
        return Err(Error::invalid(format!(
            "dimensions {:?} do not match {} values",
            array.dims,
            array.data.len()
        )));
    }
    let mut out = vec![0, 0, array.dtype.code(), array.dims.len() as u8];
    for &d in &array.dims {
        let d =
            u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.reserve(array.data.len() * array.dtype.width());
    for &v in &array.data {
        array.dtype.encode(v, &mut out)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

/// Reads one IDX file as a tensor. `u8` arrays are scaled to `[0, 1]`; other types are kept.
pub fn load_idx(path: impl AsRef<Path>) -> Result<Tensor> {
    let arr = read_idx(path)?;
    let mut t = arr.to_tensor()?;
    if arr.dtype == IdxType::U8 {
        t.scale_in_place(1.0 / 255.0);
    }
    Ok(t)
}

/// Pairs an image file (`[N, H, W]` or `[N, C, H, W]`) with a rank-1 label file.
pub fn load_idx_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    classes: usize,
) -> Result<Dataset> {
    let images = images.as_ref();
    let mut x = load_idx(images)?;
    let dims = x.shape().to_vec();
    x = match dims.len() {
        3 => x.reshape([dims[0], 1, dims[1], dims[2]])?,
        4 => x,
        r => {
            return Err(Error::format(
                images,
                format!("image array has rank {r}, expected 3 or 4"),
            ))
        }
    };
    let labels_path = labels.as_ref();
    let lab = read_idx(labels_path)?;
    if lab.dims.len() != 1 {
        return Err(Error::format(
            labels_path,
            format!("label array has rank {}, expected 1", lab.dims.len()),
        ));
    }
    let mut out = Vec::with_capacity(lab.data.len());
    for (i, &v) in lab.data.iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 || v >= classes as f64 {
            return Err(Error::format(
                labels_path,
                format!("label {v} at index {i} is outside [0, {classes})"),
            ));
        }
        out.push(v as usize);
    }
    Dataset::new(x, out, classes, images.display().to_string())
}
