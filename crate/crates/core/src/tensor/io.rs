//! Binary tensor dump: `rank: u32`, `dims: u32 * rank`, then the `f64` payload, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_tensor_to<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    let rank = u32::try_from(t.rank()).map_err(|_| Error::invalid("rank exceeds u32"))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in t.shape() {
        let d =
            u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one tensor; `origin` names the source in error messages.
pub fn read_tensor_from<R: Read>(mut r: R, origin: &str) -> Result<Tensor> {
    let fmt_err = |msg: String| Error::Format {
        path: origin.to_string(),
        message: msg,
    };
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|e| fmt_err(format!("missing tensor header: {e}")))?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(fmt_err(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)
            .map_err(|e| fmt_err(format!("truncated tensor header: {e}")))?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| fmt_err(format!("payload for shape {shape:?} needs {} bytes", n * 8)))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    read_tensor_from(
        BufReader::new(File::open(path)?),
        &path.display().to_string(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::new([1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        assert_eq!(&buf[..12], &[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[12..20], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 12 + 16);
        assert_eq!(read_tensor_from(&buf[..], "mem").unwrap(), t);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let t = Tensor::zeros([3, 3]);
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(
            read_tensor_from(&buf[..], "mem"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let t = Tensor::new([2, 1, 2], vec![0.1, 0.2, f64::MIN_POSITIVE, -0.0]).unwrap();
        write_tensor(&t, &p).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
