//! CIFAR-10 binary version: records of one label byte followed by 3072 pixel bytes
//! (red plane, green plane, blue plane, each 32x32 row-major).

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

const RECORDS_PER_FILE: usize = 10_000;
const PIXELS: usize = CIFAR_RECORD_BYTES - 1;

fn record_count(path: &Path) -> Result<usize> {
    let len = fs::metadata(path)?.len() as usize;
    if len == 0 || len % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::format(
            path,
            format!("size {len} bytes is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record"),
        ));
    }
    Ok(len / CIFAR_RECORD_BYTES)
}

fn decode(path: &Path, bytes: &[u8], labels: &mut Vec<usize>, pixels: &mut Vec<f64>) -> Result<()> {
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(
                path,
                format!("record {i} has label byte {label}"),
            ));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(())
}

fn read_records_into(
    path: &Path,
    limit: usize,
    labels: &mut Vec<usize>,
    pixels: &mut Vec<f64>,
) -> Result<usize> {
    let n = record_count(path)?.min(limit);
    let mut bytes = vec![0u8; n * CIFAR_RECORD_BYTES];
    File::open(path)?.read_exact(&mut bytes)?;
    decode(path, &bytes, labels, pixels)?;
    Ok(n)
}

fn assemble(labels: Vec<usize>, pixels: Vec<f64>, source: &Path) -> Result<Dataset> {
    let n = labels.len();
    let images = Tensor::new([n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, CIFAR_CLASSES, source.display().to_string())
}

/// Reads up to `limit` records (all when `None`) from one file whose size must be a whole
/// number of records.
pub fn read_cifar_records(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let (mut labels, mut pixels) = (Vec::new(), Vec::new());
    read_records_into(path, limit.unwrap_or(usize::MAX), &mut labels, &mut pixels)?;
    assemble(labels, pixels, path)
}

fn expect_full_file(path: &Path) -> Result<()> {
    let expected = RECORDS_PER_FILE * CIFAR_RECORD_BYTES;
    let actual = fs::metadata(path)?.len() as usize;
    if actual != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {actual}"),
        ));
    }
    Ok(())
}

/// The full 50000/10000 train/test split from the standard binary distribution in `dir`.
/// Every file must hold exactly 10000 records.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    for name in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
        expect_full_file(&dir.join(name))?;
    }
    load_cifar10_subset(dir, usize::MAX, usize::MAX)
}

/// The first `train` training records (across the five batch files in order) and the first
/// `test` test records. Files only need to be record aligned; asking for more records than
/// exist is an error when the limit is finite.
pub fn load_cifar10_subset(
    dir: impl AsRef<Path>,
    train: usize,
    test: usize,
) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let (mut labels, mut pixels) = (Vec::new(), Vec::new());
    for name in CIFAR_TRAIN_FILES {
        if labels.len() >= train {
            break;
        }
        read_records_into(
            &dir.join(name),
            train - labels.len(),
            &mut labels,
            &mut pixels,
        )?;
    }
    if train != usize::MAX && labels.len() < train {
        return Err(Error::format(
            dir,
            format!("requested {train} training records, found {}", labels.len()),
        ));
    }
    let train_set = assemble(labels, pixels, dir)?;

    let test_path = dir.join(CIFAR_TEST_FILE);
    let (mut labels, mut pixels) = (Vec::new(), Vec::new());
    read_records_into(&test_path, test, &mut labels, &mut pixels)?;
    if test != usize::MAX && labels.len() < test {
        return Err(Error::format(
            &test_path,
            format!("requested {test} test records, found {}", labels.len()),
        ));
    }
    Ok((train_set, assemble(labels, pixels, &test_path)?))
}

/// Writes `data` as CIFAR records. Pixels must lie in `[0, 1]` and are rounded to bytes.
pub fn write_cifar_records(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    if data.image_shape() != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::invalid(format!(
            "CIFAR records hold 3x32x32 images, got {:?}",
            data.image_shape()
        )));
    }
    if data.classes > 256 {
        return Err(Error::invalid("labels must fit in one byte"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let mut rec = vec![0u8; CIFAR_RECORD_BYTES];
    for (img, &label) in data.images.data().chunks_exact(PIXELS).zip(&data.labels) {
        rec[0] = label as u8;
        for (dst, &v) in rec[1..].iter_mut().zip(img) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
            }
            *dst = (v * 255.0).round() as u8;
        }
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}
