//! Class-conditional surrogate images in the CIFAR-10 layout, for runs without the real data.
//!
//! Each class owns a colour and an oriented sinusoidal grating; samples draw a random phase,
//! contrast and brightness and add pixel noise. Pixels are quantized to multiples of 1/255 so a
//! dataset survives a round trip through the binary format unchanged.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use super::cifar::{
    write_cifar_records, CIFAR_CLASSES, CIFAR_SIDE, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const RECORDS_PER_FILE: usize = 10_000;

struct Prototype {
    color: [f64; 3],
    freq: f64,
    angle: f64,
}

fn prototypes(seed: u64) -> Vec<Prototype> {
    let mut rng = Rng::new(seed).derive(0x5EED);
    (0..CIFAR_CLASSES)
        .map(|k| Prototype {
            color: [rng.uniform(), rng.uniform(), rng.uniform()],
            freq: 1.0 + (k % 5) as f64,
            angle: PI * (k as f64) / CIFAR_CLASSES as f64 + 0.2 * rng.uniform(),
        })
        .collect()
}

/// `n` balanced samples in random class order. The class prototypes depend on `seed` only
/// through a fixed derivation, so train and test sets drawn with different `sample_seed`s
/// share them.
pub fn synthetic_cifar(n: usize, seed: u64, sample_seed: u64) -> Result<Dataset> {
    let protos = prototypes(seed);
    let mut rng = Rng::new(seed).derive(sample_seed.wrapping_add(1));
    let mut labels: Vec<usize> = (0..n).map(|i| i % CIFAR_CLASSES).collect();
    rng.shuffle(&mut labels);
    let side = CIFAR_SIDE;
    let mut data = Vec::with_capacity(n * 3 * side * side);
    for &label in &labels {
        let p = &protos[label];
        let phase = 2.0 * PI * rng.uniform();
        let contrast = 0.15 + 0.15 * rng.uniform();
        let brightness = 0.15 * (rng.uniform() - 0.5);
        let (s, c) = p.angle.sin_cos();
        for ch in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let u = (x as f64 * c + y as f64 * s) / side as f64;
                    let wave = (2.0 * PI * p.freq * u + phase).sin();
                    let v = 0.25
                        + 0.5 * p.color[ch]
                        + contrast * wave
                        + brightness
                        + 0.08 * rng.normal();
                    data.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
                }
            }
        }
    }
    let images = Tensor::new([n, 3, side, side], data)?;
    Dataset::new(
        images,
        labels,
        CIFAR_CLASSES,
        format!("synthetic(seed={seed})"),
    )
}

/// Writes a CIFAR-10 style directory: training records spread over the five batch files at
/// most 10000 per file, and the test records in the test file.
pub fn write_synthetic_cifar_dir(
    dir: impl AsRef<Path>,
    train: usize,
    test: usize,
    seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    if train == 0 || test == 0 || train > RECORDS_PER_FILE * CIFAR_TRAIN_FILES.len() {
        return Err(Error::invalid(format!(
            "cannot lay out {train} training and {test} test records"
        )));
    }
    fs::create_dir_all(dir)?;
    let all = synthetic_cifar(train, seed, 0)?;
    for (i, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        let start = i * RECORDS_PER_FILE;
        if start >= train {
            break;
        }
        let count = RECORDS_PER_FILE.min(train - start);
        let part = Dataset::new(
            all.images.slice_outer(start, count)?,
            all.labels[start..start + count].to_vec(),
            CIFAR_CLASSES,
            "",
        )?;
        write_cifar_records(dir.join(name), &part)?;
    }
    write_cifar_records(dir.join(CIFAR_TEST_FILE), &synthetic_cifar(test, seed, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_cifar10_subset;

    #[test]
    fn deterministic_balanced_and_quantized() {
        let a = synthetic_cifar(40, 3, 0).unwrap();
        assert_eq!(a, synthetic_cifar(40, 3, 0).unwrap());
        assert_ne!(a.images, synthetic_cifar(40, 3, 1).unwrap().images);
        assert_eq!(a.class_counts(), vec![4; 10]);
        assert!(a
            .images
            .data()
            .iter()
            .all(|&v| (v * 255.0).round() == v * 255.0 && (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar_dir(dir.path(), 30, 20, 7).unwrap();
        let (train, test) = load_cifar10_subset(dir.path(), 30, 20).unwrap();
        let expect = synthetic_cifar(30, 7, 0).unwrap();
        assert_eq!(train.images, expect.images);
        assert_eq!(train.labels, expect.labels);
        assert_eq!(test.len(), 20);
    }
}
