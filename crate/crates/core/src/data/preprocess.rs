use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::gemm::{gemm, transpose};
use crate::tensor::Tensor;

/// Lower bound on the per-image standard deviation divided out by [`gcn`].
pub const GCN_FLOOR: f64 = 1e-8;
/// Default whitening regularizer.
pub const ZCA_EPS: f64 = 0.1;

fn per_sample(images: &Tensor) -> usize {
    images.len().checked_div(images.dim(0)).unwrap_or(0)
}

/// Global contrast normalization: each image minus its scalar mean, divided by
/// `max(std, GCN_FLOOR)`.
pub fn gcn(images: &Tensor) -> Tensor {
    let mut out = images.clone();
    let d = per_sample(images);
    if d == 0 {
        return out;
    }
    for img in out.data_mut().chunks_exact_mut(d) {
        let mean = img.iter().sum::<f64>() / d as f64;
        let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let scale = 1.0 / var.sqrt().max(GCN_FLOOR);
        for v in img.iter_mut() {
            *v = (*v - mean) * scale;
        }
    }
    out
}

/// Zero-phase whitening fitted on a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ZcaTransform {
    pub mean: Vec<f64>,
    /// Symmetric `[D, D]`.
    pub whitening: Tensor,
    pub eps: f64,
}

/// Fits `W = U diag(1/sqrt(lambda + eps)) U^T` to the covariance of `images` (flattened per
/// sample, population normalization).
pub fn zca_fit(images: &Tensor, eps: f64) -> Result<ZcaTransform> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!(
            "zca eps must be positive, got {eps}"
        )));
    }
    let n = images.dim(0);
    let d = per_sample(images);
    if n < 2 || d == 0 {
        return Err(Error::invalid("zca needs at least two non-empty samples"));
    }
    if !images.is_finite() {
        return Err(Error::invalid("zca input contains non-finite values"));
    }
    let mut mean = vec![0.0; d];
    for img in images.data().chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(img) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = images.data().to_vec();
    for img in centered.chunks_exact_mut(d) {
        for (v, m) in img.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut ct = vec![0.0; d * n];
    transpose(n, d, &centered, &mut ct);
    let mut cov = vec![0.0; d * d];
    gemm(d, d, n, &ct, &centered, &mut cov, false);
    cov.iter_mut().for_each(|c| *c /= n as f64);

    let m = DMatrix::from_row_slice(d, d, &cov);
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 1000 * d.max(10)).ok_or_else(|| {
        Error::Numeric(format!(
            "eigendecomposition of the {d}x{d} covariance did not converge"
        ))
    })?;
    let u = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(d, d, |r, c| {
        u[(r, c)] / (eig.eigenvalues[c].max(0.0) + eps).sqrt()
    });
    let w = scaled * u.transpose();
    let mut data = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            data[r * d + c] = 0.5 * (w[(r, c)] + w[(c, r)]);
        }
    }
    Ok(ZcaTransform {
        mean,
        whitening: Tensor::new([d, d], data)?,
        eps,
    })
}

/// Subtracts the fitted mean and multiplies every sample by the whitening matrix.
pub fn zca_apply(t: &ZcaTransform, images: &Tensor) -> Result<Tensor> {
    let d = t.mean.len();
    if per_sample(images) != d {
        return Err(Error::invalid(format!(
            "zca fitted on {d} values per sample, got {}",
            per_sample(images)
        )));
    }
    let n = images.dim(0);
    let mut centered = images.data().to_vec();
    for img in centered.chunks_exact_mut(d) {
        for (v, m) in img.iter_mut().zip(&t.mean) {
            *v -= m;
        }
    }
    let mut out = vec![0.0; n * d];
    gemm(n, d, d, &centered, t.whitening.data(), &mut out, false);
    Tensor::new(images.shape().to_vec(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel mean and population standard deviation over `[N, H, W]`.
pub fn channel_stats(images: &Tensor) -> Result<ChannelStats> {
    let (n, c, h, w) = images.nchw()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    if count == 0.0 {
        return Err(Error::invalid("channel statistics of an empty batch"));
    }
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (i, plane) in images.data().chunks_exact(hw).enumerate() {
        mean[i % c] += plane.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, plane) in images.data().chunks_exact(hw).enumerate() {
        let m = mean[i % c];
        sq[i % c] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    let std = sq.iter().map(|s| (s / count).sqrt()).collect();
    Ok(ChannelStats { mean, std })
}

pub fn standardize(images: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let (_, c, h, w) = images.nchw()?;
    if c != stats.mean.len() {
        return Err(Error::invalid(format!(
            "statistics for {} channels, images have {c}",
            stats.mean.len()
        )));
    }
    let mut out = images.clone();
    for (i, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let (m, s) = (stats.mean[i % c], stats.std[i % c].max(GCN_FLOOR));
        for v in plane {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preprocessing {
    GcnZca { eps: f64 },
    Standardize,
    None,
}

impl fmt::Display for Preprocessing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preprocessing::GcnZca { .. } => f.write_str("gcn-zca"),
            Preprocessing::Standardize => f.write_str("standardize"),
            Preprocessing::None => f.write_str("none"),
        }
    }
}

impl FromStr for Preprocessing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gcn-zca" => Ok(Preprocessing::GcnZca { eps: ZCA_EPS }),
            "standardize" => Ok(Preprocessing::Standardize),
            "none" => Ok(Preprocessing::None),
            other => Err(Error::invalid(format!(
                "unknown preprocessing `{other}` (expected gcn-zca, standardize or none)"
            ))),
        }
    }
}

/// A preprocessing pipeline fitted on a training set, applied unchanged to other splits.
#[derive(Debug, Clone, PartialEq)]
pub enum Preprocessor {
    Identity,
    Standardize(ChannelStats),
    GcnZca(ZcaTransform),
}

impl Preprocessor {
    pub fn fit(kind: Preprocessing, train: &Dataset) -> Result<Preprocessor> {
        Ok(match kind {
            Preprocessing::None => Preprocessor::Identity,
            Preprocessing::Standardize => Preprocessor::Standardize(channel_stats(&train.images)?),
            Preprocessing::GcnZca { eps } => {
                Preprocessor::GcnZca(zca_fit(&gcn(&train.images), eps)?)
            }
        })
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        match self {
            Preprocessor::Identity => {}
            Preprocessor::Standardize(s) => {
                data.images = standardize(&data.images, s)?;
                data.preprocessing.push("standardize".into());
            }
            Preprocessor::GcnZca(z) => {
                data.images = zca_apply(z, &gcn(&data.images))?;
                data.preprocessing.push("gcn".into());
                data.preprocessing.push(format!("zca(eps={})", z.eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn covariance(x: &Tensor) -> DMatrix<f64> {
        let n = x.dim(0);
        let d = x.len() / n;
        let m = DMatrix::from_row_slice(n, d, x.data());
        let mean = m.row_mean();
        let c = DMatrix::from_fn(n, d, |r, k| m[(r, k)] - mean[k]);
        c.transpose() * &c / n as f64
    }

    #[test]
    fn gcn_examples() {
        let x = Tensor::new([2, 1, 1, 4], vec![3.0, 3.0, 3.0, 3.0, 0.0, 2.0, 2.0, 0.0]).unwrap();
        let y = gcn(&x);
        assert_eq!(&y.data()[..4], &[0.0; 4]);
        assert_eq!(&y.data()[4..], &[-1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn zca_of_white_data_is_near_identity() {
        // sampling noise of the covariance shrinks like sqrt(D / N)
        let d = 8;
        let n = 400 * d;
        let mut x = Tensor::zeros([n, d]);
        x.gaussian_fill(0.0, 1.0, &mut Rng::new(11)).unwrap();
        let z = zca_fit(&x, 1e-6).unwrap();
        let w = DMatrix::from_row_slice(d, d, z.whitening.data());
        let dev = (&w - DMatrix::<f64>::identity(d, d)).norm() / (d as f64).sqrt();
        assert!(dev < 0.05, "{dev}");
        assert_eq!(w, w.transpose());
    }

    #[test]
    fn whitened_fitting_set_is_decorrelated() {
        let d = 6;
        let n = 10 * d;
        let mut rng = Rng::new(5);
        // well conditioned, so no direction has variance comparable to eps
        let mix =
            DMatrix::<f64>::identity(d, d) + DMatrix::from_fn(d, d, |_, _| 0.2 * rng.normal());
        let mut raw = Tensor::zeros([n, d]);
        raw.gaussian_fill(0.0, 3.0, &mut rng).unwrap();
        let mixed = DMatrix::from_row_slice(n, d, raw.data()) * &mix;
        let x = Tensor::new([n, d], mixed.transpose().as_slice().to_vec()).unwrap();
        let z = zca_fit(&x, ZCA_EPS).unwrap();
        let c = covariance(&zca_apply(&z, &x).unwrap());
        for r in 0..d {
            for k in 0..d {
                if r != k {
                    assert!(c[(r, k)].abs() <= 0.05, "{}", c[(r, k)]);
                }
            }
        }
    }

    #[test]
    fn huge_eps_only_shrinks() {
        let mut x = Tensor::zeros([50, 4]);
        x.gaussian_fill(0.0, 1.0, &mut Rng::new(2)).unwrap();
        let eps = 1e12;
        let z = zca_fit(&x, eps).unwrap();
        let w = DMatrix::from_row_slice(4, 4, z.whitening.data()) * eps.sqrt();
        assert!((w - DMatrix::<f64>::identity(4, 4)).amax() < 1e-9);
        assert!(zca_fit(&x, 0.0).is_err());
    }

    #[test]
    fn standardize_gives_unit_channels() {
        let mut x = Tensor::zeros([5, 3, 4, 4]);
        x.gaussian_fill(2.0, 3.0, &mut Rng::new(1)).unwrap();
        let s = channel_stats(&x).unwrap();
        let y = standardize(&x, &s).unwrap();
        let t = channel_stats(&y).unwrap();
        for c in 0..3 {
            assert!(t.mean[c].abs() < 1e-12);
            assert!((t.std[c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn preprocessing_names() {
        for s in ["gcn-zca", "standardize", "none"] {
            assert_eq!(s.parse::<Preprocessing>().unwrap().to_string(), s);
        }
        assert!("zca".parse::<Preprocessing>().is_err());
    }
}
