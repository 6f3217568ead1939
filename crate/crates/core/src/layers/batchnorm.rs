use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization over `[N, C]` or `[N, C, H, W]` inputs.
///
/// Running statistics follow `running = momentum * running + (1 - momentum) * batch`, using the
/// unbiased batch variance.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub gamma: Param,
    pub shift: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub training: bool,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::invalid(format!(
            "batch norm expects [N,C] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            channels,
            gamma: Param::new(Tensor::full([channels], 1.0)),
            shift: Param::new(Tensor::zeros([channels])),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            training: true,
            cache: None,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::invalid("batch norm epsilon must be positive"));
        }
        self.eps = eps;
        Ok(self)
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, inner) = layout(x.shape())?;
        if c != self.channels {
            return Err(Error::invalid(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        Ok((n, c, inner))
    }

    /// Per-channel batch mean and population variance.
    pub fn batch_statistics(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, c, inner) = layout(x.shape())?;
        let m = (n * inner) as f64;
        let d = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += d[(b * c + ch) * inner..(b * c + ch + 1) * inner]
                    .iter()
                    .sum::<f64>();
            }
            let mu = s / m;
            let mut q = 0.0;
            for b in 0..n {
                for v in &d[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                    q += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = q / m;
        }
        Ok((mean, var))
    }

    fn normalize(&self, x: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
        let (n, c, inner) = layout(x.shape()).unwrap();
        let mut xhat = Tensor::zeros(x.shape().to_vec());
        let mut out = Tensor::zeros(x.shape().to_vec());
        let (g, s) = (self.gamma.value.data(), self.shift.value.data());
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                for i in r {
                    let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = h;
                    out.data_mut()[i] = g[ch] * h + s[ch];
                }
            }
        }
        (xhat, out)
    }

    fn statistics(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>, bool)> {
        let (n, _, _) = self.check(x)?;
        if !self.training {
            let inv = self
                .running_var
                .data()
                .iter()
                .map(|v| 1.0 / (v + self.eps).sqrt())
                .collect();
            return Ok((self.running_mean.data().to_vec(), inv, false));
        }
        if n < 2 {
            return Err(Error::invalid(
                "batch norm in training mode needs a batch of at least 2",
            ));
        }
        let (mean, var) = Self::batch_statistics(x)?;
        let inv = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        Ok((mean, inv, true))
    }

    fn update_running(&mut self, x: &Tensor) -> Result<()> {
        let (n, _, inner) = layout(x.shape())?;
        let (mean, var) = Self::batch_statistics(x)?;
        let m = (n * inner) as f64;
        let unbias = m / (m - 1.0);
        let mo = self.momentum;
        for ch in 0..self.channels {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = mo * *rm + (1.0 - mo) * mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = mo * *rv + (1.0 - mo) * var[ch] * unbias;
        }
        Ok(())
    }

    /// Forward pass without caching or running-statistic updates.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (mean, inv, _) = self.statistics(x)?;
        Ok(self.normalize(x, &mean, &inv).1)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (mean, inv, batch_stats) = self.statistics(x)?;
        let (xhat, out) = self.normalize(x, &mean, &inv);
        if batch_stats {
            self.update_running(x)?;
        }
        self.cache = Some(Cache {
            xhat,
            inv_std: inv,
            batch_stats,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("batch norm backward called before forward".into()))?;
        cache.xhat.check_same_shape(grad_out)?;
        let (n, c, inner) = layout(grad_out.shape())?;
        let m = (n * inner) as f64;
        let (g, xh) = (grad_out.data(), cache.xhat.data());
        let gamma = self.gamma.value.data().to_vec();
        let mut grad_in = Tensor::zeros(grad_out.shape().to_vec());
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for b in 0..n {
                for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                    sum_g += g[i];
                    sum_gx += g[i] * xh[i];
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_gx;
            self.shift.grad.data_mut()[ch] += sum_g;
            let k = gamma[ch] * cache.inv_std[ch];
            let gi = grad_in.data_mut();
            for b in 0..n {
                for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                    gi[i] = if cache.batch_stats {
                        k * (g[i] - sum_g / m - xh[i] * sum_gx / m)
                    } else {
                        k * g[i]
                    };
                }
            }
        }
        Ok(grad_in)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        vec![("gamma", &self.gamma), ("shift", &self.shift)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("gamma", &mut self.gamma), ("shift", &mut self.shift)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::moments;

    fn channel_values(t: &Tensor, ch: usize) -> Vec<f64> {
        let (n, c, inner) = layout(t.shape()).unwrap();
        (0..n)
            .flat_map(|b| t.data()[(b * c + ch) * inner..(b * c + ch + 1) * inner].to_vec())
            .collect()
    }

    #[test]
    fn normalizes_each_channel() {
        let mut rng = Rng::new(5);
        let mut x = Tensor::zeros([8, 4, 5, 5]);
        x.gaussian_fill(3.0, 2.0, &mut rng).unwrap();
        let mut bn = BatchNormLayer::new(4).with_eps(1e-12).unwrap();
        let y = bn.forward(&x).unwrap();
        for ch in 0..4 {
            let (m, v) = moments(&channel_values(&y, ch)).unwrap();
            assert!(m.abs() < 1e-10, "mean {m}");
            assert!((v - 1.0).abs() < 1e-8, "var {v}");
        }
    }

    #[test]
    fn default_eps_shrinks_variance_slightly() {
        let mut rng = Rng::new(6);
        let mut x = Tensor::zeros([8, 2, 3, 3]);
        x.gaussian_fill(0.0, 1.0, &mut rng).unwrap();
        let bn = BatchNormLayer::new(2);
        let (_, var) = BatchNormLayer::batch_statistics(&x).unwrap();
        let y = bn.apply(&x).unwrap();
        let (_, v) = moments(&channel_values(&y, 0)).unwrap();
        assert!((v - var[0] / (var[0] + BN_EPS)).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_rejected_in_training() {
        let mut bn = BatchNormLayer::new(3);
        assert!(bn.forward(&Tensor::zeros([1, 3, 2, 2])).is_err());
        bn.training = false;
        assert!(bn.forward(&Tensor::zeros([1, 3, 2, 2])).is_ok());
    }

    #[test]
    fn running_statistics_update() {
        let x = Tensor::new([2, 1], vec![1.0, 3.0]).unwrap();
        let mut bn = BatchNormLayer::new(1);
        bn.forward(&x).unwrap();
        // batch mean 2, unbiased variance 2
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn inference_uses_running_statistics() {
        let mut bn = BatchNormLayer::new(1);
        bn.training = false;
        bn.running_mean = Tensor::new([1], vec![1.0]).unwrap();
        bn.running_var = Tensor::new([1], vec![4.0 - BN_EPS]).unwrap();
        let y = bn.apply(&Tensor::new([1, 1], vec![5.0]).unwrap()).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let mut x = Tensor::zeros([3, 2, 2, 2]);
        x.gaussian_fill(0.0, 1.0, &mut rng).unwrap();
        let mut w = Tensor::zeros([3, 2, 2, 2]);
        w.gaussian_fill(0.0, 1.0, &mut rng).unwrap();
        let mut bn = BatchNormLayer::new(2);
        bn.gamma.value = Tensor::new([2], vec![1.5, -0.7]).unwrap();
        bn.shift.value = Tensor::new([2], vec![0.3, 0.1]).unwrap();
        let loss = |bn: &BatchNormLayer, x: &Tensor| -> f64 {
            bn.apply(x)
                .unwrap()
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        bn.forward(&x).unwrap();
        let gi = bn.backward(&w).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h);
            assert!(
                (num - gi.data()[i]).abs() < 1e-6,
                "{i}: {num} vs {}",
                gi.data()[i]
            );
        }
        for ch in 0..2 {
            let mut p = bn.clone();
            p.gamma.value.data_mut()[ch] += h;
            let mut q = bn.clone();
            q.gamma.value.data_mut()[ch] -= h;
            let num = (loss(&p, &x) - loss(&q, &x)) / (2.0 * h);
            assert!((num - bn.gamma.grad.data()[ch]).abs() < 1e-6);
        }
    }
}
