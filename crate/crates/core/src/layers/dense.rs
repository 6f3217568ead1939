use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::gemm::{gemm, transpose};
use crate::tensor::Tensor;

/// Fully connected layer; inputs `[N, ...]` are flattened to `[N, in_features]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// `[out_features, in_features]`
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
    cache: Option<Tensor>,
}

impl DenseLayer {
    pub fn new(in_features: usize, out_features: usize) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::invalid("dense layer sizes must be positive"));
        }
        Ok(DenseLayer {
            weight: Param::new(Tensor::zeros([out_features, in_features])),
            bias: Param::new(Tensor::zeros([out_features])),
            in_features,
            out_features,
            cache: None,
        })
    }

    fn rows(&self, x: &Tensor) -> Result<usize> {
        if x.rank() < 2 {
            return Err(Error::invalid("dense layer input needs a batch axis"));
        }
        let n = x.dim(0);
        let feat = x.len() / n.max(1);
        if feat != self.in_features {
            return Err(Error::invalid(format!(
                "dense layer expects {} features, got {feat}",
                self.in_features
            )));
        }
        Ok(n)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.rows(x)?;
        let mut wt = vec![0.0; self.in_features * self.out_features];
        transpose(
            self.out_features,
            self.in_features,
            self.weight.value.data(),
            &mut wt,
        );
        let mut out = vec![0.0; n * self.out_features];
        gemm(
            n,
            self.out_features,
            self.in_features,
            x.data(),
            &wt,
            &mut out,
            false,
        );
        for row in out.chunks_mut(self.out_features) {
            for (v, b) in row.iter_mut().zip(self.bias.value.data()) {
                *v += b;
            }
        }
        Tensor::new([n, self.out_features], out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.apply(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("dense backward called before forward".into()))?;
        let n = x.dim(0);
        if grad_out.shape() != [n, self.out_features] {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match [{n}, {}]",
                grad_out.shape(),
                self.out_features
            )));
        }
        let mut gt = vec![0.0; n * self.out_features];
        transpose(n, self.out_features, grad_out.data(), &mut gt);
        gemm(
            self.out_features,
            self.in_features,
            n,
            &gt,
            x.data(),
            self.weight.grad.data_mut(),
            true,
        );
        for row in grad_out.data().chunks(self.out_features) {
            for (acc, g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *acc += g;
            }
        }
        let mut gin = vec![0.0; n * self.in_features];
        gemm(
            n,
            self.in_features,
            self.out_features,
            grad_out.data(),
            self.weight.value.data(),
            &mut gin,
            false,
        );
        Tensor::new(x.shape().to_vec(), gin)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map_and_gradients() {
        let mut d = DenseLayer::new(2, 2).unwrap();
        d.weight.value = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        d.bias.value = Tensor::new([2], vec![0.5, -0.5]).unwrap();
        let x = Tensor::new([1, 2, 1, 1], vec![1.0, -1.0]).unwrap();
        let y = d.forward(&x).unwrap();
        assert_eq!(y.data(), &[-0.5, -1.5]);
        let gi = d
            .backward(&Tensor::new([1, 2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(gi.shape(), x.shape());
        assert_eq!(gi.data(), &[7.0, 10.0]);
        assert_eq!(d.weight.grad.data(), &[1.0, -1.0, 2.0, -2.0]);
        assert_eq!(d.bias.grad.data(), &[1.0, 2.0]);
    }

    #[test]
    fn feature_mismatch() {
        let d = DenseLayer::new(3, 2).unwrap();
        assert!(d.apply(&Tensor::zeros([2, 4])).is_err());
    }
}
