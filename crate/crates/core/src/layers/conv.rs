use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::gemm::{gemm, gemm_ex};
use crate::tensor::Tensor;

/// 2-D cross-correlation with square kernels, lowered to im2col + GEMM per sample.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// `[c_out, c_in, k, k]`
    pub weight: Param,
    pub bias: Option<Param>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    if input + 2 * pad < kernel {
        return Err(Error::invalid(format!(
            "kernel {kernel} larger than padded input {}",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

impl ConvLayer {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || kernel == 0 || stride == 0 {
            return Err(Error::invalid("convolution sizes must be positive"));
        }
        Ok(ConvLayer {
            weight: Param::new(Tensor::zeros([c_out, c_in, kernel, kernel])),
            bias: bias.then(|| Param::new(Tensor::zeros([c_out]))),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            cache: None,
        })
    }

    fn geometry(&self, x: &Tensor) -> Result<(usize, Geometry)> {
        let (n, c, h, w) = x.nchw()?;
        if c != self.c_in {
            return Err(Error::invalid(format!(
                "convolution expects {} input channels, got {c}",
                self.c_in
            )));
        }
        let oh = conv_output_size(h, self.kernel, self.stride, self.pad)?;
        let ow = conv_output_size(w, self.kernel, self.stride, self.pad)?;
        Ok((
            n,
            Geometry {
                c,
                h,
                w,
                k: self.kernel,
                stride: self.stride,
                pad: self.pad,
                oh,
                ow,
            },
        ))
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let &[n, c, h, w] = input else {
            return Err(Error::invalid(format!("expected NCHW, got {input:?}")));
        };
        if c != self.c_in {
            return Err(Error::invalid(format!(
                "expected {} channels, got {c}",
                self.c_in
            )));
        }
        Ok(vec![
            n,
            self.c_out,
            conv_output_size(h, self.kernel, self.stride, self.pad)?,
            conv_output_size(w, self.kernel, self.stride, self.pad)?,
        ])
    }

    /// Forward pass without caching.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, g) = self.geometry(x)?;
        let p = g.oh * g.ow;
        let ckk = g.c * g.k * g.k;
        let in_len = g.c * g.h * g.w;
        let mut out = Tensor::zeros([n, self.c_out, g.oh, g.ow]);
        let w = self.weight.value.data();
        let bias = self.bias.as_ref().map(|b| b.value.data());
        out.data_mut()
            .par_chunks_mut(self.c_out * p)
            .zip(x.data().par_chunks(in_len))
            .for_each_init(
                || vec![0.0; ckk * p],
                |cols, (dst, src)| {
                    im2col(src, &g, cols);
                    gemm(self.c_out, p, ckk, w, cols, dst, false);
                    if let Some(b) = bias {
                        for (co, row) in dst.chunks_mut(p).enumerate() {
                            for v in row {
                                *v += b[co];
                            }
                        }
                    }
                },
            );
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.apply(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    /// Returns the input gradient; weight and bias gradients are added into their `grad` buffers.
    ///
    /// Per-sample weight gradients are reduced in sample order, so the result does not depend on
    /// the number of worker threads.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("convolution backward called before forward".into()))?;
        let (n, g) = self.geometry(x)?;
        let expected = [n, self.c_out, g.oh, g.ow];
        if grad_out.shape() != expected {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match output {expected:?}",
                grad_out.shape()
            )));
        }
        let p = g.oh * g.ow;
        let ckk = g.c * g.k * g.k;
        let in_len = g.c * g.h * g.w;
        let w = self.weight.value.data();

        let mut grad_in = Tensor::zeros(x.shape().to_vec());
        let partials: Vec<Vec<f64>> = grad_in
            .data_mut()
            .par_chunks_mut(in_len)
            .zip(x.data().par_chunks(in_len))
            .zip(grad_out.data().par_chunks(self.c_out * p))
            .map_init(
                || vec![0.0; ckk * p],
                |cols, ((gin, src), gout)| {
                    im2col(src, &g, cols);
                    let mut gw = vec![0.0; self.c_out * ckk];
                    gemm_ex(false, true, self.c_out, ckk, p, gout, cols, &mut gw, false);
                    gemm_ex(true, false, ckk, p, self.c_out, w, gout, cols, false);
                    col2im(cols, &g, gin);
                    gw
                },
            )
            .collect();

        let gw_acc = self.weight.grad.data_mut();
        for part in &partials {
            for (acc, v) in gw_acc.iter_mut().zip(part) {
                *acc += v;
            }
        }
        if let Some(b) = &mut self.bias {
            let gb = b.grad.data_mut();
            for sample in grad_out.data().chunks(self.c_out * p) {
                for (co, row) in sample.chunks(p).enumerate() {
                    gb[co] += row.iter().sum::<f64>();
                }
            }
        }
        Ok(grad_in)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        let mut v = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias", b));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        let mut v = vec![("weight", &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias", b));
        }
        v
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + kj - pad` lies inside the image.
fn valid_columns(g: &Geometry, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj {
        (g.pad - kj).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if g.w + g.pad > kj {
        ((g.w - 1 + g.pad - kj) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// `cols[(c*k + ki)*k + kj][oy*ow + ox] = x[c][oy*s - pad + ki][ox*s - pad + kj]` (zero outside).
pub(crate) fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let (lo, hi) = valid_columns(g, kj);
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let iy = oy * g.stride + ki;
                    if iy < g.pad || iy - g.pad >= g.h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy - g.pad) * g.w..(c * g.h + iy - g.pad + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if lo < hi {
                        let first = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, s) in dst[lo..hi]
                                .iter_mut()
                                .zip(src[first..].iter().step_by(g.stride))
                            {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image (overwrites `x`).
pub(crate) fn col2im(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    x.fill(0.0);
    let p = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let (lo, hi) = valid_columns(g, kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = oy * g.stride + ki;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let base = (c * g.h + iy - g.pad) * g.w;
                    let src = &cols[row + oy * g.ow + lo..row + oy * g.ow + hi];
                    let first = base + lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, s) in x[first..first + hi - lo].iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for (d, s) in x[first..].iter_mut().step_by(g.stride).zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn im2col_reference(x: &[f64], g: &Geometry) -> Vec<f64> {
        let p = g.oh * g.ow;
        let mut cols = vec![0.0; g.c * g.k * g.k * p];
        for c in 0..g.c {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                cols[((c * g.k + ki) * g.k + kj) * p + oy * g.ow + ox] =
                                    x[(c * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn im2col_matches_reference_and_col2im_is_adjoint() {
        let mut rng = Rng::new(8);
        for &(h, w, k, stride, pad) in &[
            (5, 7, 3, 1, 1),
            (6, 6, 3, 2, 1),
            (4, 5, 1, 2, 0),
            (3, 3, 3, 1, 2),
            (7, 4, 2, 3, 1),
        ] {
            let oh = conv_output_size(h, k, stride, pad).unwrap();
            let ow = conv_output_size(w, k, stride, pad).unwrap();
            let g = Geometry {
                c: 2,
                h,
                w,
                k,
                stride,
                pad,
                oh,
                ow,
            };
            let x: Vec<f64> = (0..2 * h * w).map(|_| rng.normal()).collect();
            let mut cols = vec![f64::NAN; 2 * k * k * oh * ow];
            im2col(&x, &g, &mut cols);
            assert_eq!(cols, im2col_reference(&x, &g));
            let y: Vec<f64> = (0..cols.len()).map(|_| rng.normal()).collect();
            let mut back = vec![f64::NAN; x.len()];
            col2im(&y, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()),
                "{lhs} vs {rhs}"
            );
        }
    }

    /// Six-loop direct convolution, summing over (c, ki, kj) in ascending order.
    fn direct(x: &Tensor, layer: &ConvLayer) -> Tensor {
        let (n, c, h, w) = x.nchw().unwrap();
        let (k, s, pad) = (layer.kernel, layer.stride, layer.pad);
        let oh = (h + 2 * pad - k) / s + 1;
        let ow = (w + 2 * pad - k) / s + 1;
        let wt = layer.weight.value.data();
        let mut out = vec![0.0; n * layer.c_out * oh * ow];
        for b in 0..n {
            for co in 0..layer.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - pad as isize;
                                    let ix = (ox * s + kj) as isize - pad as isize;
                                    let v =
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize
                                        {
                                            0.0
                                        } else {
                                            x.data()
                                                [((b * c + ci) * h + iy as usize) * w + ix as usize]
                                        };
                                    acc += wt[((co * c + ci) * k + ki) * k + kj] * v;
                                }
                            }
                        }
                        if let Some(bias) = &layer.bias {
                            acc += bias.value.data()[co];
                        }
                        out[((b * layer.c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new([n, layer.c_out, oh, ow], out).unwrap()
    }

    fn random_layer(
        c_in: usize,
        c_out: usize,
        k: usize,
        s: usize,
        p: usize,
        rng: &mut Rng,
    ) -> ConvLayer {
        let mut l = ConvLayer::new(c_in, c_out, k, s, p, true).unwrap();
        l.weight.value.gaussian_fill(0.0, 1.0, rng).unwrap();
        l.bias
            .as_mut()
            .unwrap()
            .value
            .gaussian_fill(0.0, 1.0, rng)
            .unwrap();
        l
    }

    #[test]
    fn ones_kernel_sums_window() {
        let mut l = ConvLayer::new(1, 1, 3, 1, 0, false).unwrap();
        l.weight.value.fill(1.0);
        let out = l.apply(&Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn center_tap_is_identity() {
        let mut l = ConvLayer::new(1, 1, 3, 1, 1, false).unwrap();
        l.weight.value.data_mut()[4] = 1.0;
        let mut rng = Rng::new(2);
        let mut x = Tensor::zeros([2, 1, 5, 4]);
        x.gaussian_fill(0.0, 1.0, &mut rng).unwrap();
        assert_eq!(l.apply(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut l = ConvLayer::new(2, 3, 3, 2, 1, true).unwrap();
        l.bias.as_mut().unwrap().value = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = l.apply(&Tensor::full([1, 2, 6, 6], 7.0)).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, [0.5, -1.0, 2.0][i / 9]);
        }
    }

    #[test]
    fn matches_direct_oracle() {
        let mut rng = Rng::new(9);
        for &(c_in, c_out, k, s, p, h, w) in &[
            (3, 4, 3, 1, 1, 7, 6),
            (2, 5, 1, 2, 0, 8, 8),
            (4, 2, 5, 2, 2, 9, 7),
            (1, 1, 3, 3, 0, 9, 9),
        ] {
            let l = random_layer(c_in, c_out, k, s, p, &mut rng);
            let mut x = Tensor::zeros([2, c_in, h, w]);
            x.gaussian_fill(0.0, 1.0, &mut rng).unwrap();
            let fast = l.apply(&x).unwrap();
            let slow = direct(&x, &l);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = Rng::new(4);
        let mut l = random_layer(2, 3, 3, 1, 1, &mut rng);
        let x = Tensor::full([2, 2, 4, 4], 1.5);
        let out = l.forward(&x).unwrap();
        let gi = l.backward(&Tensor::zeros(out.shape().to_vec())).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(l.weight.grad.data().iter().all(|&v| v == 0.0));
        assert!(l
            .bias
            .as_ref()
            .unwrap()
            .grad
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_is_outer_product() {
        // 1x1 spatial, 1x1 kernel: y = W x, so dW = g x^T and dx = W^T g.
        let mut l = ConvLayer::new(2, 3, 1, 1, 0, false).unwrap();
        l.weight.value = Tensor::new([3, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = Tensor::new([1, 2, 1, 1], vec![0.5, -1.0]).unwrap();
        l.forward(&x).unwrap();
        let g = Tensor::new([1, 3, 1, 1], vec![1.0, 0.0, 2.0]).unwrap();
        let gi = l.backward(&g).unwrap();
        assert_eq!(l.weight.grad.data(), &[0.5, -1.0, 0.0, 0.0, 1.0, -2.0]);
        assert_eq!(gi.data(), &[1.0 + 10.0, 2.0 + 12.0]);
    }

    #[test]
    fn backward_requires_forward() {
        let mut l = ConvLayer::new(1, 1, 1, 1, 0, false).unwrap();
        assert!(matches!(
            l.backward(&Tensor::zeros([1, 1, 1, 1])),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn channel_mismatch() {
        let l = ConvLayer::new(3, 1, 3, 1, 1, false).unwrap();
        assert!(l.apply(&Tensor::zeros([1, 2, 4, 4])).is_err());
    }

    #[test]
    fn thread_count_does_not_change_gradients() {
        let mut rng = Rng::new(21);
        let mut a = random_layer(3, 4, 3, 1, 1, &mut rng);
        let mut b = a.clone();
        let mut x = Tensor::zeros([6, 3, 5, 5]);
        x.gaussian_fill(0.0, 1.0, &mut rng).unwrap();
        let mut g = Tensor::zeros([6, 4, 5, 5]);
        g.gaussian_fill(0.0, 1.0, &mut rng).unwrap();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let ga = one.install(|| {
            a.forward(&x).unwrap();
            a.backward(&g).unwrap()
        });
        let gb = four.install(|| {
            b.forward(&x).unwrap();
            b.backward(&g).unwrap()
        });
        assert_eq!(ga, gb);
        assert_eq!(a.weight.grad, b.weight.grad);
    }
}
