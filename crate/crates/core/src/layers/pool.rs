use std::fmt;

use crate::error::{Error, Result};
use crate::layers::conv::conv_output_size;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Averages over the window positions that fall inside the input.
    Average,
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Max => "max",
            PoolKind::Average => "avg",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PoolLayer {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    input_shape: Option<Vec<usize>>,
    /// Max pooling: flat input index selected for every output element.
    argmax: Vec<usize>,
}

impl PoolLayer {
    pub fn new(kind: PoolKind, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("pool kernel and stride must be positive"));
        }
        if pad >= kernel {
            return Err(Error::invalid(
                "pool padding must be smaller than the kernel",
            ));
        }
        Ok(PoolLayer {
            kind,
            kernel,
            stride,
            pad,
            input_shape: None,
            argmax: Vec::new(),
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let &[n, c, h, w] = input else {
            return Err(Error::invalid(format!(
                "pooling expects NCHW, got {input:?}"
            )));
        };
        Ok(vec![
            n,
            c,
            conv_output_size(h, self.kernel, self.stride, self.pad)?,
            conv_output_size(w, self.kernel, self.stride, self.pad)?,
        ])
    }

    fn window(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.kernel as isize) as usize).min(len);
        (lo, hi)
    }

    fn run(&self, x: &Tensor, record: bool) -> Result<(Tensor, Vec<usize>)> {
        let (n, c, h, w) = x.nchw()?;
        let shape = self.output_shape(x.shape())?;
        let (oh, ow) = (shape[2], shape[3]);
        let mut out = Tensor::zeros(shape);
        let mut arg = if record && self.kind == PoolKind::Max {
            vec![0; out.len()]
        } else {
            Vec::new()
        };
        let d = x.data();
        let mut o = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let (y0, y1) = self.window(oy, h);
                for ox in 0..ow {
                    let (x0, x1) = self.window(ox, w);
                    let value = match self.kind {
                        PoolKind::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = base + y0 * w + x0;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    let v = d[base + iy * w + ix];
                                    if v > best {
                                        best = v;
                                        at = base + iy * w + ix;
                                    }
                                }
                            }
                            if !arg.is_empty() {
                                arg[o] = at;
                            }
                            best
                        }
                        PoolKind::Average => {
                            let mut s = 0.0;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    s += d[base + iy * w + ix];
                                }
                            }
                            s / ((y1 - y0) * (x1 - x0)) as f64
                        }
                    };
                    out.data_mut()[o] = value;
                    o += 1;
                }
            }
        }
        Ok((out, arg))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, arg) = self.run(x, true)?;
        self.argmax = arg;
        self.input_shape = Some(x.shape().to_vec());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self
            .input_shape
            .clone()
            .ok_or_else(|| Error::State("pool backward called before forward".into()))?;
        let expected = self.output_shape(&shape)?;
        if grad_out.shape() != expected.as_slice() {
            return Err(Error::invalid("pool gradient shape mismatch"));
        }
        let mut gin = Tensor::zeros(shape.clone());
        let g = grad_out.data();
        match self.kind {
            PoolKind::Max => {
                let gi = gin.data_mut();
                for (o, &at) in self.argmax.iter().enumerate() {
                    gi[at] += g[o];
                }
            }
            PoolKind::Average => {
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (oh, ow) = (expected[2], expected[3]);
                let gi = gin.data_mut();
                let mut o = 0;
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        let (y0, y1) = self.window(oy, h);
                        for ox in 0..ow {
                            let (x0, x1) = self.window(ox, w);
                            let share = g[o] / ((y1 - y0) * (x1 - x0)) as f64;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    gi[base + iy * w + ix] += share;
                                }
                            }
                            o += 1;
                        }
                    }
                }
            }
        }
        Ok(gin)
    }

    pub fn clear_cache(&mut self) {
        self.input_shape = None;
        self.argmax = Vec::new();
    }
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.nchw()?;
        let hw = h * w;
        let data = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Tensor::new([n, c], data)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.apply(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self
            .input_shape
            .clone()
            .ok_or_else(|| Error::State("global pool backward called before forward".into()))?;
        let hw = shape[2] * shape[3];
        if grad_out.shape() != [shape[0], shape[1]] {
            return Err(Error::invalid("global pool gradient shape mismatch"));
        }
        let mut data = Vec::with_capacity(grad_out.len() * hw);
        for g in grad_out.data() {
            data.extend(std::iter::repeat_n(g / hw as f64, hw));
        }
        Tensor::new(shape, data)
    }

    pub fn clear_cache(&mut self) {
        self.input_shape = None;
    }
}
