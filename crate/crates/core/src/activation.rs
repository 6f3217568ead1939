//! The MPELU activation family.
//!
//! MPELU is the identity for positive inputs and `alpha_c * (exp(beta_c * y) - 1)` otherwise,
//! where `c` is the channel of the element (or `0` when parameters are shared across channels).
//! Both `alpha` and `beta` are learned. Fixing them recovers the classic rectified and
//! exponential units:
//!
//! | setting                      | behaves as            |
//! |------------------------------|-----------------------|
//! | `alpha = 0`                  | ReLU (exactly)        |
//! | `alpha = 1, beta = 1`        | ELU with `alpha = 1`  |
//! | `beta` small, `alpha*beta=a` | PReLU with slope `a`  |
//!
//! The backward pass follows the closed forms used in the layer: with
//! `top = f(y) + alpha` for non-positive `y`,
//! `df/dalpha = exp(beta*y) - 1`, `df/dbeta = y * top` and `df/dy = beta * top`.
//! `top` is built from the cached forward output, so the exponential is evaluated once in
//! the forward pass for the input and `beta` gradients.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::Tensor;

/// Lower bound enforced on every MPELU `beta` after an optimizer step.
pub const BETA_FLOOR: f64 = 1e-6;

/// Learning-rate multiplier recommended for `alpha`/`beta`.
pub const DEFAULT_PARAM_LR_MULT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    ReLU,
    /// Leaky ReLU with a fixed negative slope.
    LReLU {
        slope: f64,
    },
    /// PReLU; `init` is the initial learnable slope.
    PReLU {
        init: f64,
    },
    /// ELU with a fixed saturation value.
    ELU {
        alpha: f64,
    },
    /// MPELU with initial `alpha` and `beta`.
    MPELU {
        alpha: f64,
        beta: f64,
    },
}

impl ActivationKind {
    pub const fn mpelu(alpha: f64, beta: f64) -> Self {
        ActivationKind::MPELU { alpha, beta }
    }

    /// Number of learnable vectors of length `M` (0, 1 or 2).
    pub fn learnable_vectors(&self) -> usize {
        match self {
            ActivationKind::PReLU { .. } => 1,
            ActivationKind::MPELU { .. } => 2,
            _ => 0,
        }
    }

    /// The `(alpha, beta)` pair of the first-order expansion at zero used by the
    /// Taylor initialization: the negative branch is treated as a line of slope `alpha*beta`.
    pub fn taylor_coefficients(&self) -> (f64, f64) {
        match *self {
            ActivationKind::ReLU => (0.0, 1.0),
            ActivationKind::LReLU { slope } => (slope, 1.0),
            ActivationKind::PReLU { init } => (init, 1.0),
            ActivationKind::ELU { alpha } => (alpha, 1.0),
            ActivationKind::MPELU { alpha, beta } => (alpha, beta),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::ReLU => "relu",
            ActivationKind::LReLU { .. } => "lrelu",
            ActivationKind::PReLU { .. } => "prelu",
            ActivationKind::ELU { .. } => "elu",
            ActivationKind::MPELU { .. } => "mpelu",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ActivationKind::ReLU => write!(f, "relu"),
            ActivationKind::LReLU { slope } => write!(f, "lrelu={slope}"),
            ActivationKind::PReLU { init } => write!(f, "prelu={init}"),
            ActivationKind::ELU { alpha } => write!(f, "elu={alpha}"),
            ActivationKind::MPELU { alpha, beta } => write!(f, "mpelu={alpha},{beta}"),
        }
    }
}

/// Parses `relu`, `lrelu[=slope]`, `prelu[=init]`, `elu[=alpha]`, `mpelu[=alpha,beta]`.
impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = match s.split_once('=') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let nums = |a: Option<&str>| -> Result<Vec<f64>> {
            a.map(|a| {
                a.split(',')
                    .map(|x| {
                        x.trim().parse::<f64>().map_err(|_| {
                            Error::invalid(format!("bad number `{x}` in activation `{s}`"))
                        })
                    })
                    .collect()
            })
            .unwrap_or_else(|| Ok(Vec::new()))
        };
        let v = nums(args)?;
        let one = |default: f64| -> Result<f64> {
            match v.as_slice() {
                [] => Ok(default),
                [x] => Ok(*x),
                _ => Err(Error::invalid(format!("activation `{s}` takes one value"))),
            }
        };
        let kind = match name.to_ascii_lowercase().as_str() {
            "relu" if v.is_empty() => ActivationKind::ReLU,
            "lrelu" => ActivationKind::LReLU { slope: one(0.25)? },
            "prelu" => ActivationKind::PReLU { init: one(0.25)? },
            "elu" => ActivationKind::ELU { alpha: one(1.0)? },
            "mpelu" => match v.as_slice() {
                [] => ActivationKind::mpelu(1.0, 1.0),
                [a, b] => ActivationKind::mpelu(*a, *b),
                _ => return Err(Error::invalid(format!("`{s}`: mpelu takes alpha,beta"))),
            },
            _ => return Err(Error::invalid(format!("unknown activation `{s}`"))),
        };
        if let ActivationKind::MPELU { alpha, beta } = kind {
            if alpha < 0.0 || beta <= 0.0 {
                return Err(Error::invalid(format!(
                    "`{s}`: need alpha >= 0 and beta > 0"
                )));
            }
        }
        Ok(kind)
    }
}

/// How many `alpha`/`beta` pairs a layer owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// One pair for the whole layer.
    ChannelShared,
    /// One pair per feature map.
    ChannelWise,
}

impl ParamMode {
    pub fn count(&self, channels: usize) -> usize {
        match self {
            ParamMode::ChannelShared => 1,
            ParamMode::ChannelWise => channels,
        }
    }
}

/// Per-element channel index for a tensor of shape `[N, C, ...]`.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(format!(
            "activation input needs at least [N, C], got {shape:?}"
        )));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

fn check_params(shape: &[usize], alpha: &[f64], beta: &[f64]) -> Result<(usize, usize, usize)> {
    let (n, c, inner) = channel_layout(shape)?;
    if alpha.len() != beta.len() || (alpha.len() != 1 && alpha.len() != c) {
        return Err(Error::invalid(format!(
            "parameter vectors of length {}/{} do not fit {c} channels",
            alpha.len(),
            beta.len()
        )));
    }
    if let Some(b) = beta.iter().find(|b| !(**b > 0.0)) {
        return Err(Error::invalid(format!(
            "MPELU beta must be positive, got {b}"
        )));
    }
    Ok((n, c, inner))
}

#[inline]
fn mpelu_scalar(y: f64, alpha: f64, beta: f64) -> f64 {
    if y > 0.0 {
        y
    } else {
        alpha * (beta * y).exp_m1()
    }
}

/// MPELU forward over `y: [N, C, ...]` with per-channel (`len == C`) or shared (`len == 1`) parameters.
pub fn mpelu_forward(y: &Tensor, alpha: &[f64], beta: &[f64]) -> Result<Tensor> {
    let (n, c, inner) = check_params(y.shape(), alpha, beta)?;
    let shared = alpha.len() == 1;
    let mut out = Tensor::zeros(y.shape().to_vec());
    let (src, dst) = (y.data(), out.data_mut());
    for s in 0..n {
        for ch in 0..c {
            let p = if shared { 0 } else { ch };
            let (a, b) = (alpha[p], beta[p]);
            let off = (s * c + ch) * inner;
            for i in off..off + inner {
                dst[i] = mpelu_scalar(src[i], a, b);
            }
        }
    }
    Ok(out)
}

/// Gradients of an MPELU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MpeluGrads {
    pub grad_in: Tensor,
    pub d_alpha: Vec<f64>,
    pub d_beta: Vec<f64>,
}

/// MPELU backward given the forward input `y`, its cached output and the upstream gradient.
///
/// Parameter gradients are summed over every position mapped to a parameter, in storage order.
pub fn mpelu_backward(
    y: &Tensor,
    output: &Tensor,
    alpha: &[f64],
    beta: &[f64],
    grad_out: &Tensor,
) -> Result<MpeluGrads> {
    let (n, c, inner) = check_params(y.shape(), alpha, beta)?;
    y.check_same_shape(output)?;
    y.check_same_shape(grad_out)?;
    let shared = alpha.len() == 1;
    let mut grad_in = Tensor::zeros(y.shape().to_vec());
    let mut d_alpha = vec![0.0; alpha.len()];
    let mut d_beta = vec![0.0; beta.len()];
    let (ys, fs, gs) = (y.data(), output.data(), grad_out.data());
    let gi = grad_in.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let p = if shared { 0 } else { ch };
            let (a, b) = (alpha[p], beta[p]);
            let off = (s * c + ch) * inner;
            let (mut da, mut db) = (0.0, 0.0);
            if a == 0.0 {
                for i in off..off + inner {
                    let g = gs[i];
                    if ys[i] > 0.0 {
                        gi[i] = g;
                    } else {
                        gi[i] = 0.0;
                        da += g * (b * ys[i]).exp_m1();
                    }
                }
            } else {
                // the cached output already holds alpha * expm1(beta * y)
                let inv_a = 1.0 / a;
                for i in off..off + inner {
                    let (g, yi) = (gs[i], ys[i]);
                    let neg = yi <= 0.0;
                    let f = if neg { fs[i] } else { 0.0 };
                    let top = f + a;
                    gi[i] = if neg { g * b * top } else { g };
                    da += if neg { g * f * inv_a } else { 0.0 };
                    db += if neg { g * yi * top } else { 0.0 };
                }
            }
            d_alpha[p] += da;
            d_beta[p] += db;
        }
    }
    Ok(MpeluGrads {
        grad_in,
        d_alpha,
        d_beta,
    })
}

/// MPELU evaluated as a composition: PReLU with negative slope `beta`, followed by an ELU with
/// saturation `alpha`. Agrees with [`mpelu_forward`] elementwise.
pub fn decompose_check(x: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let prelu = x.map(|v| if v > 0.0 { v } else { beta * v });
    Ok(prelu.map(|z| if z > 0.0 { z } else { alpha * z.exp_m1() }))
}

/// Forward of any [`ActivationKind`]; `params` holds the learned vectors
/// (`[]`, `[slope]` or `[alpha, beta]`).
pub fn activation_forward(kind: &ActivationKind, y: &Tensor, params: &[&[f64]]) -> Result<Tensor> {
    match *kind {
        ActivationKind::ReLU => Ok(y.map(|v| if v > 0.0 { v } else { 0.0 })),
        ActivationKind::LReLU { slope } => Ok(y.map(|v| if v > 0.0 { v } else { slope * v })),
        ActivationKind::ELU { alpha } => Ok(y.map(|v| mpelu_scalar(v, alpha, 1.0))),
        ActivationKind::PReLU { .. } => {
            let [slope] = params else {
                return Err(Error::invalid("PReLU needs one parameter vector"));
            };
            let (n, c, inner) = channel_layout(y.shape())?;
            let ones = vec![1.0; slope.len()];
            check_params(y.shape(), slope, &ones)?;
            let mut out = y.clone();
            let d = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let a = slope[if slope.len() == 1 { 0 } else { ch }];
                    let off = (s * c + ch) * inner;
                    for v in &mut d[off..off + inner] {
                        if *v <= 0.0 {
                            *v *= a;
                        }
                    }
                }
            }
            Ok(out)
        }
        ActivationKind::MPELU { .. } => {
            let [alpha, beta] = params else {
                return Err(Error::invalid("MPELU needs alpha and beta vectors"));
            };
            mpelu_forward(y, alpha, beta)
        }
    }
}

/// Backward of any [`ActivationKind`]; returns the input gradient and one gradient vector per
/// learned parameter vector.
pub fn activation_backward(
    kind: &ActivationKind,
    y: &Tensor,
    output: &Tensor,
    params: &[&[f64]],
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    y.check_same_shape(grad_out)?;
    match *kind {
        ActivationKind::ReLU => Ok((
            y.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })?,
            vec![],
        )),
        ActivationKind::LReLU { slope } => Ok((
            y.zip_map(grad_out, |v, g| if v > 0.0 { g } else { slope * g })?,
            vec![],
        )),
        ActivationKind::ELU { alpha } => {
            let deriv = y.zip_map(output, |v, f| if v > 0.0 { 1.0 } else { f + alpha })?;
            Ok((deriv.zip_map(grad_out, |d, g| d * g)?, vec![]))
        }
        ActivationKind::PReLU { .. } => {
            let [slope] = params else {
                return Err(Error::invalid("PReLU needs one parameter vector"));
            };
            let (n, c, inner) = channel_layout(y.shape())?;
            let shared = slope.len() == 1;
            let mut grad_in = Tensor::zeros(y.shape().to_vec());
            let mut d_slope = vec![0.0; slope.len()];
            let (ys, gs) = (y.data(), grad_out.data());
            let gi = grad_in.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let p = if shared { 0 } else { ch };
                    let off = (s * c + ch) * inner;
                    let mut acc = 0.0;
                    for i in off..off + inner {
                        if ys[i] > 0.0 {
                            gi[i] = gs[i];
                        } else {
                            gi[i] = slope[p] * gs[i];
                            acc += gs[i] * ys[i];
                        }
                    }
                    d_slope[p] += acc;
                }
            }
            Ok((grad_in, vec![d_slope]))
        }
        ActivationKind::MPELU { .. } => {
            let [alpha, beta] = params else {
                return Err(Error::invalid("MPELU needs alpha and beta vectors"));
            };
            let g = mpelu_backward(y, output, alpha, beta, grad_out)?;
            Ok((g.grad_in, vec![g.d_alpha, g.d_beta]))
        }
    }
}

/// An activation layer together with its learned parameters and forward cache.
///
/// `alpha` holds the PReLU slope or MPELU `alpha`; `beta` is only populated for MPELU.
/// Both are empty for fixed activations.
#[derive(Debug, Clone)]
pub struct ActivationLayer {
    pub kind: ActivationKind,
    pub mode: ParamMode,
    pub channels: usize,
    pub alpha: Param,
    pub beta: Param,
    saved_input: Option<Tensor>,
    saved_output: Option<Tensor>,
}

impl ActivationLayer {
    pub fn new(kind: ActivationKind, mode: ParamMode, channels: usize) -> Self {
        let m = mode.count(channels);
        let (alpha, beta) = match kind {
            ActivationKind::PReLU { init } => (
                Param::new(Tensor::full([m], init)).with_multipliers(DEFAULT_PARAM_LR_MULT, 1.0),
                Param::new(Tensor::zeros([0])),
            ),
            ActivationKind::MPELU { alpha, beta } => (
                Param::new(Tensor::full([m], alpha)).with_multipliers(DEFAULT_PARAM_LR_MULT, 1.0),
                Param::new(Tensor::full([m], beta))
                    .with_multipliers(DEFAULT_PARAM_LR_MULT, 1.0)
                    .with_floor(BETA_FLOOR),
            ),
            _ => (
                Param::new(Tensor::zeros([0])),
                Param::new(Tensor::zeros([0])),
            ),
        };
        ActivationLayer {
            kind,
            mode,
            channels,
            alpha,
            beta,
            saved_input: None,
            saved_output: None,
        }
    }

    /// Sets the learning-rate and weight-decay multipliers of the learned vectors.
    pub fn set_multipliers(&mut self, lr_mult: f64, wd_mult: f64) {
        for p in [&mut self.alpha, &mut self.beta] {
            p.lr_mult = lr_mult;
            p.wd_mult = wd_mult;
        }
    }

    /// Restores the learned vectors to the kind's initial values.
    pub fn reset_parameters(&mut self) {
        match self.kind {
            ActivationKind::PReLU { init } => self.alpha.value.fill(init),
            ActivationKind::MPELU { alpha, beta } => {
                self.alpha.value.fill(alpha);
                self.beta.value.fill(beta);
            }
            _ => {}
        }
    }

    /// Overwrites MPELU parameters (and the kind's stored initial values).
    pub fn set_mpelu(&mut self, alpha: f64, beta: f64) -> Result<()> {
        if !matches!(self.kind, ActivationKind::MPELU { .. }) {
            return Err(Error::invalid(format!(
                "{} layer has no alpha/beta",
                self.kind.name()
            )));
        }
        if !(beta > 0.0) || alpha < 0.0 {
            return Err(Error::invalid("need alpha >= 0 and beta > 0"));
        }
        self.kind = ActivationKind::mpelu(alpha, beta);
        self.reset_parameters();
        Ok(())
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        match self.kind.learnable_vectors() {
            1 => vec![self.alpha.value.data()],
            2 => vec![self.alpha.value.data(), self.beta.value.data()],
            _ => vec![],
        }
    }

    fn check_channels(&self, x: &Tensor) -> Result<()> {
        let (_, c, _) = channel_layout(x.shape())?;
        if c != self.channels {
            return Err(Error::invalid(format!(
                "activation expects {} channels, input has {c}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Forward pass without touching the cache.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check_channels(x)?;
        activation_forward(&self.kind, x, &self.param_slices())
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.apply(x)?;
        self.saved_input = Some(x.clone());
        self.saved_output = Some(out.clone());
        Ok(out)
    }

    /// Returns the input gradient and adds the parameter gradients into `alpha.grad`/`beta.grad`.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (Some(y), Some(out)) = (&self.saved_input, &self.saved_output) else {
            return Err(Error::State(
                "activation backward called before forward".into(),
            ));
        };
        let (grad_in, pgrads) =
            activation_backward(&self.kind, y, out, &self.param_slices(), grad_out)?;
        for (param, g) in [&mut self.alpha, &mut self.beta].into_iter().zip(pgrads) {
            for (acc, v) in param.grad.data_mut().iter_mut().zip(g) {
                *acc += v;
            }
        }
        Ok(grad_in)
    }

    pub fn clear_cache(&mut self) {
        self.saved_input = None;
        self.saved_output = None;
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        match self.kind.learnable_vectors() {
            1 => vec![("alpha", &self.alpha)],
            2 => vec![("alpha", &self.alpha), ("beta", &self.beta)],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        match self.kind.learnable_vectors() {
            1 => vec![("alpha", &mut self.alpha)],
            2 => vec![("alpha", &mut self.alpha), ("beta", &mut self.beta)],
            _ => vec![],
        }
    }
}
