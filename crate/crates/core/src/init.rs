//! Weight initialization: TaylorELU with its MSRA/Xavier/Gaussian relatives, and LSUV.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, Op};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FanMode {
    #[default]
    FanIn,
    FanOut,
    Average,
}

impl FromStr for FanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fan_in" | "fan-in" | "in" => Ok(FanMode::FanIn),
            "fan_out" | "fan-out" | "out" => Ok(FanMode::FanOut),
            "average" | "avg" => Ok(FanMode::Average),
            _ => Err(Error::invalid(format!(
                "unknown fan mode '{s}' (fan_in|fan_out|average)"
            ))),
        }
    }
}

/// Connection counts of one layer: `fan_in = k^2 c_in`, `fan_out = k^2 c_out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FanInfo {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub mode: FanMode,
}

impl FanInfo {
    pub fn new(k: usize, c_in: usize, c_out: usize, mode: FanMode) -> Result<Self> {
        if k == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::invalid(format!(
                "fan needs k, c_in, c_out >= 1 (got {k}, {c_in}, {c_out})"
            )));
        }
        Ok(FanInfo {
            k,
            c_in,
            c_out,
            mode,
        })
    }

    pub fn fan_in(&self) -> f64 {
        (self.k * self.k * self.c_in) as f64
    }

    pub fn fan_out(&self) -> f64 {
        (self.k * self.k * self.c_out) as f64
    }

    pub fn average(&self) -> f64 {
        (self.fan_in() + self.fan_out()) / 2.0
    }

    /// Fan for the configured mode.
    pub fn fan(&self) -> f64 {
        match self.mode {
            FanMode::FanIn => self.fan_in(),
            FanMode::FanOut => self.fan_out(),
            FanMode::Average => self.average(),
        }
    }

    fn of(op: &Op, mode: FanMode) -> Option<FanInfo> {
        match op {
            Op::Conv(c) => Some(FanInfo {
                k: c.kernel,
                c_in: c.c_in,
                c_out: c.c_out,
                mode,
            }),
            Op::Dense(d) => Some(FanInfo {
                k: 1,
                c_in: d.in_features,
                c_out: d.out_features,
                mode,
            }),
            _ => None,
        }
    }
}

/// `sqrt(2 / (fan * (1 + alpha^2 beta^2)))`.
pub fn taylor_std(fan: &FanInfo, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha >= 0.0) || !(beta > 0.0) {
        return Err(Error::invalid(format!(
            "TaylorELU needs alpha >= 0 and beta > 0, got ({alpha}, {beta})"
        )));
    }
    let f = fan.fan();
    if !(f > 0.0) {
        return Err(Error::invalid("zero fan"));
    }
    let ab = alpha * beta;
    Ok((2.0 / (f * (1.0 + ab * ab))).sqrt())
}

/// `sqrt(2 / ((1 + a^2) fan))`.
pub fn msra_std(fan: &FanInfo, slope: f64) -> f64 {
    (2.0 / ((1.0 + slope * slope) * fan.fan())).sqrt()
}

/// `sqrt(1 / fan_avg)`, independent of the fan mode.
pub fn xavier_std(fan: &FanInfo) -> f64 {
    (1.0 / fan.average()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMethod {
    Gaussian {
        std: f64,
    },
    Xavier,
    Msra {
        slope: f64,
    },
    /// `None` reads `(alpha, beta)` from the activation consuming each layer's output.
    TaylorElu {
        fixed: Option<(f64, f64)>,
    },
    /// Orthonormal pre-initialization; finish with [`lsuv_init`].
    Lsuv {
        tol: f64,
        max_iter: usize,
    },
}

impl InitMethod {
    pub const LSUV_DEFAULT: InitMethod = InitMethod::Lsuv {
        tol: 0.1,
        max_iter: 10,
    };

    pub fn validate(&self) -> Result<()> {
        match *self {
            InitMethod::Gaussian { std } if !(std >= 0.0) => Err(Error::invalid(format!(
                "gaussian std must be non-negative, got {std}"
            ))),
            InitMethod::TaylorElu {
                fixed: Some((a, b)),
            } if !(a >= 0.0) || !(b > 0.0) => {
                Err(Error::invalid("TaylorELU needs alpha >= 0 and beta > 0"))
            }
            InitMethod::Lsuv { tol, .. } if !(tol > 0.0) => {
                Err(Error::invalid("LSUV tolerance must be positive"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for InitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitMethod::Gaussian { std } => write!(f, "gaussian={std}"),
            InitMethod::Xavier => f.write_str("xavier"),
            InitMethod::Msra { slope } => write!(f, "msra={slope}"),
            InitMethod::TaylorElu { fixed: None } => f.write_str("taylor"),
            InitMethod::TaylorElu {
                fixed: Some((a, b)),
            } => write!(f, "taylor={a},{b}"),
            InitMethod::Lsuv { tol, max_iter } => write!(f, "lsuv={tol},{max_iter}"),
        }
    }
}

/// `gaussian=<std>`, `xavier`, `msra[=<slope>]`, `taylor[=<alpha>,<beta>]`, `lsuv[=<tol>,<max_iter>]`.
impl FromStr for InitMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once('=') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number '{v}' in init method '{s}'")))
        };
        let pair = |a: &str| -> Result<(f64, f64)> {
            let (x, y) = a.split_once(',').ok_or_else(|| {
                Error::invalid(format!(
                    "init method '{s}' needs two comma-separated values"
                ))
            })?;
            Ok((num(x)?, num(y)?))
        };
        let m = match (name, arg) {
            ("gaussian", Some(a)) => InitMethod::Gaussian { std: num(a)? },
            ("gaussian", None) => InitMethod::Gaussian { std: 0.01 },
            ("xavier", None) => InitMethod::Xavier,
            ("msra", None) => InitMethod::Msra { slope: 0.0 },
            ("msra", Some(a)) => InitMethod::Msra { slope: num(a)? },
            ("taylor", None) => InitMethod::TaylorElu { fixed: None },
            ("taylor", Some(a)) => InitMethod::TaylorElu {
                fixed: Some(pair(a)?),
            },
            ("lsuv", None) => InitMethod::LSUV_DEFAULT,
            ("lsuv", Some(a)) => {
                let (tol, it) = pair(a)?;
                if it < 0.0 || it.fract() != 0.0 {
                    return Err(Error::invalid(
                        "LSUV max_iter must be a non-negative integer",
                    ));
                }
                InitMethod::Lsuv {
                    tol,
                    max_iter: it as usize,
                }
            }
            _ => return Err(Error::invalid(format!("unknown init method '{s}'"))),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Per-layer record of what [`init_network`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInit {
    pub node: usize,
    pub name: String,
    pub fan: f64,
    pub std: f64,
}

/// Target standard deviation of the weight tensor at node `idx` under `method`.
pub fn target_std(
    net: &NetworkGraph,
    idx: usize,
    method: &InitMethod,
    mode: FanMode,
) -> Result<Option<f64>> {
    let Some(fan) = FanInfo::of(&net.nodes()[idx].op, mode) else {
        return Ok(None);
    };
    let std = match *method {
        InitMethod::Gaussian { std } => std,
        InitMethod::Xavier => xavier_std(&fan),
        InitMethod::Msra { slope } => msra_std(&fan, slope),
        InitMethod::TaylorElu {
            fixed: Some((a, b)),
        } => taylor_std(&fan, a, b)?,
        InitMethod::TaylorElu { fixed: None } => {
            let (a, b) = net
                .consuming_activation(idx)
                .map_or((0.0, 1.0), |act| act.kind.taylor_coefficients());
            taylor_std(&fan, a, b)?
        }
        InitMethod::Lsuv { .. } => (1.0 / fan.fan_in()).sqrt(),
    };
    Ok(Some(std))
}

/// Fills every convolution and dense weight per `method`, zeroes biases, resets batch norm to the
/// identity affine map with fresh running statistics, and restores activation parameters.
pub fn init_network(
    net: &mut NetworkGraph,
    method: &InitMethod,
    mode: FanMode,
    rng: &mut Rng,
) -> Result<Vec<LayerInit>> {
    method.validate()?;
    let mut log = Vec::new();
    for idx in 0..net.nodes().len() {
        let std = target_std(net, idx, method, mode)?;
        let name = net.nodes()[idx].name.clone();
        let fan = FanInfo::of(&net.nodes()[idx].op, mode).map(|f| f.fan());
        match &mut net.nodes_mut()[idx].op {
            Op::Conv(c) => {
                fill_weight(&mut c.weight.value, method, std.unwrap(), rng)?;
                if let Some(b) = &mut c.bias {
                    b.value.fill(0.0);
                }
            }
            Op::Dense(d) => {
                fill_weight(&mut d.weight.value, method, std.unwrap(), rng)?;
                d.bias.value.fill(0.0);
            }
            Op::BatchNorm(bn) => {
                bn.gamma.value.fill(1.0);
                bn.shift.value.fill(0.0);
                bn.running_mean.fill(0.0);
                bn.running_var.fill(1.0);
            }
            Op::Activation(a) => a.reset_parameters(),
            Op::Input | Op::Pool(_) | Op::GlobalAvgPool(_) | Op::PadShortcut(_) | Op::Add => {}
        }
        if let (Some(std), Some(fan)) = (std, fan) {
            log.push(LayerInit {
                node: idx,
                name,
                fan,
                std,
            });
        }
    }
    Ok(log)
}

fn fill_weight(w: &mut Tensor, method: &InitMethod, std: f64, rng: &mut Rng) -> Result<()> {
    match method {
        InitMethod::Lsuv { .. } => orthonormal_fill(w, rng),
        _ => w.gaussian_fill(0.0, std, rng),
    }
}

/// Replaces `w` (viewed as `[rows, rest]`) by the orthonormal factor of a Gaussian draw.
pub fn orthonormal_fill(w: &mut Tensor, rng: &mut Rng) -> Result<()> {
    let rows = w.dim(0);
    let cols = w.len() / rows.max(1);
    let (tall_r, tall_c) = if rows >= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let g = DMatrix::from_fn(tall_r, tall_c, |_, _| rng.normal());
    let q = g.qr().q();
    let data = w.data_mut();
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = if rows >= cols { q[(r, c)] } else { q[(c, r)] };
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsuvLayer {
    pub node: usize,
    pub name: String,
    pub variance: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LsuvReport {
    pub layers: Vec<LsuvLayer>,
}

/// Rescales each convolution/dense layer in topological order until its output variance on
/// `probe` is within `tol` of 1 or `max_iter` rescalings have been applied.
pub fn lsuv_init(
    net: &mut NetworkGraph,
    probe: &Tensor,
    tol: f64,
    max_iter: usize,
) -> Result<LsuvReport> {
    if !(tol > 0.0) {
        return Err(Error::invalid("LSUV tolerance must be positive"));
    }
    if probe.rank() == 0 || probe.dim(0) < 32 {
        return Err(Error::invalid(
            "LSUV needs a probe batch of at least 32 samples",
        ));
    }
    let mut report = LsuvReport::default();
    let layers: Vec<usize> = (0..net.nodes().len())
        .filter(|&i| matches!(net.nodes()[i].op, Op::Conv(_) | Op::Dense(_)))
        .collect();
    for idx in layers {
        let name = net.nodes()[idx].name.clone();
        let measure = |net: &NetworkGraph| -> Result<f64> {
            let (_, var) = net.evaluate_until(probe, idx)?.moments()?;
            if !var.is_finite() {
                return Err(Error::Overflow {
                    layer: name.clone(),
                });
            }
            if var <= 0.0 {
                return Err(Error::SingularInit {
                    layer: name.clone(),
                });
            }
            Ok(var)
        };
        let mut var = measure(net)?;
        let mut iterations = 0;
        while (var - 1.0).abs() > tol && iterations < max_iter {
            let s = 1.0 / var.sqrt();
            match &mut net.nodes_mut()[idx].op {
                Op::Conv(c) => c.weight.value.scale_in_place(s),
                Op::Dense(d) => d.weight.value.scale_in_place(s),
                _ => unreachable!(),
            }
            iterations += 1;
            var = measure(net)?;
        }
        report.layers.push(LsuvLayer {
            node: idx,
            name,
            variance: var,
            iterations,
            converged: (var - 1.0).abs() <= tol,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::models::{build_plain, PlainConfig};

    fn fan(mode: FanMode) -> FanInfo {
        FanInfo::new(3, 64, 128, mode).unwrap()
    }

    #[test]
    fn closed_forms() {
        let f = fan(FanMode::FanIn);
        assert!((taylor_std(&f, 0.0, 1.0).unwrap() - (2.0f64 / 576.0).sqrt()).abs() < 1e-15);
        assert!((taylor_std(&f, 1.0, 1.0).unwrap() - 1.0 / 24.0).abs() < 1e-15);
        assert!((taylor_std(&f, 0.25, 1.0).unwrap() - 0.057166).abs() < 5e-7);
        assert_eq!(fan(FanMode::FanOut).fan(), 1152.0);
        assert_eq!(fan(FanMode::Average).fan(), 864.0);
        assert!((xavier_std(&f) - (1.0f64 / 864.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn taylor_rejects_bad_inputs() {
        let f = fan(FanMode::FanIn);
        assert!(taylor_std(&f, -0.1, 1.0).is_err());
        assert!(taylor_std(&f, 1.0, 0.0).is_err());
        assert!(FanInfo::new(0, 1, 1, FanMode::FanIn).is_err());
    }

    #[test]
    fn method_strings() {
        for s in [
            "gaussian=0.01",
            "xavier",
            "msra=0.25",
            "taylor",
            "taylor=1,1",
            "lsuv=0.1,10",
        ] {
            let m: InitMethod = s.parse().unwrap();
            assert_eq!(m.to_string().parse::<InitMethod>().unwrap(), m);
        }
        assert!("taylor=1".parse::<InitMethod>().is_err());
        assert!("gaussian=-1".parse::<InitMethod>().is_err());
    }

    #[test]
    fn taylor_reads_consuming_activation() {
        let mut cfg = PlainConfig::new(2, 32, ActivationKind::PReLU { init: 0.25 });
        cfg.classes = Some(10);
        let net = build_plain(&cfg).unwrap();
        let m = InitMethod::TaylorElu { fixed: None };
        let conv = net.find("conv2").unwrap();
        let fc = net.find("fc").unwrap();
        let f = FanInfo::new(3, 32, 32, FanMode::FanIn).unwrap();
        assert_eq!(
            target_std(&net, conv, &m, FanMode::FanIn).unwrap(),
            Some(taylor_std(&f, 0.25, 1.0).unwrap())
        );
        let fd = FanInfo::new(1, 32, 10, FanMode::FanIn).unwrap();
        assert_eq!(
            target_std(&net, fc, &m, FanMode::FanIn).unwrap(),
            Some(msra_std(&fd, 0.0))
        );
    }

    #[test]
    fn orthonormal_rows() {
        let mut w = Tensor::zeros([4, 2, 3, 3]);
        orthonormal_fill(&mut w, &mut Rng::new(3)).unwrap();
        let m = w.clone().reshape([4, 18]).unwrap();
        let gram = m.matmul(&m.transpose().unwrap()).unwrap();
        assert!(gram.max_abs_diff(&Tensor::identity(4)).unwrap() < 1e-12);
    }

    #[test]
    fn lsuv_rescales_once_for_variance_four() {
        let mut cfg = PlainConfig::new(1, 4, ActivationKind::ReLU);
        cfg.in_channels = 4;
        cfg.kernel = 1;
        cfg.classes = None;
        let mut net = build_plain(&cfg).unwrap();
        if let Op::Conv(c) = &mut net.nodes_mut()[1].op {
            c.weight.value = Tensor::identity(4)
                .scale(2.0)
                .reshape([4, 4, 1, 1])
                .unwrap();
        }
        let mut probe = Tensor::zeros([64, 4, 3, 3]);
        probe.gaussian_fill(0.0, 1.0, &mut Rng::new(8)).unwrap();
        let (_, v) = probe.moments().unwrap();
        probe.scale_in_place(1.0 / v.sqrt());
        let report = lsuv_init(&mut net, &probe, 1e-9, 5).unwrap();
        assert_eq!(report.layers[0].iterations, 1);
        assert!((report.layers[0].variance - 1.0).abs() < 1e-12);
        let again = lsuv_init(&mut net, &probe, 1e-9, 5).unwrap();
        assert_eq!(again.layers[0].iterations, 0);
    }

    #[test]
    fn lsuv_zero_weights_is_singular() {
        let mut cfg = PlainConfig::new(1, 2, ActivationKind::ReLU);
        cfg.classes = None;
        let mut net = build_plain(&cfg).unwrap();
        let probe = Tensor::full([32, 3, 4, 4], 1.0);
        assert!(matches!(
            lsuv_init(&mut net, &probe, 0.1, 10),
            Err(Error::SingularInit { .. })
        ));
    }
}
