use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::param::Param;
use crate::tensor::Tensor;

/// Learning rate for a prefix of epochs before the regular schedule starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warmup {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, factor)`: from 0-based epoch `epoch` on, the rate is multiplied by `factor`.
    pub schedule: Vec<(usize, f64)>,
    pub warmup: Option<Warmup>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: vec![(81, 0.1), (122, 0.1)],
            warmup: None,
            batch_size: 128,
            epochs: 164,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid(format!(
                "base learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self
            .schedule
            .iter()
            .any(|(_, f)| !(*f > 0.0) || !f.is_finite())
        {
            return Err(Error::invalid("schedule factors must be positive"));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::invalid(
                "schedule boundaries must be strictly increasing",
            ));
        }
        if let Some(w) = self.warmup {
            if !(w.lr > 0.0) || !w.lr.is_finite() {
                return Err(Error::invalid(format!(
                    "warm-up learning rate must be positive, got {}",
                    w.lr
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }

    /// Learning rate used during 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if let Some(w) = self.warmup {
            if epoch < w.epochs {
                return w.lr;
            }
        }
        self.schedule
            .iter()
            .filter(|(b, _)| *b <= epoch)
            .fold(self.base_lr, |lr, (_, f)| lr * f)
    }

    /// Whether the rate changes when 0-based epoch `epoch` starts.
    pub fn is_boundary(&self, epoch: usize) -> bool {
        self.schedule.iter().any(|(b, _)| *b == epoch)
            || self.warmup.is_some_and(|w| w.epochs == epoch && epoch > 0)
    }
}

/// A parameter tensor together with its momentum buffer.
#[derive(Debug)]
pub struct ParamGroup<'a> {
    pub name: String,
    pub param: &'a mut Param,
    pub velocity: &'a mut Tensor,
}

/// One momentum step over all groups:
/// `g = grad + wd_mult * weight_decay * theta`, `v = momentum * v + g`,
/// `theta -= lr_mult * lr * v`, then the parameter's floor is enforced.
///
/// Every gradient is checked before anything is modified, so a non-finite gradient leaves
/// all parameters and velocities untouched and yields [`Error::Divergence`] (with zeroed
/// position fields for the caller to fill in).
pub fn sgd_step(
    groups: &mut [ParamGroup<'_>],
    momentum: f64,
    weight_decay: f64,
    lr: f64,
) -> Result<()> {
    for g in groups.iter() {
        if g.velocity.shape() != g.param.value.shape() {
            return Err(Error::invalid(format!(
                "velocity of `{}` has shape {:?}, parameter {:?}",
                g.name,
                g.velocity.shape(),
                g.param.value.shape()
            )));
        }
        if let Some(i) = g.param.grad.first_non_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                iteration: 0,
                reason: format!("non-finite gradient in `{}` at element {i}", g.name),
            });
        }
    }
    for g in groups.iter_mut() {
        let decay = g.param.wd_mult * weight_decay;
        let step = g.param.lr_mult * lr;
        let p = &mut *g.param;
        for ((theta, grad), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(g.velocity.data_mut())
        {
            let d = grad + decay * *theta;
            *v = momentum * *v + d;
            *theta -= step * *v;
        }
        p.project();
    }
    Ok(())
}

/// SGD with momentum over every parameter of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    velocities: Vec<(String, Tensor)>,
}

impl Sgd {
    pub fn new(config: SgdConfig, net: &NetworkGraph) -> Result<Self> {
        config.validate()?;
        let velocities = net
            .params()
            .into_iter()
            .map(|(n, p)| (n, Tensor::zeros(p.value.shape().to_vec())))
            .collect();
        Ok(Sgd { config, velocities })
    }

    pub fn velocities(&self) -> &[(String, Tensor)] {
        &self.velocities
    }

    /// Replaces the momentum buffers; names and shapes must match the current ones.
    pub fn set_velocities(&mut self, v: Vec<(String, Tensor)>) -> Result<()> {
        if v.len() != self.velocities.len()
            || v.iter()
                .zip(&self.velocities)
                .any(|(a, b)| a.0 != b.0 || a.1.shape() != b.1.shape())
        {
            return Err(Error::Schema(
                "momentum buffers do not match the network parameters".into(),
            ));
        }
        self.velocities = v;
        Ok(())
    }

    /// Applies one step at learning rate `lr`; `epoch` and `iteration` only label errors.
    pub fn step(
        &mut self,
        net: &mut NetworkGraph,
        lr: f64,
        epoch: usize,
        iteration: usize,
    ) -> Result<()> {
        let params = net.params_mut();
        if params.len() != self.velocities.len() {
            return Err(Error::Schema(format!(
                "optimizer holds {} buffers for {} parameters",
                self.velocities.len(),
                params.len()
            )));
        }
        let mut groups: Vec<ParamGroup<'_>> = params
            .into_iter()
            .zip(self.velocities.iter_mut())
            .map(|((name, param), (_, velocity))| ParamGroup {
                name,
                param,
                velocity,
            })
            .collect();
        sgd_step(
            &mut groups,
            self.config.momentum,
            self.config.weight_decay,
            lr,
        )
        .map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence {
                epoch,
                iteration,
                reason,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> (Param, Tensor) {
        let mut p = Param::new(Tensor::full([1], value));
        p.grad.fill(grad);
        (p, Tensor::zeros([1]))
    }

    fn step(p: &mut Param, v: &mut Tensor, momentum: f64, wd: f64, lr: f64) -> Result<()> {
        let mut g = [ParamGroup {
            name: "p".into(),
            param: p,
            velocity: v,
        }];
        sgd_step(&mut g, momentum, wd, lr)
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let (mut p, mut v) = single(0.7, 0.0);
        step(&mut p, &mut v, 0.9, 0.0, 0.1).unwrap();
        assert_eq!(p.value.data(), &[0.7]);
    }

    #[test]
    fn vanilla_step_scales_with_lr_mult() {
        for mult in [1.0, 5.0] {
            let (p, mut v) = single(1.0, 1.0);
            let mut p = p.with_multipliers(mult, 1.0);
            step(&mut p, &mut v, 0.0, 0.0, 0.1).unwrap();
            assert!((p.value.data()[0] - (1.0 - 0.1 * mult)).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_multiplier_zero_removes_decay_term() {
        let (p, mut v) = single(2.0, 0.0);
        let mut p = p.with_multipliers(1.0, 0.0);
        step(&mut p, &mut v, 0.9, 1e-4, 0.1).unwrap();
        assert_eq!(p.value.data(), &[2.0]);
        let (mut q, mut w) = single(2.0, 0.0);
        step(&mut q, &mut w, 0.9, 1e-4, 0.1).unwrap();
        assert_eq!(w.data(), &[1e-4 * 2.0]);
    }

    #[test]
    fn momentum_accumulates_and_floor_applies() {
        let (p, mut v) = single(0.5, 1.0);
        let mut p = p.with_floor(0.3);
        step(&mut p, &mut v, 0.5, 0.0, 0.1).unwrap();
        step(&mut p, &mut v, 0.5, 0.0, 0.1).unwrap();
        assert_eq!(v.data(), &[1.5]);
        assert_eq!(p.value.data(), &[0.3]);
    }

    #[test]
    fn non_finite_gradient_changes_nothing() {
        let (mut a, mut va) = single(1.0, 1.0);
        let (mut b, mut vb) = single(1.0, f64::NAN);
        let mut groups = [
            ParamGroup {
                name: "a".into(),
                param: &mut a,
                velocity: &mut va,
            },
            ParamGroup {
                name: "b".into(),
                param: &mut b,
                velocity: &mut vb,
            },
        ];
        let err = sgd_step(&mut groups, 0.9, 0.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::Divergence { ref reason, .. } if reason.contains("`b`")));
        assert_eq!(a.value.data(), &[1.0]);
        assert_eq!(va.data(), &[0.0]);
    }

    #[test]
    fn step_schedule() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(80), 0.1);
        assert!((cfg.lr_at(81) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(121) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(122) - 0.001).abs() < 1e-15);
        let warm = SgdConfig {
            warmup: Some(Warmup {
                lr: 0.01,
                epochs: 1,
            }),
            ..cfg
        };
        assert_eq!(warm.lr_at(0), 0.01);
        assert_eq!(warm.lr_at(1), 0.1);
        assert!(warm.is_boundary(1) && warm.is_boundary(81) && !warm.is_boundary(2));
    }

    #[test]
    fn validation() {
        let ok = SgdConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SgdConfig {
                base_lr: 0.0,
                ..ok.clone()
            },
            SgdConfig {
                momentum: 1.0,
                ..ok.clone()
            },
            SgdConfig {
                schedule: vec![(5, 0.1), (5, 0.1)],
                ..ok.clone()
            },
            SgdConfig {
                schedule: vec![(5, 0.0)],
                ..ok.clone()
            },
            SgdConfig {
                batch_size: 0,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))));
        }
    }
}
