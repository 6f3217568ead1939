//! Signal-propagation statistics, Taylor residuals of the negative regime and gradient checking.

use std::io::Write;

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, Op};
use crate::init::LayerInit;
use crate::layers::softmax_cross_entropy;
use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which node outputs [`signal_stats`] records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StatsTarget {
    #[default]
    Activations,
    /// Convolution and dense outputs (the pre-activation signal).
    WeightLayers,
    All,
}

impl StatsTarget {
    fn wants(&self, op: &Op) -> bool {
        match self {
            StatsTarget::Activations => matches!(op, Op::Activation(_)),
            StatsTarget::WeightLayers => matches!(op, Op::Conv(_) | Op::Dense(_)),
            StatsTarget::All => !matches!(op, Op::Input),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub index: usize,
    pub name: String,
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBin {
    /// Upper bound `r` of the bin `(0, r)`.
    pub threshold: f64,
    /// Fraction of all inputs whose residual is below `threshold`.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StatsReport {
    pub layers: Vec<LayerStats>,
    pub residuals: Vec<ResidualBin>,
}

impl StatsReport {
    /// Writes the `layer_index,layer_name,mean,variance` block, then the `threshold,fraction`
    /// block when residual bins are present, separated by a blank line.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = w;
        {
            let mut cw = csv::Writer::from_writer(&mut w);
            cw.write_record(["layer_index", "layer_name", "mean", "variance"])?;
            for l in &self.layers {
                cw.write_record([
                    l.index.to_string(),
                    l.name.clone(),
                    l.mean.to_string(),
                    l.variance.to_string(),
                ])?;
            }
            cw.flush()?;
        }
        if !self.residuals.is_empty() {
            writeln!(w)?;
            write_residual_csv(&self.residuals, &mut w)?;
        }
        Ok(())
    }
}

pub fn write_residual_csv<W: Write>(bins: &[ResidualBin], w: W) -> Result<()> {
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(["threshold", "fraction"])?;
    for b in bins {
        cw.write_record([b.threshold.to_string(), b.fraction.to_string()])?;
    }
    cw.flush()?;
    Ok(())
}

/// Forward-propagates `probe` and records the moments of every selected node output in order.
/// Fails with [`Error::Overflow`] naming the first node whose output is not finite.
pub fn signal_stats(
    net: &NetworkGraph,
    probe: &Tensor,
    target: StatsTarget,
) -> Result<StatsReport> {
    if !probe.is_finite() {
        return Err(Error::invalid("probe batch contains non-finite values"));
    }
    let mut report = StatsReport::default();
    net.forward_inspect(probe, |i, node, out| {
        if !out.is_finite() {
            return Err(Error::Overflow {
                layer: node.name.clone(),
            });
        }
        if target.wants(&node.op) {
            let (mean, variance) = out.moments()?;
            report.layers.push(LayerStats {
                index: i,
                name: node.name.clone(),
                mean,
                variance,
                count: out.len(),
            });
        }
        Ok(())
    })?;
    Ok(report)
}

/// One row of the initialization trajectory written by `analyze-init`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitTrace {
    pub layer_index: usize,
    pub name: String,
    pub fan: f64,
    pub init_std: f64,
    pub act_mean: f64,
    pub act_var: f64,
}

/// For every initialized layer, the moments of the activation fed by it (or of the layer itself
/// when no activation follows) on `probe`.
pub fn init_trajectory(
    net: &NetworkGraph,
    log: &[LayerInit],
    probe: &Tensor,
) -> Result<Vec<InitTrace>> {
    let report = signal_stats(net, probe, StatsTarget::All)?;
    let by_index = |i: usize| report.layers.iter().find(|l| l.index == i);
    log.iter()
        .map(|l| {
            let watched = net.consuming_activation_index(l.node).unwrap_or(l.node);
            let s = by_index(watched)
                .ok_or_else(|| Error::State(format!("no statistics for node {watched}")))?;
            Ok(InitTrace {
                layer_index: l.node,
                name: l.name.clone(),
                fan: l.fan,
                init_std: l.std,
                act_mean: s.mean,
                act_var: s.variance,
            })
        })
        .collect()
}

pub fn write_init_trace_csv<W: Write>(rows: &[InitTrace], w: W) -> Result<()> {
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record([
        "layer_index",
        "name",
        "fan",
        "init_std",
        "act_mean",
        "act_var",
    ])?;
    for r in rows {
        cw.write_record([
            r.layer_index.to_string(),
            r.name.clone(),
            r.fan.to_string(),
            r.init_std.to_string(),
            r.act_mean.to_string(),
            r.act_var.to_string(),
        ])?;
    }
    cw.flush()?;
    Ok(())
}

/// `exp(t) - 1 - t`, accurate for small `|t|`.
fn expm1_minus_linear(t: f64) -> f64 {
    if t.abs() < 1e-2 {
        // Horner form of t^2/2! + t^3/3! + ... + t^9/9!
        let mut acc = 1.0 / 362_880.0;
        for k in (2..9).rev() {
            acc = acc * t + 1.0 / factorial(k);
        }
        acc * t * t
    } else {
        t.exp_m1() - t
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// First-order Taylor remainder of the negative MPELU branch, `alpha (e^{beta y} - 1) - alpha beta y`.
pub fn residual_exact(y: f64, alpha: f64, beta: f64) -> Result<f64> {
    if y > 0.0 {
        return Err(Error::invalid(format!(
            "residual is defined for y <= 0, got {y}"
        )));
    }
    if !(beta > 0.0) || !(alpha >= 0.0) {
        return Err(Error::invalid("residual needs alpha >= 0 and beta > 0"));
    }
    Ok(residual_unchecked(y, alpha, beta))
}

fn residual_unchecked(y: f64, alpha: f64, beta: f64) -> f64 {
    if y > 0.0 {
        0.0
    } else {
        alpha * expm1_minus_linear(beta * y)
    }
}

/// `alpha beta^2 y^2 / 2`, the Lagrange bound of [`residual_exact`].
pub fn residual_bound(y: f64, alpha: f64, beta: f64) -> f64 {
    0.5 * alpha * beta * beta * y * y
}

/// Fraction of all `source` values whose residual is below each threshold; positive inputs have
/// residual zero.
pub fn residual_histogram(
    source: &[f64],
    alpha: f64,
    beta: f64,
    thresholds: &[f64],
) -> Result<Vec<ResidualBin>> {
    if source.is_empty() {
        return Err(Error::invalid(
            "residual histogram needs at least one input",
        ));
    }
    if !(beta > 0.0) || !(alpha >= 0.0) {
        return Err(Error::invalid("residual needs alpha >= 0 and beta > 0"));
    }
    if thresholds.iter().any(|t| !(*t > 0.0)) || thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("thresholds must be positive and sorted"));
    }
    let mut counts = vec![0usize; thresholds.len()];
    for &y in source {
        let r = residual_unchecked(y, alpha, beta);
        for (c, t) in counts.iter_mut().zip(thresholds) {
            if r < *t {
                *c += 1;
            }
        }
    }
    Ok(thresholds
        .iter()
        .zip(counts)
        .map(|(&threshold, c)| ResidualBin {
            threshold,
            fraction: c as f64 / source.len() as f64,
        })
        .collect())
}

/// [`residual_histogram`] over `n` standard-normal draws.
pub fn residual_histogram_sampled(
    n: usize,
    rng: &mut Rng,
    alpha: f64,
    beta: f64,
    thresholds: &[f64],
) -> Result<Vec<ResidualBin>> {
    let samples: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    residual_histogram(&samples, alpha, beta, thresholds)
}

/// Scalar objective attached to a network output for gradient checking.
#[derive(Debug, Clone)]
pub enum LossHead {
    /// `sum(w * out)`.
    Projection(Tensor),
    /// `0.5 * sum(out^2)`.
    Quadratic,
    SoftmaxCrossEntropy(Vec<usize>),
}

impl LossHead {
    pub fn random_projection(shape: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut w = Tensor::zeros(shape.to_vec());
        w.gaussian_fill(0.0, 1.0, rng)?;
        Ok(LossHead::Projection(w))
    }

    /// Loss value and its gradient with respect to `out`.
    pub fn evaluate(&self, out: &Tensor) -> Result<(f64, Tensor)> {
        let (loss, grad) = match self {
            LossHead::Projection(w) => {
                out.check_same_shape(w)?;
                let l = out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
                (l, w.clone())
            }
            LossHead::Quadratic => (
                0.5 * out.data().iter().map(|v| v * v).sum::<f64>(),
                out.clone(),
            ),
            LossHead::SoftmaxCrossEntropy(labels) => {
                let r = softmax_cross_entropy(out, labels)?;
                (r.loss, r.grad)
            }
        };
        if !loss.is_finite() {
            return Err(Error::Overflow {
                layer: "loss".into(),
            });
        }
        Ok((loss, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Probes that move an activation input within this distance of zero across the kink are skipped.
    pub kink_band: f64,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
    pub check_input: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            kink_band: 1e-4,
            max_coords: 100,
            seed: 0,
            check_input: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRecord {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub argmax: usize,
    pub eps: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub records: Vec<GradCheckRecord>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckRecord> {
        self.records
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Plain-text table, one tensor per line.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<40} {:>14} {:>8} {:>8} {:>8} {:>9}\n",
            "tensor", "max_rel_err", "argmax", "checked", "skipped", "eps"
        );
        for r in &self.records {
            s.push_str(&format!(
                "{:<40} {:>14.3e} {:>8} {:>8} {:>8} {:>9.1e}\n",
                r.name, r.max_rel_error, r.argmax, r.checked, r.skipped, r.eps
            ));
        }
        s
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn kinked(kind: &ActivationKind) -> bool {
    !matches!(kind, ActivationKind::ELU { alpha } if *alpha == 1.0)
}

/// Loss and, for every kinked activation, the inputs lying within `band` of zero.
fn probe(
    net: &NetworkGraph,
    x: &Tensor,
    head: &LossHead,
    band: f64,
) -> Result<(f64, Vec<(usize, f64)>)> {
    let mut watched = vec![false; net.nodes().len()];
    for n in net.nodes() {
        if let Op::Activation(a) = &n.op {
            if kinked(&a.kind) {
                watched[n.inputs[0]] = true;
            }
        }
    }
    let mut near = Vec::new();
    let mut offset = 0;
    let out = net.forward_inspect(x, |i, _, t| {
        if watched[i] {
            for (k, &v) in t.data().iter().enumerate() {
                if v.abs() < band {
                    near.push((offset + k, v));
                }
            }
            offset += t.len();
        }
        Ok(())
    })?;
    Ok((head.evaluate(&out)?.0, near))
}

fn crosses_kink(a: &[(usize, f64)], b: &[(usize, f64)]) -> bool {
    // Elements leaving the band on one side entered it on the other; compare signs where both exist.
    let mut j = 0;
    for &(ia, va) in a {
        while j < b.len() && b[j].0 < ia {
            j += 1;
        }
        if j < b.len() && b[j].0 == ia && (va > 0.0) != (b[j].1 > 0.0) {
            return true;
        }
    }
    false
}

fn choose_coords(len: usize, max: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if len > max {
        rng.shuffle(&mut idx);
        idx.truncate(max);
        idx.sort_unstable();
    }
    idx
}

/// Compares analytic gradients with central differences for every parameter tensor (and the input).
///
/// The analytic pass uses the caching forward, so batch norm running statistics advance once.
pub fn grad_check(
    net: &mut NetworkGraph,
    input: &Tensor,
    head: &LossHead,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    grad_check_where(net, input, head, cfg, |_| true)
}

/// [`grad_check`] restricted to the parameter tensors whose name satisfies `select`.
pub fn grad_check_where(
    net: &mut NetworkGraph,
    input: &Tensor,
    head: &LossHead,
    cfg: &GradCheckConfig,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport> {
    if !(cfg.eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    net.zero_grad();
    let out = net.forward(input)?;
    let (_, g) = head.evaluate(&out)?;
    let grad_in = net.backward(&g)?;
    net.clear_caches();
    let analytic: Vec<(String, Tensor)> = net
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone()))
        .collect();
    let master = Rng::new(cfg.seed);
    let mut report = GradCheckReport::default();

    for (ti, (name, grad)) in analytic.iter().enumerate() {
        if !select(name) {
            continue;
        }
        let coords = choose_coords(grad.len(), cfg.max_coords, &mut master.derive(ti as u64));
        let mut rec = GradCheckRecord {
            name: name.clone(),
            max_rel_error: 0.0,
            argmax: 0,
            eps: cfg.eps,
            checked: 0,
            skipped: 0,
        };
        for &c in &coords {
            let original = param_at(net, ti).value.data()[c];
            param_at(net, ti).value.data_mut()[c] = original + cfg.eps;
            let plus = probe(net, input, head, cfg.kink_band);
            param_at(net, ti).value.data_mut()[c] = original - cfg.eps;
            let minus = probe(net, input, head, cfg.kink_band);
            param_at(net, ti).value.data_mut()[c] = original;
            let ((lp, np), (lm, nm)) = (plus?, minus?);
            if crosses_kink(&np, &nm) {
                rec.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * cfg.eps);
            let e = relative_error(grad.data()[c], numeric);
            rec.checked += 1;
            if e > rec.max_rel_error {
                rec.max_rel_error = e;
                rec.argmax = c;
            }
        }
        report.records.push(rec);
    }

    if cfg.check_input {
        let coords = choose_coords(input.len(), cfg.max_coords, &mut master.derive(u64::MAX));
        let mut rec = GradCheckRecord {
            name: "input".into(),
            max_rel_error: 0.0,
            argmax: 0,
            eps: cfg.eps,
            checked: 0,
            skipped: 0,
        };
        let mut x = input.clone();
        for &c in &coords {
            let original = x.data()[c];
            x.data_mut()[c] = original + cfg.eps;
            let (lp, np) = probe(net, &x, head, cfg.kink_band)?;
            x.data_mut()[c] = original - cfg.eps;
            let (lm, nm) = probe(net, &x, head, cfg.kink_band)?;
            x.data_mut()[c] = original;
            if crosses_kink(&np, &nm) {
                rec.skipped += 1;
                continue;
            }
            let e = relative_error(grad_in.data()[c], (lp - lm) / (2.0 * cfg.eps));
            rec.checked += 1;
            if e > rec.max_rel_error {
                rec.max_rel_error = e;
                rec.argmax = c;
            }
        }
        report.records.push(rec);
    }
    Ok(report)
}

fn param_at(net: &mut NetworkGraph, i: usize) -> &mut Param {
    net.params_mut().swap_remove(i).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{ActivationLayer, ParamMode};
    use crate::layers::DenseLayer;

    #[test]
    fn residual_examples() {
        assert_eq!(residual_exact(0.0, 1.0, 1.0).unwrap(), 0.0);
        let r = residual_exact(-0.1414, 1.0, 1.0).unwrap();
        assert!((r - ((-0.1414f64).exp() - 1.0 + 0.1414)).abs() < 1e-15);
        assert!(r < 0.01 && (r - 0.009_541_985_442_870_8).abs() < 1e-12);
        let r = residual_exact(-1.0, 1.0, 1.0).unwrap();
        assert!((r - (-1.0f64).exp()).abs() < 1e-15);
        assert!(residual_exact(0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn small_argument_series_matches_direct() {
        for t in [-9e-3f64, -1e-3, -1e-5] {
            // the direct form loses about |t| * ulp to cancellation
            let direct = t.exp_m1() - t;
            assert!((expm1_minus_linear(t) - direct).abs() <= 4.0 * f64::EPSILON * t.abs());
            assert!(expm1_minus_linear(t) > 0.0);
        }
    }

    #[test]
    fn all_positive_source() {
        let bins = residual_histogram(&[0.5, 1.0, 3.0], 7.0, 2.0, &[0.01, 1.0]).unwrap();
        assert!(bins.iter().all(|b| b.fraction == 1.0));
        assert!(residual_histogram(&[], 1.0, 1.0, &[0.1]).is_err());
        assert!(residual_histogram(&[1.0], 1.0, 1.0, &[0.5, 0.1]).is_err());
    }

    #[test]
    fn identity_network_reports_input_moments() {
        let mut g = NetworkGraph::new();
        for i in 0..3 {
            let a = ActivationLayer::new(
                ActivationKind::LReLU { slope: 1.0 },
                ParamMode::ChannelShared,
                2,
            );
            g.then(format!("act{i}"), Op::Activation(a)).unwrap();
        }
        let mut x = Tensor::zeros([4, 2, 3, 3]);
        x.gaussian_fill(0.5, 2.0, &mut Rng::new(1)).unwrap();
        let m = x.moments().unwrap();
        let r = signal_stats(&g, &x, StatsTarget::Activations).unwrap();
        assert_eq!(r.layers.len(), 3);
        assert!(r.layers.iter().all(|l| (l.mean, l.variance) == m));
    }

    #[test]
    fn overflow_names_layer() {
        let mut g = NetworkGraph::new();
        let mut d = DenseLayer::new(2, 2).unwrap();
        d.weight.value.fill(f64::MAX);
        g.then("big", Op::Dense(d)).unwrap();
        let err = signal_stats(&g, &Tensor::full([1, 2], 10.0), StatsTarget::All).unwrap_err();
        assert!(matches!(err, Error::Overflow { ref layer } if layer == "big"));
    }

    #[test]
    fn linear_layer_is_exact() {
        let mut g = NetworkGraph::new();
        let mut d = DenseLayer::new(5, 3).unwrap();
        d.weight
            .value
            .gaussian_fill(0.0, 1.0, &mut Rng::new(2))
            .unwrap();
        g.then("fc", Op::Dense(d)).unwrap();
        let mut x = Tensor::zeros([4, 5]);
        x.gaussian_fill(0.0, 1.0, &mut Rng::new(3)).unwrap();
        // central differences are exact on a quadratic, so a wide step only leaves rounding error
        let cfg = GradCheckConfig {
            eps: 1e-2,
            ..GradCheckConfig::default()
        };
        let r = grad_check(&mut g, &x, &LossHead::Quadratic, &cfg).unwrap();
        assert!(r.max_rel_error() < 1e-9, "{}", r.table());
    }

    #[test]
    fn csv_blocks() {
        let report = StatsReport {
            layers: vec![LayerStats {
                index: 1,
                name: "a,b".into(),
                mean: 0.5,
                variance: 2.0,
                count: 4,
            }],
            residuals: vec![ResidualBin {
                threshold: 0.5,
                fraction: 0.75,
            }],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "layer_index,layer_name,mean,variance\n1,\"a,b\",0.5,2\n\nthreshold,fraction\n0.5,0.75\n"
        );
    }
}
