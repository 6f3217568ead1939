//! Architecture builders: CIFAR residual networks, network-in-network and plain stacks.

use std::fmt;
use std::str::FromStr;

use crate::activation::{ActivationKind, ActivationLayer, ParamMode};
use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, Op, PadShortcut};
use crate::layers::{BatchNormLayer, ConvLayer, DenseLayer, GlobalAvgPool, PoolKind, PoolLayer};

/// Residual block layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockVariant {
    /// conv-BN-act-conv-BN, add, act.
    NonBottleneck,
    /// conv-BN-act-conv-BN, add (no activation after the addition).
    MpeluNonBottleneck,
    /// BN-act-conv1x1-BN-act-conv3x3-BN-act-conv1x1, add.
    FullPreActBottleneck,
    /// Same layout as `FullPreActBottleneck`, MPELU by default.
    MpeluFullPreAct,
    /// act-conv1x1-BN-act-conv3x3-BN-act-conv1x1-BN, add.
    MpeluOnlyPreActWithBN,
    /// act-conv1x1-BN-act-conv3x3-BN-act-conv1x1, add.
    MpeluOnlyPreAct,
    /// conv1x1-BN-act-conv3x3-BN-act-conv1x1-BN, add.
    NopreWithBNBeforeAdd,
    /// conv1x1-BN-act-conv3x3-BN-act-conv1x1, add.
    Nopre,
    /// conv1x1-act-conv3x3-act-conv1x1, add.
    NopreNoBN,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 9] = [
        BlockVariant::NonBottleneck,
        BlockVariant::MpeluNonBottleneck,
        BlockVariant::FullPreActBottleneck,
        BlockVariant::MpeluFullPreAct,
        BlockVariant::MpeluOnlyPreActWithBN,
        BlockVariant::MpeluOnlyPreAct,
        BlockVariant::NopreWithBNBeforeAdd,
        BlockVariant::Nopre,
        BlockVariant::NopreNoBN,
    ];

    pub fn is_bottleneck(&self) -> bool {
        !matches!(
            self,
            BlockVariant::NonBottleneck | BlockVariant::MpeluNonBottleneck
        )
    }

    pub fn is_nopre(&self) -> bool {
        matches!(
            self,
            BlockVariant::Nopre | BlockVariant::NopreNoBN | BlockVariant::NopreWithBNBeforeAdd
        )
    }

    /// Activation used when none is given: ReLU for the two baselines, MPELU(1, 1) otherwise.
    pub fn default_activation(&self) -> ActivationKind {
        match self {
            BlockVariant::NonBottleneck | BlockVariant::FullPreActBottleneck => {
                ActivationKind::ReLU
            }
            _ => ActivationKind::mpelu(1.0, 1.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BlockVariant::NonBottleneck => "non-bottleneck",
            BlockVariant::MpeluNonBottleneck => "mpelu-non-bottleneck",
            BlockVariant::FullPreActBottleneck => "full-preact",
            BlockVariant::MpeluFullPreAct => "mpelu-full-preact",
            BlockVariant::MpeluOnlyPreActWithBN => "mpelu-only-preact-bn",
            BlockVariant::MpeluOnlyPreAct => "mpelu-only-preact",
            BlockVariant::NopreWithBNBeforeAdd => "nopre-bn-before-add",
            BlockVariant::Nopre => "nopre",
            BlockVariant::NopreNoBN => "nopre-no-bn",
        }
    }

    /// Blocks per stage for a given depth.
    pub fn blocks_per_stage(&self, depth: usize) -> Result<usize> {
        let (per, formula) = if self.is_bottleneck() {
            (9, "9n+2")
        } else {
            (6, "6n+2")
        };
        if depth < per + 2 || (depth - 2) % per != 0 {
            return Err(Error::invalid(format!(
                "depth {depth} does not fit {}: expected depth = {formula} with n >= 1",
                self.name()
            )));
        }
        Ok((depth - 2) / per)
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BlockVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = BlockVariant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!(
                    "unknown block variant '{s}' (one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// How shortcuts change width or resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shortcut {
    /// 1x1 strided convolution.
    Projection,
    /// Subsample and append zero channels.
    ZeroPad,
}

/// Which convolutions carry a bias term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvBias {
    Never,
    Always,
    /// Only convolutions not immediately followed by batch norm.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    pub depth: usize,
    pub variant: BlockVariant,
    pub classes: usize,
    pub activation: ActivationKind,
    pub mode: ParamMode,
    pub shortcut: Shortcut,
    /// Batch norm after projection convolutions (non-bottleneck families only).
    pub projection_bn: bool,
    pub conv_bias: ConvBias,
    /// Nopre families: BN after the stem convolution.
    pub bn_first: bool,
    /// Nopre families: BN after the last addition.
    pub bn_end: bool,
}

impl ResNetConfig {
    pub fn new(depth: usize, variant: BlockVariant) -> Self {
        ResNetConfig {
            depth,
            variant,
            classes: 10,
            activation: variant.default_activation(),
            mode: ParamMode::ChannelWise,
            shortcut: Shortcut::Projection,
            projection_bn: false,
            conv_bias: ConvBias::Never,
            bn_first: true,
            bn_end: true,
        }
    }

    pub fn with_activation(mut self, kind: ActivationKind) -> Self {
        self.activation = kind;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NinConfig {
    pub activation: ActivationKind,
    pub mode: ParamMode,
    pub batch_norm: bool,
    pub classes: usize,
    pub in_channels: usize,
}

impl Default for NinConfig {
    fn default() -> Self {
        NinConfig {
            activation: ActivationKind::mpelu(1.0, 1.0),
            mode: ParamMode::ChannelWise,
            batch_norm: false,
            classes: 10,
            in_channels: 3,
        }
    }
}

/// `depth` convolutions of equal width, each followed by (optional BN and) an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainConfig {
    pub depth: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub activation: ActivationKind,
    pub mode: ParamMode,
    pub batch_norm: bool,
    pub conv_bias: ConvBias,
    /// Global average pool plus dense classifier when set.
    pub classes: Option<usize>,
}

impl PlainConfig {
    pub fn new(depth: usize, width: usize, activation: ActivationKind) -> Self {
        PlainConfig {
            depth,
            width,
            in_channels: 3,
            kernel: 3,
            activation,
            mode: ParamMode::ChannelWise,
            batch_norm: false,
            conv_bias: ConvBias::Never,
            classes: Some(10),
        }
    }
}

struct Builder {
    g: NetworkGraph,
    kind: ActivationKind,
    mode: ParamMode,
    bias: ConvBias,
}

impl Builder {
    fn new(kind: ActivationKind, mode: ParamMode, bias: ConvBias) -> Self {
        Builder {
            g: NetworkGraph::new(),
            kind,
            mode,
            bias,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        input: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bn_follows: bool,
    ) -> Result<usize> {
        let bias = match self.bias {
            ConvBias::Never => false,
            ConvBias::Always => true,
            ConvBias::Auto => !bn_follows,
        };
        let layer = ConvLayer::new(c_in, c_out, k, stride, k / 2, bias)?;
        self.g.push(name, Op::Conv(layer), &[input])
    }

    fn bn(&mut self, name: &str, input: usize, c: usize) -> Result<usize> {
        self.g
            .push(name, Op::BatchNorm(BatchNormLayer::new(c)), &[input])
    }

    fn act(&mut self, name: &str, input: usize, c: usize) -> Result<usize> {
        let layer = ActivationLayer::new(self.kind, self.mode, c);
        self.g.push(name, Op::Activation(layer), &[input])
    }

    fn head(&mut self, input: usize, c: usize, classes: usize) -> Result<usize> {
        let p = self
            .g
            .push("pool", Op::GlobalAvgPool(GlobalAvgPool::new()), &[input])?;
        self.g
            .push("fc", Op::Dense(DenseLayer::new(c, classes)?), &[p])
    }
}

/// Builds a CIFAR residual network (3x32x32 input).
pub fn build_resnet(cfg: &ResNetConfig) -> Result<NetworkGraph> {
    let n = cfg.variant.blocks_per_stage(cfg.depth)?;
    if cfg.classes == 0 {
        return Err(Error::invalid("class count must be positive"));
    }
    let v = cfg.variant;
    let mut b = Builder::new(cfg.activation, cfg.mode, cfg.conv_bias);
    let stem_bn = match v {
        BlockVariant::NonBottleneck | BlockVariant::MpeluNonBottleneck => true,
        _ if v.is_nopre() => cfg.bn_first,
        _ => false,
    };
    let mut x = b.conv("stem.conv", 0, 3, 16, 3, 1, stem_bn)?;
    if stem_bn {
        x = b.bn("stem.bn", x, 16)?;
    }
    if !v.is_bottleneck() || v.is_nopre() {
        x = b.act("stem.act", x, 16)?;
    }
    let mut c_in = 16;
    for stage in 0..3 {
        let w = 16 << stage;
        for blk in 0..n {
            let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
            let p = format!("s{}b{}", stage + 1, blk + 1);
            x = if v.is_bottleneck() {
                bottleneck_block(&mut b, cfg, &p, x, c_in, w, stride)?
            } else {
                basic_block(&mut b, cfg, &p, x, c_in, w, stride)?
            };
            c_in = if v.is_bottleneck() { 4 * w } else { w };
        }
    }
    match v {
        BlockVariant::NonBottleneck | BlockVariant::MpeluNonBottleneck => {}
        _ if v.is_nopre() => {
            if cfg.bn_end {
                x = b.bn("end.bn", x, c_in)?;
            }
            x = b.act("end.act", x, c_in)?;
        }
        _ => {
            x = b.bn("end.bn", x, c_in)?;
            x = b.act("end.act", x, c_in)?;
        }
    }
    b.head(x, c_in, cfg.classes)?;
    Ok(b.g)
}

/// A graph holding a single residual block of `cfg.variant` between its input and output, for
/// unit-level checks. The block maps `c_in` channels to `w` (basic) or `4 * w` (bottleneck).
pub fn build_block(
    cfg: &ResNetConfig,
    c_in: usize,
    w: usize,
    stride: usize,
) -> Result<NetworkGraph> {
    let mut b = Builder::new(cfg.activation, cfg.mode, cfg.conv_bias);
    if cfg.variant.is_bottleneck() {
        bottleneck_block(&mut b, cfg, "block", 0, c_in, w, stride)?;
    } else {
        basic_block(&mut b, cfg, "block", 0, c_in, w, stride)?;
    }
    Ok(b.g)
}

fn shortcut(
    b: &mut Builder,
    cfg: &ResNetConfig,
    p: &str,
    x: usize,
    c_in: usize,
    c_out: usize,
    stride: usize,
    with_bn: bool,
) -> Result<usize> {
    if c_in == c_out && stride == 1 {
        return Ok(x);
    }
    match cfg.shortcut {
        Shortcut::Projection => {
            let s = b.conv(&format!("{p}.proj"), x, c_in, c_out, 1, stride, with_bn)?;
            if with_bn {
                b.bn(&format!("{p}.proj_bn"), s, c_out)
            } else {
                Ok(s)
            }
        }
        Shortcut::ZeroPad => {
            let op = Op::PadShortcut(PadShortcut::new(stride, c_in, c_out)?);
            b.g.push(format!("{p}.pad"), op, &[x])
        }
    }
}

fn basic_block(
    b: &mut Builder,
    cfg: &ResNetConfig,
    p: &str,
    x: usize,
    c_in: usize,
    w: usize,
    stride: usize,
) -> Result<usize> {
    let mut r = b.conv(&format!("{p}.conv1"), x, c_in, w, 3, stride, true)?;
    r = b.bn(&format!("{p}.bn1"), r, w)?;
    r = b.act(&format!("{p}.act1"), r, w)?;
    r = b.conv(&format!("{p}.conv2"), r, w, w, 3, 1, true)?;
    r = b.bn(&format!("{p}.bn2"), r, w)?;
    let s = shortcut(b, cfg, p, x, c_in, w, stride, cfg.projection_bn)?;
    let sum = b.g.push(format!("{p}.add"), Op::Add, &[r, s])?;
    if cfg.variant == BlockVariant::NonBottleneck {
        b.act(&format!("{p}.act_out"), sum, w)
    } else {
        Ok(sum)
    }
}

fn bottleneck_block(
    b: &mut Builder,
    cfg: &ResNetConfig,
    p: &str,
    x: usize,
    c_in: usize,
    w: usize,
    stride: usize,
) -> Result<usize> {
    use BlockVariant::*;
    let v = cfg.variant;
    let out = 4 * w;
    let inner_bn = v != NopreNoBN;
    let mut r = x;
    match v {
        FullPreActBottleneck | MpeluFullPreAct => {
            r = b.bn(&format!("{p}.bn0"), r, c_in)?;
            r = b.act(&format!("{p}.act0"), r, c_in)?;
        }
        MpeluOnlyPreAct | MpeluOnlyPreActWithBN => {
            r = b.act(&format!("{p}.act0"), r, c_in)?;
        }
        _ => {}
    }
    r = b.conv(&format!("{p}.conv1"), r, c_in, w, 1, 1, inner_bn)?;
    if inner_bn {
        r = b.bn(&format!("{p}.bn1"), r, w)?;
    }
    r = b.act(&format!("{p}.act1"), r, w)?;
    r = b.conv(&format!("{p}.conv2"), r, w, w, 3, stride, inner_bn)?;
    if inner_bn {
        r = b.bn(&format!("{p}.bn2"), r, w)?;
    }
    r = b.act(&format!("{p}.act2"), r, w)?;
    let bn_before_add = matches!(v, MpeluOnlyPreActWithBN | NopreWithBNBeforeAdd);
    r = b.conv(&format!("{p}.conv3"), r, w, out, 1, 1, bn_before_add)?;
    if bn_before_add {
        r = b.bn(&format!("{p}.bn3"), r, out)?;
    }
    let s = shortcut(b, cfg, p, x, c_in, out, stride, false)?;
    b.g.push(format!("{p}.add"), Op::Add, &[r, s])
}

/// Network in network: three mlpconv groups (one spatial conv and two 1x1 convs each) separated by
/// pooling, ending in global average pooling over class maps.
pub fn build_nin(cfg: &NinConfig) -> Result<NetworkGraph> {
    if cfg.classes == 0 {
        return Err(Error::invalid("class count must be positive"));
    }
    let bias = if cfg.batch_norm {
        ConvBias::Never
    } else {
        ConvBias::Always
    };
    let mut b = Builder::new(cfg.activation, cfg.mode, bias);
    let groups: [(usize, [usize; 3]); 3] = [
        (5, [192, 160, 96]),
        (5, [192, 192, 192]),
        (3, [192, 192, cfg.classes]),
    ];
    let mut x = 0;
    let mut c_in = cfg.in_channels;
    for (gi, (k, widths)) in groups.iter().enumerate() {
        for (li, &c_out) in widths.iter().enumerate() {
            let last = gi == 2 && li == 2;
            let name = format!("mlp{}.conv{}", gi + 1, li + 1);
            let kernel = if li == 0 { *k } else { 1 };
            x = b.conv(&name, x, c_in, c_out, kernel, 1, cfg.batch_norm && !last)?;
            if !last {
                if cfg.batch_norm {
                    x = b.bn(&format!("mlp{}.bn{}", gi + 1, li + 1), x, c_out)?;
                }
                x = b.act(&format!("mlp{}.act{}", gi + 1, li + 1), x, c_out)?;
            }
            c_in = c_out;
        }
        if gi < 2 {
            let kind = if gi == 0 {
                PoolKind::Max
            } else {
                PoolKind::Average
            };
            x = b.g.push(
                format!("pool{}", gi + 1),
                Op::Pool(PoolLayer::new(kind, 3, 2, 1)?),
                &[x],
            )?;
        }
    }
    b.g.push("pool", Op::GlobalAvgPool(GlobalAvgPool::new()), &[x])?;
    Ok(b.g)
}

pub fn build_plain(cfg: &PlainConfig) -> Result<NetworkGraph> {
    if cfg.depth == 0 || cfg.width == 0 || cfg.in_channels == 0 || cfg.kernel % 2 == 0 {
        return Err(Error::invalid(
            "plain stack needs positive depth/width and an odd kernel",
        ));
    }
    let mut b = Builder::new(cfg.activation, cfg.mode, cfg.conv_bias);
    let mut x = 0;
    let mut c_in = cfg.in_channels;
    for l in 1..=cfg.depth {
        x = b.conv(
            &format!("conv{l}"),
            x,
            c_in,
            cfg.width,
            cfg.kernel,
            1,
            cfg.batch_norm,
        )?;
        if cfg.batch_norm {
            x = b.bn(&format!("bn{l}"), x, cfg.width)?;
        }
        x = b.act(&format!("act{l}"), x, cfg.width)?;
        c_in = cfg.width;
    }
    if let Some(classes) = cfg.classes {
        b.head(x, c_in, classes)?;
    }
    Ok(b.g)
}

/// Sets every activation that directly follows an addition to MPELU(`alpha`, `beta`).
/// Returns how many layers changed; zero means the architecture has no such layer.
pub fn set_identity_mpelu_after_add(
    net: &mut NetworkGraph,
    alpha: f64,
    beta: f64,
) -> Result<usize> {
    let targets = net.post_addition_activations();
    let mut changed = 0;
    for i in targets {
        if let Op::Activation(a) = &mut net.nodes_mut()[i].op {
            if matches!(a.kind, ActivationKind::MPELU { .. }) {
                a.set_mpelu(alpha, beta)?;
                changed += 1;
            }
        }
    }
    if changed == 0 {
        log_warning("no MPELU layer follows an addition; identity initialization skipped");
    }
    Ok(changed)
}

fn log_warning(msg: &str) {
    eprintln!("warning: {msg}");
}

/// Textual architecture description, parseable back with [`FromStr`].
///
/// * `resnet:<variant>:<depth>[:<activation>[:<mode>[:<classes>]]]`
/// * `nin[:<activation>[:<mode>[:<classes>[:bn]]]]`
/// * `plain:<depth>[:<width>[:<activation>[:<mode>[:<classes>]]]]`
///
/// `<mode>` is `channel` or `shared`.
#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    ResNet(ResNetConfig),
    Nin(NinConfig),
    Plain(PlainConfig),
}

impl Architecture {
    pub fn build(&self) -> Result<NetworkGraph> {
        match self {
            Architecture::ResNet(c) => build_resnet(c),
            Architecture::Nin(c) => build_nin(c),
            Architecture::Plain(c) => build_plain(c),
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            Architecture::ResNet(c) => Some(c.classes),
            Architecture::Nin(c) => Some(c.classes),
            Architecture::Plain(c) => c.classes,
        }
    }

    /// Spatial input size the architecture expects during training (NIN trains on 28x28 crops).
    pub fn input_size(&self) -> usize {
        match self {
            Architecture::Nin(_) => 28,
            _ => 32,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Architecture::ResNet(_) => 3,
            Architecture::Nin(c) => c.in_channels,
            Architecture::Plain(c) => c.in_channels,
        }
    }
}

fn mode_name(m: ParamMode) -> &'static str {
    match m {
        ParamMode::ChannelWise => "channel",
        ParamMode::ChannelShared => "shared",
    }
}

fn parse_mode(s: &str) -> Result<ParamMode> {
    match s {
        "channel" => Ok(ParamMode::ChannelWise),
        "shared" => Ok(ParamMode::ChannelShared),
        _ => Err(Error::invalid(format!(
            "unknown parameter mode '{s}' (channel|shared)"
        ))),
    }
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::invalid(format!("{what} must be a non-negative integer, got '{s}'")))
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::ResNet(c) => write!(
                f,
                "resnet:{}:{}:{}:{}:{}",
                c.variant,
                c.depth,
                c.activation,
                mode_name(c.mode),
                c.classes
            ),
            Architecture::Nin(c) => {
                write!(
                    f,
                    "nin:{}:{}:{}",
                    c.activation,
                    mode_name(c.mode),
                    c.classes
                )?;
                if c.batch_norm {
                    f.write_str(":bn")?;
                }
                Ok(())
            }
            Architecture::Plain(c) => write!(
                f,
                "plain:{}:{}:{}:{}:{}",
                c.depth,
                c.width,
                c.activation,
                mode_name(c.mode),
                c.classes.map_or("none".to_string(), |k| k.to_string())
            ),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts[0] {
            "resnet" => {
                if parts.len() < 3 || parts.len() > 6 {
                    return Err(Error::invalid(
                        "expected resnet:<variant>:<depth>[:<activation>[:<mode>[:<classes>]]]",
                    ));
                }
                let variant: BlockVariant = parts[1].parse()?;
                let mut c = ResNetConfig::new(parse_usize(parts[2], "depth")?, variant);
                if let Some(a) = parts.get(3) {
                    c.activation = a.parse()?;
                }
                if let Some(m) = parts.get(4) {
                    c.mode = parse_mode(m)?;
                }
                if let Some(k) = parts.get(5) {
                    c.classes = parse_usize(k, "classes")?;
                }
                Ok(Architecture::ResNet(c))
            }
            "nin" => {
                if parts.len() > 5 {
                    return Err(Error::invalid(
                        "expected nin[:<activation>[:<mode>[:<classes>[:bn]]]]",
                    ));
                }
                let mut c = NinConfig::default();
                if let Some(a) = parts.get(1) {
                    c.activation = a.parse()?;
                }
                if let Some(m) = parts.get(2) {
                    c.mode = parse_mode(m)?;
                }
                if let Some(k) = parts.get(3) {
                    c.classes = parse_usize(k, "classes")?;
                }
                if let Some(flag) = parts.get(4) {
                    if *flag != "bn" {
                        return Err(Error::invalid(format!("unknown nin flag '{flag}'")));
                    }
                    c.batch_norm = true;
                }
                Ok(Architecture::Nin(c))
            }
            "plain" => {
                if parts.len() < 2 || parts.len() > 6 {
                    return Err(Error::invalid(
                        "expected plain:<depth>[:<width>[:<activation>[:<mode>[:<classes>]]]]",
                    ));
                }
                let depth = parse_usize(parts[1], "depth")?;
                let width = parts.get(2).map_or(Ok(16), |w| parse_usize(w, "width"))?;
                let act = parts
                    .get(3)
                    .map_or(Ok(ActivationKind::mpelu(1.0, 1.0)), |a| a.parse())?;
                let mut c = PlainConfig::new(depth, width, act);
                if let Some(m) = parts.get(4) {
                    c.mode = parse_mode(m)?;
                }
                if let Some(k) = parts.get(5) {
                    c.classes = if *k == "none" {
                        None
                    } else {
                        Some(parse_usize(k, "classes")?)
                    };
                }
                Ok(Architecture::Plain(c))
            }
            other => Err(Error::invalid(format!(
                "unknown architecture family '{other}' (resnet, nin, plain)"
            ))),
        }
    }
}
