//! Run configuration: flat UTF-8 `key = value` text with `#` comments.
//!
//! ```text
//! arch = resnet:mpelu-non-bottleneck:20
//! init = taylor
//! lr = 0.1
//! schedule = 81:0.1, 122:0.1
//! epochs = 164
//! data = cifar
//! data_dir = /data/cifar-10-batches-bin
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{train, Checkpoint, RunLog, SgdConfig, TrainOptions, TrainState, Warmup};
use crate::data::{
    load_cifar10, load_cifar10_subset, synthetic_cifar, Augment, Dataset, Preprocessing,
    Preprocessor, ZCA_EPS,
};
use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, Op};
use crate::init::{init_network, lsuv_init, FanMode, InitMethod};
use crate::models::{set_identity_mpelu_after_add, Architecture};
use crate::rng::Rng;

const INIT_STREAM: u64 = 0x494E_4954;
const LSUV_PROBE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// CIFAR-10 binary directory; limits select the first records of each split.
    Cifar {
        dir: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    /// Generated surrogate in the CIFAR-10 layout.
    Synthetic { train: usize, test: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub init: InitMethod,
    pub fan_mode: FanMode,
    pub sgd: SgdConfig,
    pub data: DataSource,
    pub preprocessing: Preprocessing,
    pub augment: bool,
    pub out_dir: Option<PathBuf>,
    pub prefetch: bool,
    /// Worker threads for the convolution kernels; `None` uses the global pool.
    pub threads: Option<usize>,
    pub wall_clock: bool,
    /// Learning-rate and weight-decay multipliers for activation parameters.
    pub act_multipliers: Option<(f64, f64)>,
    pub identity_after_add: Option<(f64, f64)>,
    pub eval_batch: usize,
    pub resume: Option<PathBuf>,
    /// The text the configuration was parsed from, copied next to the run log.
    pub source_text: String,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("`{key}`: cannot parse `{v}`")))
}

fn on_off(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => Err(Error::invalid(format!(
            "`{key}` must be on or off, got `{v}`"
        ))),
    }
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::invalid(format!("`{key}` needs two comma-separated numbers")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn parse_schedule(v: &str) -> Result<Vec<(usize, f64)>> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let (e, f) = item.trim().split_once(':').ok_or_else(|| {
                Error::invalid(format!("schedule entry `{item}` is not epoch:factor"))
            })?;
            Ok((parse("schedule", e.trim())?, parse("schedule", f.trim())?))
        })
        .collect()
}

impl TrainConfig {
    /// Parses configuration text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<TrainConfig> {
        let mut kv = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("line {}: expected `key = value`", no + 1))
            })?;
            let k = k.trim().to_string();
            if kv.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::invalid(format!(
                    "line {}: `{k}` given twice",
                    no + 1
                )));
            }
        }
        let mut take = |k: &str| kv.remove(k);
        let path = |p: String| {
            let p = PathBuf::from(p);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };

        let arch: Architecture = take("arch")
            .ok_or_else(|| Error::invalid("`arch` is required"))?
            .parse()?;
        let mut sgd = SgdConfig::default();
        if let Some(v) = take("lr") {
            sgd.base_lr = parse("lr", &v)?;
        }
        if let Some(v) = take("momentum") {
            sgd.momentum = parse("momentum", &v)?;
        }
        if let Some(v) = take("weight_decay") {
            sgd.weight_decay = parse("weight_decay", &v)?;
        }
        if let Some(v) = take("schedule") {
            sgd.schedule = parse_schedule(&v)?;
        }
        match (take("warmup_lr"), take("warmup_epochs")) {
            (Some(lr), Some(e)) => {
                sgd.warmup = Some(Warmup {
                    lr: parse("warmup_lr", &lr)?,
                    epochs: parse("warmup_epochs", &e)?,
                })
            }
            (None, None) => {}
            _ => {
                return Err(Error::invalid(
                    "`warmup_lr` and `warmup_epochs` go together",
                ))
            }
        }
        if let Some(v) = take("batch_size") {
            sgd.batch_size = parse("batch_size", &v)?;
        }
        if let Some(v) = take("epochs") {
            sgd.epochs = parse("epochs", &v)?;
        }
        if let Some(v) = take("seed") {
            sgd.seed = parse("seed", &v)?;
        }
        sgd.validate()?;

        let limit = |v: Option<String>, key: &str| v.map(|s| parse::<usize>(key, &s)).transpose();
        let train_limit = limit(take("train_limit"), "train_limit")?;
        let test_limit = limit(take("test_limit"), "test_limit")?;
        let data_dir = take("data_dir").map(path);
        let data = match take("data").as_deref().unwrap_or("cifar") {
            "cifar" => DataSource::Cifar {
                dir: data_dir.ok_or_else(|| Error::invalid("`data = cifar` needs `data_dir`"))?,
                train_limit,
                test_limit,
            },
            "synthetic" => DataSource::Synthetic {
                train: train_limit.unwrap_or(5000),
                test: test_limit.unwrap_or(1000),
            },
            other => {
                return Err(Error::invalid(format!(
                    "`data` must be cifar or synthetic, got `{other}`"
                )))
            }
        };
        let mut preprocessing = match take("preproc") {
            Some(v) => v.parse()?,
            None => match arch {
                Architecture::Nin(_) => Preprocessing::GcnZca { eps: ZCA_EPS },
                _ => Preprocessing::Standardize,
            },
        };
        if let Some(v) = take("zca_eps") {
            match &mut preprocessing {
                Preprocessing::GcnZca { eps } => *eps = parse("zca_eps", &v)?,
                _ => {
                    return Err(Error::invalid(
                        "`zca_eps` only applies to `preproc = gcn-zca`",
                    ))
                }
            }
        }

        let cfg = TrainConfig {
            init: match take("init") {
                Some(v) => v.parse()?,
                None => InitMethod::TaylorElu { fixed: None },
            },
            fan_mode: take("fan_mode")
                .map(|v| v.parse())
                .transpose()?
                .unwrap_or_default(),
            sgd,
            data,
            preprocessing,
            augment: take("augment")
                .map(|v| on_off("augment", &v))
                .transpose()?
                .unwrap_or(true),
            out_dir: take("out_dir").map(path),
            prefetch: take("prefetch")
                .map(|v| on_off("prefetch", &v))
                .transpose()?
                .unwrap_or(false),
            threads: limit(take("threads"), "threads")?,
            wall_clock: take("wall_clock")
                .map(|v| on_off("wall_clock", &v))
                .transpose()?
                .unwrap_or(false),
            act_multipliers: match (take("act_lr_mult"), take("act_wd_mult")) {
                (None, None) => None,
                (lr, wd) => Some((
                    lr.map_or(Ok(crate::activation::DEFAULT_PARAM_LR_MULT), |v| {
                        parse("act_lr_mult", &v)
                    })?,
                    wd.map_or(Ok(1.0), |v| parse("act_wd_mult", &v))?,
                )),
            },
            identity_after_add: take("identity_after_add")
                .map(|v| pair("identity_after_add", &v))
                .transpose()?,
            eval_batch: limit(take("eval_batch"), "eval_batch")?.unwrap_or(500),
            resume: take("resume").map(path),
            source_text: text.to_string(),
            arch,
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::invalid(format!("unknown configuration key `{k}`")));
        }
        if cfg.threads == Some(0) || cfg.eval_batch == 0 {
            return Err(Error::invalid(
                "`threads` and `eval_batch` must be positive",
            ));
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        TrainConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Cifar {
                dir,
                train_limit: None,
                test_limit: None,
            } => load_cifar10(dir),
            DataSource::Cifar {
                dir,
                train_limit,
                test_limit,
            } => load_cifar10_subset(
                dir,
                train_limit.unwrap_or(usize::MAX),
                test_limit.unwrap_or(usize::MAX),
            ),
            DataSource::Synthetic { train, test } => Ok((
                synthetic_cifar(*train, self.sgd.seed, 0)?,
                synthetic_cifar(*test, self.sgd.seed, 1)?,
            )),
        }
    }

    fn augmentation(&self) -> Option<Augment> {
        if !self.augment {
            return None;
        }
        Some(match self.arch {
            Architecture::Nin(_) => Augment::NIN,
            _ => Augment::RESNET,
        })
    }
}

/// Result of [`run`].
#[derive(Debug)]
pub struct RunOutcome {
    pub log: RunLog,
    pub net: NetworkGraph,
    pub state: TrainState,
}

fn prepare(cfg: &TrainConfig, train_set: &Dataset) -> Result<NetworkGraph> {
    let mut net = cfg.arch.build()?;
    let mut rng = Rng::new(cfg.sgd.seed).derive(INIT_STREAM);
    init_network(&mut net, &cfg.init, cfg.fan_mode, &mut rng)?;
    if let InitMethod::Lsuv { tol, max_iter } = cfg.init {
        let n = train_set.len().min(LSUV_PROBE);
        let idx: Vec<usize> = (0..n).collect();
        let (probe, _) = train_set.batch(&idx)?;
        let probe = crate::data::center_crop(&probe, cfg.arch.input_size())?;
        lsuv_init(&mut net, &probe, tol, max_iter)?;
    }
    if let Some((a, b)) = cfg.identity_after_add {
        set_identity_mpelu_after_add(&mut net, a, b)?;
    }
    if let Some((lr, wd)) = cfg.act_multipliers {
        for node in net.nodes_mut() {
            if let Op::Activation(act) = &mut node.op {
                act.set_multipliers(lr, wd);
            }
        }
    }
    Ok(net)
}

/// Loads and preprocesses the data, builds and initializes the network (or restores it from
/// `resume`), and trains it.
pub fn run(cfg: &TrainConfig) -> Result<RunOutcome> {
    let (mut train_set, mut test_set) = cfg.load_data()?;
    if cfg.arch.classes() != Some(train_set.classes) {
        return Err(Error::invalid(format!(
            "architecture has {:?} outputs, data has {} classes",
            cfg.arch.classes(),
            train_set.classes
        )));
    }
    let arch = cfg.arch.to_string();
    let resume = cfg.resume.as_ref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        if ck.arch != arch {
            return Err(Error::Schema(format!(
                "checkpoint is for `{}`, configuration asks for `{arch}`",
                ck.arch
            )));
        }
    }
    let pre = match &resume {
        Some(ck) => ck.preprocessor.clone(),
        None => Preprocessor::fit(cfg.preprocessing, &train_set)?,
    };
    pre.apply(&mut train_set)?;
    pre.apply(&mut test_set)?;

    let mut net = prepare(cfg, &train_set)?;
    let mut state = TrainState::new(&net, cfg.sgd.clone(), pre)?;
    if let Some(ck) = &resume {
        state.resume(ck, &mut net)?;
    }
    let opts = TrainOptions {
        sgd: cfg.sgd.clone(),
        augment: cfg.augmentation(),
        input_size: cfg.arch.input_size(),
        eval_batch: cfg.eval_batch,
        prefetch: cfg.prefetch,
        out_dir: cfg.out_dir.clone(),
        arch,
        wall_clock: cfg.wall_clock,
    };
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run_config.txt"), &cfg.source_text)?;
    }
    let log = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(|| train(&mut net, &mut state, &train_set, &test_set, &opts))?,
        None => train(&mut net, &mut state, &train_set, &test_set, &opts)?,
    };
    Ok(RunOutcome { log, net, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let text = "# smoke\narch = resnet:mpelu-non-bottleneck:20\nlr = 0.05 # trailing\nschedule = 3:0.1, 4:0.5\n\
                    epochs = 5\nbatch_size = 64\ndata = synthetic\ntrain_limit = 100\ntest_limit = 20\n\
                    out_dir = runs/a\naugment = off\nwarmup_lr = 0.01\nwarmup_epochs = 1\n";
        let c = TrainConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.sgd.base_lr, 0.05);
        assert_eq!(c.sgd.schedule, vec![(3, 0.1), (4, 0.5)]);
        assert_eq!(
            c.sgd.warmup,
            Some(Warmup {
                lr: 0.01,
                epochs: 1
            })
        );
        assert_eq!(
            c.data,
            DataSource::Synthetic {
                train: 100,
                test: 20
            }
        );
        assert_eq!(c.out_dir, Some(PathBuf::from("/base/runs/a")));
        assert_eq!(c.preprocessing, Preprocessing::Standardize);
        assert!(!c.augment);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "lr = 0.1",
            "arch = nin\nbogus = 1",
            "arch = nin\nlr = 0.1\nlr = 0.2",
            "arch = nin\nlr = -1",
            "arch = nin\nschedule = 5:0.1, 3:0.1",
            "arch = nin\ndata = cifar",
            "arch = nin\nwarmup_lr = 0.01",
            "arch = nin\naugment = maybe",
            "arch = resnet:nopre:20\npreproc = standardize\nzca_eps = 0.2",
        ] {
            assert!(
                matches!(
                    TrainConfig::parse(text, Path::new(".")),
                    Err(Error::InvalidArgument(_))
                ),
                "{text}"
            );
        }
    }

    #[test]
    fn nin_defaults_to_gcn_zca() {
        let c = TrainConfig::parse(
            "arch = nin\ndata = synthetic\nzca_eps = 0.5",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(c.preprocessing, Preprocessing::GcnZca { eps: 0.5 });
        assert_eq!(c.augmentation(), Some(Augment::NIN));
    }
}
