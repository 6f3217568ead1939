//! Mini-batch SGD training, evaluation, checkpoints and run configuration.

mod checkpoint;
mod config;
mod sgd;

pub use checkpoint::{Checkpoint, TensorKind};
pub use config::{run, DataSource, RunOutcome, TrainConfig};
pub use sgd::{sgd_step, ParamGroup, Sgd, SgdConfig, Warmup};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use crate::data::{augment, center_crop, Augment, Dataset, Preprocessor};
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::layers::softmax_cross_entropy;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Losses above this abort training as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub const HEADER: &'static str = "epoch,lr,train_loss,train_err,test_err,wall_seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.lr, r.train_loss, r.train_err, r.test_err, r.wall_seconds
            );
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Mean cross-entropy and top-1 error of `net` on `data`, in inference mode, with a single
/// central view when the images are larger than `input_size`.
pub fn evaluate(
    net: &mut NetworkGraph,
    data: &Dataset,
    input_size: usize,
    batch: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    net.set_training(false);
    let result = (|| {
        let mut loss = 0.0;
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let (x, y) = data.batch(chunk)?;
            let x = center_crop(&x, input_size)?;
            let out = softmax_cross_entropy(&net.infer(&x)?, &y)?;
            loss += out.loss * chunk.len() as f64;
            correct += out.correct;
        }
        Ok((
            loss / data.len() as f64,
            1.0 - correct as f64 / data.len() as f64,
        ))
    })();
    net.set_training(true);
    result
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub sgd: SgdConfig,
    /// `None` trains on central crops.
    pub augment: Option<Augment>,
    pub input_size: usize,
    pub eval_batch: usize,
    /// Prepare batches on a second thread (bounded queue of two batches).
    pub prefetch: bool,
    /// Where checkpoints and the run log go.
    pub out_dir: Option<PathBuf>,
    /// Architecture string stored in checkpoints.
    pub arch: String,
    /// Record elapsed time; when off the column is 0 so logs are byte-reproducible.
    pub wall_clock: bool,
}

impl TrainOptions {
    pub fn new(sgd: SgdConfig, arch: impl Into<String>) -> Self {
        TrainOptions {
            sgd,
            augment: Some(Augment::RESNET),
            input_size: 32,
            eval_batch: 500,
            prefetch: false,
            out_dir: None,
            arch: arch.into(),
            wall_clock: false,
        }
    }
}

/// Everything that evolves during training besides the network.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Shuffling stream; augmentation streams are derived per epoch from its seed.
    pub rng: Rng,
    pub sgd: Sgd,
    pub preprocessor: Preprocessor,
}

impl TrainState {
    pub fn new(net: &NetworkGraph, sgd: SgdConfig, preprocessor: Preprocessor) -> Result<Self> {
        let rng = Rng::new(sgd.seed).derive(SHUFFLE_STREAM);
        Ok(TrainState {
            epoch: 0,
            rng,
            sgd: Sgd::new(sgd, net)?,
            preprocessor,
        })
    }

    pub fn checkpoint(&self, arch: &str, net: &NetworkGraph) -> Checkpoint {
        Checkpoint::capture(
            arch,
            self.epoch,
            &self.rng,
            net,
            &self.sgd,
            &self.preprocessor,
        )
    }

    /// Restores the network and optimizer from `ck`, continuing after its epoch.
    pub fn resume(&mut self, ck: &Checkpoint, net: &mut NetworkGraph) -> Result<()> {
        ck.restore(net, Some(&mut self.sgd))?;
        self.epoch = ck.epoch;
        self.rng = Rng::from_state(ck.rng);
        self.preprocessor = ck.preprocessor.clone();
        Ok(())
    }
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_4700;

type Batch = Result<(Tensor, Vec<usize>)>;

fn make_batches(
    data: &Dataset,
    order: &[usize],
    batch: usize,
    aug: Option<Augment>,
    input_size: usize,
    mut rng: Rng,
    mut emit: impl FnMut(Batch) -> bool,
) {
    for chunk in order.chunks(batch) {
        // batch statistics need two samples
        if chunk.len() < 2 {
            break;
        }
        let b = data.batch(chunk).and_then(|(x, y)| {
            let x = match aug {
                Some(a) => augment(&x, &a, &mut rng)?,
                None => center_crop(&x, input_size)?,
            };
            Ok((x, y))
        });
        let failed = b.is_err();
        if !emit(b) || failed {
            break;
        }
    }
}

fn train_epoch(
    net: &mut NetworkGraph,
    state: &mut TrainState,
    data: &Dataset,
    opts: &TrainOptions,
    epoch: usize,
    lr: f64,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    state.rng.shuffle(&mut order);
    let aug_rng = Rng::new(state.sgd.config.seed).derive(AUGMENT_STREAM + epoch as u64);
    let batch = state.sgd.config.batch_size;
    let (mut loss_sum, mut wrong, mut seen) = (0.0, 0usize, 0usize);
    let mut iteration = 0usize;
    let mut step = |b: Batch, net: &mut NetworkGraph, sgd: &mut Sgd| -> Result<()> {
        let (x, y) = b?;
        iteration += 1;
        net.zero_grad();
        let logits = net.forward(&x)?;
        let out = softmax_cross_entropy(&logits, &y)?;
        if !out.loss.is_finite() || out.loss > DIVERGENCE_LOSS {
            net.clear_caches();
            return Err(Error::Divergence {
                epoch,
                iteration,
                reason: format!("loss {}", out.loss),
            });
        }
        net.backward(&out.grad)?;
        net.clear_caches();
        sgd.step(net, lr, epoch, iteration)?;
        loss_sum += out.loss * y.len() as f64;
        wrong += y.len() - out.correct;
        seen += y.len();
        Ok(())
    };
    if opts.prefetch {
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = sync_channel::<Batch>(2);
            let order = &order;
            s.spawn(move || {
                make_batches(
                    data,
                    order,
                    batch,
                    opts.augment,
                    opts.input_size,
                    aug_rng,
                    |b| tx.send(b).is_ok(),
                );
            });
            for b in rx {
                step(b, net, &mut state.sgd)?;
            }
            Ok(())
        })?;
    } else {
        let mut result = Ok(());
        make_batches(
            data,
            &order,
            batch,
            opts.augment,
            opts.input_size,
            aug_rng,
            |b| {
                result = step(b, net, &mut state.sgd);
                result.is_ok()
            },
        );
        result?;
    }
    if seen == 0 {
        return Err(Error::invalid(
            "training set yields no batch of at least two samples",
        ));
    }
    Ok((loss_sum / seen as f64, wrong as f64 / seen as f64))
}

fn save_checkpoint(
    state: &TrainState,
    opts: &TrainOptions,
    net: &NetworkGraph,
    name: &str,
) -> Result<()> {
    if let Some(dir) = &opts.out_dir {
        state.checkpoint(&opts.arch, net).save(dir.join(name))?;
    }
    Ok(())
}

/// Runs epochs `state.epoch + 1 ..= sgd.epochs`. A fresh state first logs the evaluation of
/// the untrained network as epoch 0. With an output directory, checkpoints are written
/// whenever the learning rate is about to change and after the last epoch, and the run log
/// is rewritten after every epoch (also when training diverges).
pub fn train(
    net: &mut NetworkGraph,
    state: &mut TrainState,
    train_set: &Dataset,
    test_set: &Dataset,
    opts: &TrainOptions,
) -> Result<RunLog> {
    state.sgd.config.validate()?;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let start = Instant::now();
    let clock = |t: &Instant| {
        if opts.wall_clock {
            t.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let mut log = RunLog::default();
    let write_log = |log: &RunLog| -> Result<()> {
        match &opts.out_dir {
            Some(dir) => log.write(dir.join("run_log.csv")),
            None => Ok(()),
        }
    };
    net.set_training(true);
    if state.epoch == 0 {
        let (train_loss, train_err) = evaluate(net, train_set, opts.input_size, opts.eval_batch)?;
        let (_, test_err) = evaluate(net, test_set, opts.input_size, opts.eval_batch)?;
        log.records.push(EpochRecord {
            epoch: 0,
            lr: state.sgd.config.lr_at(0),
            train_loss,
            train_err,
            test_err,
            wall_seconds: clock(&start),
        });
        write_log(&log)?;
    }
    while state.epoch < state.sgd.config.epochs {
        let e = state.epoch;
        let lr = state.sgd.config.lr_at(e);
        let (train_loss, train_err) = match train_epoch(net, state, train_set, opts, e + 1, lr) {
            Ok(v) => v,
            Err(err) => {
                write_log(&log)?;
                return Err(err);
            }
        };
        let (_, test_err) = evaluate(net, test_set, opts.input_size, opts.eval_batch)?;
        state.epoch = e + 1;
        log.records.push(EpochRecord {
            epoch: e + 1,
            lr,
            train_loss,
            train_err,
            test_err,
            wall_seconds: clock(&start),
        });
        write_log(&log)?;
        if state.epoch == state.sgd.config.epochs {
            save_checkpoint(state, opts, net, "final.ckpt")?;
        } else if state.sgd.config.is_boundary(state.epoch) {
            save_checkpoint(state, opts, net, &format!("epoch_{}.ckpt", state.epoch))?;
        }
    }
    if state.sgd.config.epochs == 0 {
        save_checkpoint(state, opts, net, "final.ckpt")?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::init::{init_network, FanMode, InitMethod};
    use crate::models::{build_plain, PlainConfig};

    fn toy() -> (NetworkGraph, Dataset) {
        let mut cfg = PlainConfig::new(1, 4, ActivationKind::ReLU);
        cfg.in_channels = 1;
        cfg.batch_norm = true;
        cfg.classes = Some(2);
        let mut net = build_plain(&cfg).unwrap();
        init_network(
            &mut net,
            &InitMethod::Msra { slope: 0.0 },
            FanMode::FanIn,
            &mut Rng::new(1),
        )
        .unwrap();
        let mut rng = Rng::new(2);
        let n = 16;
        let mut imgs = Tensor::zeros([n, 1, 4, 4]);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for (i, img) in imgs.data_mut().chunks_exact_mut(16).enumerate() {
            for v in img {
                *v = if labels[i] == 1 { 1.0 } else { -1.0 } + 0.1 * rng.normal();
            }
        }
        (net, Dataset::new(imgs, labels, 2, "toy").unwrap())
    }

    fn opts(epochs: usize) -> TrainOptions {
        let sgd = SgdConfig {
            base_lr: 0.05,
            schedule: vec![(2, 0.1)],
            batch_size: 4,
            epochs,
            seed: 3,
            ..SgdConfig::default()
        };
        TrainOptions {
            augment: None,
            input_size: 4,
            ..TrainOptions::new(sgd, "toy")
        }
    }

    #[test]
    fn zero_epochs_logs_initial_evaluation_only() {
        let (mut net, data) = toy();
        let before = net
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect::<Vec<_>>();
        let o = opts(0);
        let mut st = TrainState::new(&net, o.sgd.clone(), Preprocessor::Identity).unwrap();
        let log = train(&mut net, &mut st, &data, &data, &o).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].epoch, 0);
        let after = net
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect::<Vec<_>>();
        assert_eq!(before, after);
    }

    #[test]
    fn separable_toy_is_memorized_and_reproducible() {
        let run = |prefetch: bool| {
            let (mut net, data) = toy();
            let o = TrainOptions {
                prefetch,
                ..opts(4)
            };
            let mut st = TrainState::new(&net, o.sgd.clone(), Preprocessor::Identity).unwrap();
            let log = train(&mut net, &mut st, &data, &data, &o).unwrap();
            (log, net)
        };
        let (a, mut net) = run(false);
        let (b, _) = run(true);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.records.len(), 5);
        assert!((a.records[3].lr - 0.005).abs() < 1e-15);
        let (_, data) = toy();
        let (_, err) = evaluate(&mut net, &data, 4, 5).unwrap();
        assert_eq!(err, 0.0);
        assert_eq!(evaluate(&mut net, &data, 4, 3).unwrap().1, err);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut net, data) = toy();
        let mut o = opts(2);
        o.sgd.base_lr = 1e30;
        let mut st = TrainState::new(&net, o.sgd.clone(), Preprocessor::Identity).unwrap();
        let err = train(&mut net, &mut st, &data, &data, &o).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn resumed_run_matches_unbroken_run() {
        let dir = tempfile::tempdir().unwrap();
        let (mut net, data) = toy();
        let mut o = opts(4);
        o.out_dir = Some(dir.path().to_path_buf());
        let mut st = TrainState::new(&net, o.sgd.clone(), Preprocessor::Identity).unwrap();
        let full = train(&mut net, &mut st, &data, &data, &o).unwrap();

        let ck = Checkpoint::load(dir.path().join("epoch_2.ckpt")).unwrap();
        let (mut net2, _) = toy();
        let mut st2 = TrainState::new(&net2, o.sgd.clone(), Preprocessor::Identity).unwrap();
        st2.resume(&ck, &mut net2).unwrap();
        let o2 = TrainOptions { out_dir: None, ..o };
        let rest = train(&mut net2, &mut st2, &data, &data, &o2).unwrap();
        assert_eq!(rest.records, full.records[3..]);
        assert_eq!(net2.params(), net.params());
    }
}
