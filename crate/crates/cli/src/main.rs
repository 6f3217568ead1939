use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpelu::analysis::{
    init_trajectory, residual_histogram_sampled, write_init_trace_csv, write_residual_csv,
};
use mpelu::data::{read_cifar_records, CIFAR_TEST_FILE};
use mpelu::train::{evaluate, run, Checkpoint, TrainConfig};
use mpelu::{
    grad_check_where, init_network, lsuv_init, signal_stats, Architecture, Error, FanMode,
    GradCheckConfig, InitMethod, LossHead, Op, Rng, StatsTarget, Tensor,
};

#[derive(Parser)]
#[command(name = "mpelu", version, about = "Train and analyse MPELU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network described by a run-configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Single-view test error of a checkpoint on a CIFAR-10 test file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Evaluate only the first N test records.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 500)]
        batch: usize,
    },
    /// Initialize a network and write per-layer std and activation moments on a Gaussian probe.
    AnalyzeInit {
        #[arg(long)]
        arch: String,
        /// gaussian[=std] | xavier | msra[=slope] | taylor[=alpha,beta] | lsuv[=tol,iters]
        #[arg(long)]
        init: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "in")]
        fan_mode: String,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the activation statistics block here.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Fractions of standard-normal inputs whose Taylor residual falls below each threshold.
    Residuals {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.5,2,4.5")]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every parameter gradient (or those of one layer).
    Gradcheck {
        #[arg(long)]
        arch: String,
        /// Only check tensors of the layer with this name.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Spatial input size; defaults to the architecture's training size.
        #[arg(long)]
        size: Option<usize>,
        /// Coordinates sampled per tensor.
        #[arg(long, default_value_t = 20)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Exit with a validation error when the worst relative error exceeds this.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Count learnable parameters.
    Params {
        #[arg(long)]
        arch: String,
        /// Print one line per node (index, name, type, inputs, config, parameters) first.
        #[arg(long)]
        dump: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 2,
        Error::Io(_) | Error::Format { .. } | Error::Csv(_) => 3,
        _ => 1,
    }
}

fn create(path: &PathBuf) -> mpelu::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn gaussian(shape: [usize; 4], rng: &mut Rng) -> mpelu::Result<Tensor> {
    let mut t = Tensor::zeros(shape);
    t.gaussian_fill(0.0, 1.0, rng)?;
    Ok(t)
}

fn train_cmd(config: PathBuf) -> mpelu::Result<()> {
    let cfg = TrainConfig::from_file(&config)?;
    let outcome = run(&cfg)?;
    let mut out = io::stdout().lock();
    write!(out, "{}", outcome.log.to_csv())?;
    Ok(())
}

fn eval_cmd(
    checkpoint: PathBuf,
    data_dir: PathBuf,
    limit: Option<usize>,
    batch: usize,
) -> mpelu::Result<()> {
    let ck = Checkpoint::load(&checkpoint)?;
    let arch: Architecture = ck.arch.parse()?;
    let mut net = arch.build()?;
    ck.restore(&mut net, None)?;
    let mut test = read_cifar_records(data_dir.join(CIFAR_TEST_FILE), limit)?;
    ck.preprocessor.apply(&mut test)?;
    let (loss, err) = evaluate(&mut net, &test, arch.input_size(), batch)?;
    println!("checkpoint {} (epoch {})", checkpoint.display(), ck.epoch);
    println!("samples {}", test.len());
    println!("loss {loss}");
    println!("top1_error {err}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn analyze_init_cmd(
    arch: String,
    init: String,
    out: PathBuf,
    fan_mode: String,
    batch: usize,
    seed: u64,
    stats: Option<PathBuf>,
) -> mpelu::Result<()> {
    let arch: Architecture = arch.parse()?;
    let method: InitMethod = init.parse()?;
    let mode: FanMode = fan_mode.parse()?;
    let mut net = arch.build()?;
    let rng = Rng::new(seed);
    let log = init_network(&mut net, &method, mode, &mut rng.derive(1))?;
    let s = arch.input_size();
    let probe = gaussian([batch, arch.in_channels(), s, s], &mut rng.derive(2))?;
    if let InitMethod::Lsuv { tol, max_iter } = method {
        lsuv_init(&mut net, &probe, tol, max_iter)?;
    }
    net.set_training(false);
    let rows = init_trajectory(&net, &log, &probe)?;
    let mut w = create(&out)?;
    write_init_trace_csv(&rows, &mut w)?;
    w.flush()?;
    if let Some(path) = stats {
        let report = signal_stats(&net, &probe, StatsTarget::Activations)?;
        let mut w = create(&path)?;
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    println!("{} layers written to {}", rows.len(), out.display());
    Ok(())
}

fn residuals_cmd(
    alpha: f64,
    beta: f64,
    samples: usize,
    out: PathBuf,
    thresholds: Vec<f64>,
    seed: u64,
) -> mpelu::Result<()> {
    let bins = residual_histogram_sampled(samples, &mut Rng::new(seed), alpha, beta, &thresholds)?;
    let mut w = create(&out)?;
    write_residual_csv(&bins, &mut w)?;
    w.flush()?;
    write_residual_csv(&bins, io::stdout().lock())
}

#[allow(clippy::too_many_arguments)]
fn gradcheck_cmd(
    arch: String,
    layer: Option<String>,
    batch: usize,
    size: Option<usize>,
    coords: usize,
    eps: f64,
    tol: f64,
    seed: u64,
) -> mpelu::Result<()> {
    let arch: Architecture = arch.parse()?;
    let mut net = arch.build()?;
    if let Some(name) = &layer {
        if net.find(name).is_none() {
            return Err(Error::InvalidArgument(format!("no layer named `{name}`")));
        }
    }
    let rng = Rng::new(seed);
    init_network(
        &mut net,
        &InitMethod::TaylorElu { fixed: None },
        FanMode::FanIn,
        &mut rng.derive(1),
    )?;
    let s = size.unwrap_or(arch.input_size());
    let x = gaussian([batch, arch.in_channels(), s, s], &mut rng.derive(2))?;
    let shape = net.check_shapes(x.shape())?.swap_remove(net.output());
    let head = LossHead::random_projection(&shape, &mut rng.derive(3))?;
    let cfg = GradCheckConfig {
        eps,
        max_coords: coords,
        seed,
        check_input: layer.is_none(),
        ..GradCheckConfig::default()
    };
    let prefix = layer.map(|l| format!("{l}."));
    let report = grad_check_where(&mut net, &x, &head, &cfg, |name| {
        prefix.as_deref().is_none_or(|p| name.starts_with(p))
    })?;
    print!("{}", report.table());
    let worst = report.max_rel_error();
    println!("max relative error {worst:.3e}");
    if report.records.is_empty() {
        return Err(Error::InvalidArgument(
            "no parameter tensors selected".into(),
        ));
    }
    if worst > tol {
        return Err(Error::Numeric(format!(
            "gradient check failed: {worst:.3e} exceeds {tol:.1e}"
        )));
    }
    Ok(())
}

fn params_cmd(arch: String, dump: bool) -> mpelu::Result<()> {
    let arch: Architecture = arch.parse()?;
    let net = arch.build()?;
    if dump {
        print!("{}", net.dump());
    }
    let activation: usize = net
        .nodes()
        .iter()
        .filter_map(|n| match &n.op {
            Op::Activation(a) => Some(a.params().iter().map(|(_, p)| p.value.len()).sum::<usize>()),
            _ => None,
        })
        .sum();
    let total = net.count_params();
    println!("architecture {arch}");
    println!("parameters {total}");
    println!("activation_parameters {activation}");
    println!("millions {:.3}", total as f64 / 1e6);
    Ok(())
}

fn dispatch(cmd: Command) -> mpelu::Result<()> {
    match cmd {
        Command::Train { config } => train_cmd(config),
        Command::Eval {
            checkpoint,
            data_dir,
            limit,
            batch,
        } => eval_cmd(checkpoint, data_dir, limit, batch),
        Command::AnalyzeInit {
            arch,
            init,
            out,
            fan_mode,
            batch,
            seed,
            stats,
        } => analyze_init_cmd(arch, init, out, fan_mode, batch, seed, stats),
        Command::Residuals {
            alpha,
            beta,
            samples,
            out,
            thresholds,
            seed,
        } => residuals_cmd(alpha, beta, samples, out, thresholds, seed),
        Command::Gradcheck {
            arch,
            layer,
            batch,
            size,
            coords,
            eps,
            tol,
            seed,
        } => gradcheck_cmd(arch, layer, batch, size, coords, eps, tol, seed),
        Command::Params { arch, dump } => params_cmd(arch, dump),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
