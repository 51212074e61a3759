//! `mdfce`: generate datasets, train the extrapolator and evaluate it
//! against the LS baseline.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mdfce_core::channel::{generate_dataset, read_dataset, write_dataset, SystemConfig};
use mdfce_core::net::{load_checkpoint, save_checkpoint, Dims, MdfceModel, NormStats, Variant};
use mdfce_core::train::{evaluate, fit_norm_stats, train, Density, Method};
use mdfce_core::{par, Error};

use config::RunConfig;

const TRAIN_FILE: &str = "train.mdfc";
const VAL_FILE: &str = "val.mdfc";

#[derive(Parser, Debug)]
#[command(name = "mdfce", version, about = "Sub-6 GHz to mmWave channel extrapolation")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Run every parallel section sequentially.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (toml). Defaults to the desk setup.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write training and validation datasets.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Base seed; overrides `data.seed`.
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
        /// Training sample count; overrides `data.train_count`.
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Train a model on `<data>/train.mdfc` and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory produced by `generate`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Training seed; overrides `train.seed`.
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
        /// Train the ablation without the delay-domain module.
        #[arg(long)]
        no_tfem: bool,
    },
    /// Evaluate a checkpoint and LS baselines on `<data>/val.mdfc`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint directory; omit for a baseline-only run.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated SNR points in dB (`inf` allowed); overrides `run.snr_db`.
        #[arg(long, value_name = "LIST", value_delimiter = ',', num_args = 1..)]
        snr: Option<Vec<f64>>,
        /// LS pilot density such as `1/4`; repeatable, overrides `pilots.ls_densities`.
        #[arg(long, value_name = "RATIONAL")]
        pd: Vec<Density>,
        /// Noise seed; overrides `run.eval_seed`.
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        par::init_threads(n);
    }
    par::set_sequential(cli.deterministic);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Generate { common, seed, count } => cmd_generate(&common, seed, count),
        Command::Train {
            common,
            data,
            seed,
            no_tfem,
        } => cmd_train(&common, &data, seed, no_tfem),
        Command::Eval {
            common,
            data,
            checkpoint,
            snr,
            pd,
            seed,
        } => cmd_eval(&common, &data, checkpoint.as_deref(), snr, pd, seed),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn cmd_generate(common: &Common, seed: Option<u64>, count: Option<usize>) -> CliResult<()> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    if let Some(n) = count {
        if n == 0 {
            return Err(Failure::Usage("--count must be >= 1".into()));
        }
        cfg.data.train_count = n;
    }
    create_dir(&common.out)?;
    let sys = &cfg.system;
    let (n_train, n_val) = (cfg.data.train_count, cfg.data.val_count);
    // Validation seeds continue where the training seeds stop.
    let train_set = generate_dataset(sys, cfg.data.seed, n_train);
    let val_set = generate_dataset(sys, cfg.data.seed.wrapping_add(n_train as u64), n_val);
    write_dataset(&common.out.join(TRAIN_FILE), sys, &train_set)?;
    write_dataset(&common.out.join(VAL_FILE), sys, &val_set)?;
    write_file(&common.out.join("config.toml"), cfg.to_text().as_bytes())?;
    println!(
        "wrote {n_train} training and {n_val} validation samples to {} (system {})",
        common.out.display(),
        sys.fingerprint()
    );
    Ok(())
}

/// Errors unless `found` (read from `what`) matches the configured system.
fn check_system(expected: &SystemConfig, found: &SystemConfig, what: &str) -> CliResult<()> {
    if expected != found {
        return Err(Error::Config(format!(
            "{what} was made for system {} but the configuration describes system {}",
            found.fingerprint(),
            expected.fingerprint()
        ))
        .into());
    }
    Ok(())
}

fn cmd_train(common: &Common, data: &Path, seed: Option<u64>, no_tfem: bool) -> CliResult<()> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let (data_sys, samples) = read_dataset(&data.join(TRAIN_FILE))?;
    check_system(&cfg.system, &data_sys, "the training set")?;

    let variant = if no_tfem { Variant::NoTfem } else { Variant::Full };
    let dims = Dims::new(&cfg.system);
    let identity = NormStats::identity(dims.tokens_in * dims.feat_in, dims.tokens_out * dims.feat_out);
    let mut model = MdfceModel::new(cfg.model.clone(), cfg.system.clone(), variant, identity, cfg.train.seed)?;
    model.set_norm(fit_norm_stats(&model, &samples, cfg.train.input_density)?)?;

    create_dir(&common.out)?;
    let start = Instant::now();
    let history = train(&mut model, &samples, &cfg.train, |r| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  nmse {:>8.3} dB  aux {:.4}  lr {:.2e}",
            r.epoch,
            r.total_loss,
            10.0 * r.nmse_loss.log10(),
            r.aux_loss,
            r.lr
        );
    })?;
    let mut csv = Vec::new();
    history.write_csv(&mut csv)?;
    write_file(&common.out.join("history.csv"), &csv)?;
    let ckpt = common.out.join("checkpoint");
    save_checkpoint(&ckpt, &model)?;
    eprintln!("trained {} in {:.1} s", variant.tag(), start.elapsed().as_secs_f64());
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn cmd_eval(
    common: &Common,
    data: &Path,
    checkpoint: Option<&Path>,
    snr: Option<Vec<f64>>,
    pd: Vec<Density>,
    seed: Option<u64>,
) -> CliResult<()> {
    let cfg = RunConfig::load_or_default(common.config.as_deref())?;
    let snrs = snr.unwrap_or_else(|| cfg.run.snr_db.clone());
    if snrs.is_empty() {
        return Err(Failure::Usage("the SNR list is empty".into()));
    }
    if snrs.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
        return Err(Failure::Usage("SNR values must be numbers or inf".into()));
    }
    let densities = if pd.is_empty() { cfg.pilots.ls_densities.clone() } else { pd };
    if checkpoint.is_none() && densities.is_empty() {
        return Err(Failure::Usage("nothing to evaluate: give --checkpoint or --pd".into()));
    }

    let (data_sys, samples) = read_dataset(&data.join(VAL_FILE))?;
    check_system(&cfg.system, &data_sys, "the validation set")?;
    let model = checkpoint.map(load_checkpoint).transpose()?;

    let mut methods = Vec::new();
    if let Some(m) = &model {
        check_system(&data_sys, m.system(), "the checkpoint")?;
        let name = match m.variant() {
            Variant::Full => "mdfce".to_string(),
            v => format!("mdfce-{}", v.tag()),
        };
        methods.push(Method::Mdfce {
            name,
            model: m,
            input_density: cfg.train.input_density,
        });
    }
    methods.extend(densities.into_iter().map(|density| Method::Ls { density }));

    let report = evaluate(&data_sys, &methods, &samples, &snrs, seed.unwrap_or(cfg.run.eval_seed))?;
    create_dir(&common.out)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&common.out.join("eval.csv"), &csv)?;
    print!("{}", report.to_table());
    Ok(())
}
