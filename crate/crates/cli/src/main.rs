//! `medflip` command-line entry point.
//!
//! Results go to stdout as JSON; logs go to stderr (verbosity from
//! `MEDFLIP_LOG`, default `info`). Any `--section.key value` flag is a
//! dotted override of the run configuration. Exit codes: 0 success, 1
//! configuration/domain/usage error, 2 I/O error.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use medflip::ablate::{self, Axis};
use medflip::checkpoint::Checkpoint;
use medflip::data::{self, Split};
use medflip::{eval, gradcheck, train, Error, RunConfig};
use serde::Serialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "medflip", version, about = "Masked vision-language pretraining at desk scale")]
#[command(after_help = "Any `--section.key VALUE` flag overrides that run-config key, e.g. `--loss.beta 0.2`.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into a directory.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a model and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON-lines metrics log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        protocol: Protocol,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate one model per value of a configuration axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// mask_ratio, pretrain_fraction, beta or loss_mode.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Training seeds per value.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Directory for the CSV and SVG outputs.
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Forward+backward images/sec per mask ratio.
    Throughput {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 30)]
        steps: usize,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        seeds: usize,
    },
    /// Print the version.
    Version,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Protocol {
    ZeroShot,
    Probe,
    Retrieval,
}

/// Pulls `--a.b value` / `--a.b=value` pairs out of `argv`.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().unwrap_or("").contains('.')) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| format!("override --{flag} needs a value"))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn emit<T: Serialize>(value: &T) -> Result<(), Error> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Output(e.to_string()))?;
    writeln!(std::io::stdout().lock(), "{s}").map_err(|e| Error::Io(PathBuf::from("<stdout>"), e))
}

fn resolve(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), overrides)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), Error> {
    if !overrides.is_empty() && matches!(cli.command, Command::Eval { .. } | Command::Gradcheck { .. } | Command::Version) {
        return Err(Error::config("configuration overrides do not apply to this subcommand"));
    }
    match cli.command {
        Command::GenerateData { common, out } => {
            let mut cfg = RunConfig::resolve(common.config.as_deref(), &overrides)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            let ds = data::generate_dataset(&cfg.data, &out)?;
            let m = &ds.manifest;
            emit(&json!({
                "path": out,
                "n_samples": m.n_samples,
                "splits": m.splits,
                "vocabulary_size": m.vocabulary.len(),
                "seed": m.seed,
                "images_crc32": format!("{:08x}", m.images_crc32),
                "samples_crc32": format!("{:08x}", m.samples_crc32),
            }))
        }
        Command::Pretrain {
            common,
            data: dir,
            checkpoint,
            log,
            mask_ratio,
            epochs,
        } => {
            let mut cfg = resolve(&common, &overrides)?;
            if let Some(r) = mask_ratio {
                cfg.train.mask_ratio = r;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(c) = checkpoint {
                cfg.train.checkpoint = Some(c.to_string_lossy().into_owned());
            }
            if let Some(l) = log {
                cfg.train.log = Some(l.to_string_lossy().into_owned());
            }
            if cfg.train.checkpoint.is_none() {
                cfg.train.checkpoint = Some("checkpoint.mfck".into());
            }
            cfg.validate()?;
            let ds = data::load_dataset(&dir)?;
            let resolved = train::resolve_for_dataset(&cfg, &ds)?;
            log::info!("resolved configuration:\n{}", resolved.to_toml_string());
            let outcome = train::train_with(&resolved, &ds, |r| {
                if r.step % 50 == 0 {
                    log::info!("step {} total {:.5} contrastive {:.5} svd {:.5}", r.step, r.total, r.contrastive, r.svd);
                }
            })?;
            emit(&json!({
                "checkpoint": resolved.train.checkpoint,
                "checkpoint_id": outcome.checkpoint.id(),
                "steps": outcome.checkpoint.step(),
                "param_count": outcome.checkpoint.params.scalar_count(),
                "first": outcome.log.first(),
                "last": outcome.log.last(),
            }))
        }
        Command::Eval {
            protocol,
            checkpoint,
            data: dir,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = data::load_dataset(&dir)?;
            let model = ck.model();
            let test = ds.split(Split::Test);
            let mut report = match protocol {
                Protocol::ZeroShot => eval::zero_shot_classify(&model, &ck.vocabulary, test, &data::class_prompts())?,
                Protocol::Probe => eval::linear_probe(
                    &model,
                    ds.split(Split::Finetune),
                    test,
                    ck.config.eval.probe_epochs,
                    ck.config.eval.probe_lr,
                )?,
                Protocol::Retrieval => eval::retrieval(&model, &ck.vocabulary, test, &ck.config.eval.ks)?,
            };
            report.seed = ck.config.train.seed;
            emit(&report)
        }
        Command::Ablate {
            common,
            data: dir,
            axis,
            values,
            seeds,
            out,
        } => {
            let axis: Axis = axis.parse()?;
            let cfg = resolve(&common, &overrides)?;
            let ds = data::load_dataset(&dir)?;
            let rows = ablate::ablate(&cfg, &ds, axis, &values, &seeds)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io(out.clone(), e))?;
            let csv_path = out.join(format!("{}.csv", axis.name()));
            let svg_path = out.join(format!("{}.svg", axis.name()));
            ablate::write_csv(&rows, &csv_path)?;
            std::fs::write(&svg_path, ablate::render_svg(axis, &rows)).map_err(|e| Error::Io(svg_path.clone(), e))?;
            emit(&json!({ "csv": csv_path, "svg": svg_path, "rows": rows }))
        }
        Command::Throughput {
            common,
            data: dir,
            ratios,
            warmup,
            steps,
        } => {
            let cfg = resolve(&common, &overrides)?;
            if let Some(r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
                return Err(Error::config(format!("mask ratio {r} outside [0, 1)")));
            }
            let ds = data::load_dataset(&dir)?;
            emit(&train::measure_throughput(&cfg, &ds, &ratios, warmup, steps)?)
        }
        Command::Gradcheck { seed, seeds } => {
            let report = gradcheck::run_suite(seed, seeds)?;
            for e in &report.entries {
                log::info!(
                    "{:<24} max rel error {:.3e} (tol {:.0e}) {}",
                    e.name,
                    e.max_rel_error,
                    e.tolerance,
                    if e.passed { "ok" } else { "FAIL" }
                );
            }
            emit(&report)?;
            if report.passed {
                Ok(())
            } else {
                Err(Error::Protocol("gradient check failed".into()))
            }
        }
        Command::Version => emit(&json!({ "name": "medflip", "version": env!("CARGO_PKG_VERSION") })),
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MEDFLIP_LOG", "info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
