use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use winlin::cli;
use winlin::config::{RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "winlin", version, about = "Building footprint segmentation with window linear attention")]
struct Args {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.epochs=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic train/val/test splits into --out.
    GenData,
    /// Train on data.root; --from fine-tunes an existing checkpoint.
    Train {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on eval.split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Masks for every image in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        tta: bool,
    },
    /// Exact vs linear window attention across window sizes.
    Bench,
    /// Finite-difference gradient checks; exits nonzero on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Also check the configured model, sampling this many elements per parameter.
        #[arg(long)]
        model: Option<usize>,
    },
}

fn run(args: Args) -> winlin::Result<bool> {
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(s.trim().parse().map_err(|_| winlin::Error::Config(format!("{SEED_ENV}=`{s}` is not an integer")))?),
        Err(_) => None,
    };
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides, env_seed)?;
    let out = &args.out;
    match args.cmd {
        Cmd::GenData => {
            for m in cli::gen_data(&cfg, out)? {
                println!("{}: {} samples", m.path().display(), m.len());
            }
        }
        Cmd::Train { from } => {
            let last = cli::train_cmd(&cfg, out, from.as_deref())?;
            println!("checkpoint {}", last.display());
        }
        Cmd::Eval { checkpoint } => {
            for (split, m) in cli::eval_cmd(&cfg, out, &checkpoint)? {
                println!("{split}: {m}");
            }
        }
        Cmd::Predict { checkpoint, input, tta } => {
            let n = cli::predict_cmd(&cfg, out, &checkpoint, &input, tta)?.len();
            println!("{n} masks written to {}", out.display());
        }
        Cmd::Bench => {
            let path = cli::bench_cmd(&cfg, out)?;
            print!("{}", std::fs::read_to_string(&path).unwrap_or_default());
        }
        Cmd::Gradcheck { seeds, model } => {
            let ok = cli::gradcheck_cmd(&cfg, out, seeds, model)?;
            println!("gradcheck {}", if ok { "passed" } else { "FAILED" });
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
