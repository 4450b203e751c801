use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use echo::commands;
use echo::{CliError, Config, Result};

#[derive(Parser)]
#[command(name = "echo", version, about = "Interactive talking-head generation on synthetic desk-scale data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationFlags {
    #[arg(long)]
    no_lpe: bool,
    #[arg(long)]
    no_hbcu: bool,
    #[arg(long)]
    no_lau: bool,
    #[arg(long)]
    no_sdcm: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic conversation samples and a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of conversations.
        #[arg(long)]
        n: Option<usize>,
        /// Consecutive windows per conversation.
        #[arg(long)]
        windows: Option<usize>,
    },
    /// Train stage 1 (generator) or stage 2 (adapters and conditioning).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: AblationFlags,
        #[arg(long)]
        stage: Option<u8>,
        /// Sample manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint directory (stage 2 only).
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample clips from a checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        n_steps: Option<usize>,
        /// Feed each window's generated tail into the next window.
        #[arg(long)]
        chain: bool,
    },
    /// Compute metrics over a `gen gt user` manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Recompute every field with the reference implementations.
        #[arg(long)]
        oracle: bool,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(p) = &common.config {
        cfg.apply_file(p)?;
    }
    for kv in &common.set {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    for (k, v) in extra {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    fs::create_dir_all(&common.out).map_err(|e| CliError::io(&common.out, e))?;
    Ok(cfg)
}

fn ablation_overrides(a: &AblationFlags) -> Vec<(&'static str, Option<String>)> {
    let off = |b: bool| b.then(|| String::from("false"));
    vec![
        ("ablation.lpe", off(a.no_lpe)),
        ("ablation.hbcu", off(a.no_hbcu)),
        ("ablation.lau", off(a.no_lau)),
        ("ablation.sdcm", off(a.no_sdcm)),
    ]
}

fn show<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, n, windows } => {
            let cfg = resolve(&common, &[("synth.n", show(&n)), ("synth.windows", show(&windows))])?;
            commands::synth(&cfg, &common.out)
        }
        Command::Train { common, ablation, stage, data, stage1_ckpt, steps } => {
            let mut extra = ablation_overrides(&ablation);
            extra.push(("train.stage", show(&stage)));
            extra.push(("train.data", path(&data)));
            extra.push(("train.stage1_ckpt", path(&stage1_ckpt)));
            let mut cfg = resolve(&common, &extra)?;
            if let Some(s) = steps {
                let key = if cfg.get::<u8>("train.stage")? == 2 { "train.stage2.steps" } else { "train.stage1.steps" };
                cfg.set(key, &s.to_string())?;
            }
            commands::train(&mut cfg, &common.out)
        }
        Command::Generate { common, ckpt, data, n_steps, chain } => {
            let mut cfg = resolve(
                &common,
                &[("generate.ckpt", path(&ckpt)), ("generate.data", path(&data)), ("generate.n_steps", show(&n_steps))],
            )?;
            if chain {
                cfg.set("generate.chain", "true")?;
            }
            commands::generate(&mut cfg, &common.out)
        }
        Command::Evaluate { common, manifest, oracle } => {
            let mut cfg = resolve(&common, &[("evaluate.manifest", path(&manifest))])?;
            if oracle {
                cfg.set("evaluate.oracle", "true")?;
            }
            commands::evaluate(&mut cfg, &common.out)
        }
        Command::Gradcheck { common, inject_fault } => {
            let mut cfg = resolve(&common, &[("gradcheck.fault", inject_fault)])?;
            commands::gradcheck(&mut cfg, &common.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
