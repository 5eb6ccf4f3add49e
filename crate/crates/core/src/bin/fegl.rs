use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fegl::cli::{self, RunConfig};
use fegl::{Error, Result};

#[derive(Parser)]
#[command(name = "fegl", version, about = "Speculative decoding with a cascaded single-pass drafter")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    temperature: Option<f32>,
    #[arg(long, global = true)]
    depth: Option<usize>,
    #[arg(long, global = true)]
    topk: Option<usize>,
    /// Prompt file: one prompt of whitespace-separated token ids per line.
    #[arg(long, global = true)]
    prompts: Option<PathBuf>,
    /// Any config key, as KEY=VALUE. Repeatable; applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Create (and optionally pre-train) a target model.
    InitTarget,
    /// Record a drafter training dataset from the target.
    GenData,
    /// Train a drafter; writes weights and the loss curve.
    TrainDrafter,
    /// Generate from prompts and print the tokens.
    Generate,
    /// Check that speculative output matches the target exactly.
    VerifyLossless,
    /// Compare all decoding modes; writes JSON-lines metrics.
    Bench,
}

fn resolve(args: &Args) -> Result<RunConfig> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
    set("seed", args.seed.map(|v| v.to_string()))?;
    set("mode", args.mode.clone())?;
    set("temperature", args.temperature.map(|v| v.to_string()))?;
    set("depth", args.depth.map(|v| v.to_string()))?;
    set("topk", args.topk.map(|v| v.to_string()))?;
    set("prompts_path", args.prompts.as_ref().map(|p| p.display().to_string()))?;
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

/// `--out`, else the config path named by `key`.
fn output(args: &Args, configured: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    args.out
        .clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("give --out or set {key}")))
}

fn run(args: &Args) -> Result<bool> {
    let mut cfg = resolve(args)?;
    log::info!("resolved config:\n{cfg}");
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    match args.command {
        Command::InitTarget => {
            let out = output(args, &cfg.target_path, "target_path")?;
            cli::init_target(&cfg, &out)?;
            writeln!(w, "wrote {}", out.display())?;
        }
        Command::GenData => {
            let out = output(args, &cfg.data_path, "data_path")?;
            let target = cli::load_target(&cfg)?;
            let data = cli::gen_data(&cfg, &target)?;
            data.save(&out)?;
            writeln!(w, "wrote {} examples to {}", data.len(), out.display())?;
        }
        Command::TrainDrafter => {
            let configured = if cfg.parallel { &cfg.parallel_drafter_path } else { &cfg.drafter_path };
            let out = output(args, configured, "drafter_path")?;
            let (_, reports) = cli::train_drafter(&cfg, &out)?;
            match (reports.first(), reports.last()) {
                (Some(a), Some(b)) => writeln!(w, "loss {:.5} -> {:.5} over {} steps", a.total, b.total, reports.len())?,
                _ => writeln!(w, "no training steps")?,
            }
            writeln!(w, "wrote {}", out.display())?;
        }
        Command::Generate => {
            let prompts = cli::eval_prompts(&cfg)?;
            cli::generate(&cfg, &prompts, &mut w)?;
        }
        Command::VerifyLossless => {
            let checks = cli::verify_lossless(&cfg, &mut w)?;
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::Bench => {
            if args.out.is_some() {
                cfg.metrics_path = args.out.clone();
            }
            cli::bench(&cfg, &mut w)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEGL_LOG", "info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
