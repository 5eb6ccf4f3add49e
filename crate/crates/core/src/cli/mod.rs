//! Commands behind the `fegl` binary. Each takes a resolved [`RunConfig`]
//! and writes its report to the given stream.

pub mod config;
pub mod lossless;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::RunConfig;

use crate::drafter::Drafter;
use crate::engine::{
    acceptance_rate_by_depth, compute_speedup, compute_tau, generate_with, metrics, Generation, Mode, Record,
    SessionMetrics,
};
use crate::error::{Error, Result};
use crate::target_model::{TargetModel, TokenId};
use crate::training::corpus::lm_cross_entropy;
use crate::training::{
    generate_training_data, pretrain_target, write_loss_csv, Dataset, DrafterTrainer, StepReport, SyntheticLanguage,
};
use crate::verification::RngDecider;
use lossless::{Check, SamplingSetup};

/// Stream offsets that keep prompt sets apart for one run seed.
const TRAIN_PROMPT_STREAM: u64 = 1;
const EVAL_PROMPT_STREAM: u64 = 2;
const HELD_OUT_STREAM: u64 = 3;

pub fn language(cfg: &RunConfig) -> Result<SyntheticLanguage> {
    SyntheticLanguage::new(cfg.vocab_size, cfg.language_noise, cfg.language_seed)
}

/// Target weights from `target_path`, or a seeded random target when no
/// path is configured.
pub fn load_target(cfg: &RunConfig) -> Result<TargetModel> {
    let model = cfg.model()?;
    match &cfg.target_path {
        Some(p) => TargetModel::load(model, p),
        None => {
            log::warn!("target_path not set; using a random target");
            TargetModel::random(model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
        }
    }
}

/// The cascade drafter (or the parallel-heads one), from its configured
/// path or seeded random weights.
pub fn load_drafter(cfg: &RunConfig, parallel: bool) -> Result<Drafter> {
    let dc = cfg.drafter(parallel)?;
    let path = if parallel { &cfg.parallel_drafter_path } else { &cfg.drafter_path };
    match path {
        Some(p) => Drafter::load(dc, p),
        None => {
            log::warn!("no weights for the {} drafter; using random weights", if parallel { "parallel" } else { "cascade" });
            Ok(Drafter::random(dc, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed)))
        }
    }
}

/// Prompts from a file: one per line, whitespace-separated token ids;
/// blank lines and `#` comments are skipped.
pub fn read_prompts(path: &Path, vocab: usize) -> Result<Vec<Vec<TokenId>>> {
    let text = std::fs::read_to_string(path).map_err(Error::io_at(path))?;
    let mut prompts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let prompt = line
            .split_whitespace()
            .map(|t| {
                let id: TokenId = t
                    .parse()
                    .map_err(|e| Error::Config(format!("{}:{}: `{t}`: {e}", path.display(), n + 1)))?;
                if id as usize >= vocab {
                    return Err(Error::Range(format!("{}:{}: token {id} >= vocab {vocab}", path.display(), n + 1)));
                }
                Ok(id)
            })
            .collect::<Result<Vec<_>>>()?;
        prompts.push(prompt);
    }
    Ok(prompts)
}

/// Evaluation prompts: the configured file, or synthetic ones.
pub fn eval_prompts(cfg: &RunConfig) -> Result<Vec<Vec<TokenId>>> {
    match &cfg.prompts_path {
        Some(p) => read_prompts(p, cfg.vocab_size),
        None => Ok(language(cfg)?.prompts(
            cfg.eval_prompts,
            cfg.prompt_len,
            cfg.seed.wrapping_add(EVAL_PROMPT_STREAM),
        )),
    }
}

/// Creates a seeded target, pre-trains it on the synthetic language when
/// `pretrain_steps > 0` and writes its weights.
pub fn init_target(cfg: &RunConfig, out: &Path) -> Result<TargetModel> {
    let mut target = TargetModel::random(cfg.model()?, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if cfg.pretrain_steps > 0 {
        let lang = language(cfg)?;
        let pre = cfg.pretrain();
        let held_out = lang.prompts(32, pre.seq_len, cfg.seed.wrapping_add(HELD_OUT_STREAM));
        let before = lm_cross_entropy(&target, &held_out)?;
        pretrain_target(&mut target, &lang, &pre)?;
        let after = lm_cross_entropy(&target, &held_out)?;
        log::info!("held-out cross-entropy {before:.4} -> {after:.4}");
    }
    target.save(out)?;
    Ok(target)
}

/// Samples target continuations of synthetic training prompts and records
/// the training dataset.
pub fn gen_data(cfg: &RunConfig, target: &TargetModel) -> Result<Dataset> {
    let prompts = language(cfg)?.prompts(cfg.num_prompts, cfg.prompt_len, cfg.seed.wrapping_add(TRAIN_PROMPT_STREAM));
    let (data, skipped) = generate_training_data(target, &prompts, &cfg.data_gen())?;
    log::info!("{} examples, {skipped} prompts skipped", data.len());
    Ok(data)
}

/// Trains a drafter for `cfg.steps` steps and writes its weights, plus the
/// loss curve when `loss_csv` is set. The dataset is read from `data_path`
/// when that file exists and generated (and saved there) otherwise.
pub fn train_drafter(cfg: &RunConfig, out: &Path) -> Result<(Drafter, Vec<StepReport>)> {
    let target = load_target(cfg)?;
    let dc = cfg.drafter(cfg.parallel)?;
    let data = match &cfg.data_path {
        Some(p) if p.exists() => Dataset::load(p)?,
        other => {
            let data = gen_data(cfg, &target)?;
            if let Some(p) = other {
                data.save(p)?;
            }
            data
        }
    };
    if let Some(ex) = data.examples.first() {
        if ex.dim != dc.hidden_dim || ex.vocab != target.config().vocab_size {
            return Err(Error::Config(format!(
                "dataset has d={} V={}, config has d={} V={}",
                ex.dim,
                ex.vocab,
                dc.hidden_dim,
                target.config().vocab_size
            )));
        }
    }
    let drafter = Drafter::random(dc, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let mut trainer = DrafterTrainer::new(drafter, cfg.train()?)?;
    let reports = trainer.train(&target, &data, cfg.steps)?;
    trainer.drafter.save(out)?;
    if let Some(csv) = &cfg.loss_csv {
        write_loss_csv(csv, &reports, dc.depth)?;
    }
    Ok((trainer.drafter, reports))
}

fn run_prompts(
    cfg: &RunConfig,
    mode: Mode,
    target: &TargetModel,
    drafter: Option<&Drafter>,
    prompts: &[Vec<TokenId>],
) -> Result<Vec<Generation>> {
    let gen = crate::engine::GenerationConfig { mode, ..cfg.generation() };
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            generate_with(p, &gen, target, drafter, &mut RngDecider(rng))
        })
        .collect()
}

fn drafter_for(cfg: &RunConfig, mode: Mode) -> Result<Option<Drafter>> {
    Ok(match mode {
        Mode::Vanilla => None,
        Mode::ParallelHeads => Some(load_drafter(cfg, true)?),
        _ => Some(load_drafter(cfg, false)?),
    })
}

/// Generates from every prompt with the configured mode; prints one line of
/// tokens per prompt followed by a summary line.
pub fn generate(cfg: &RunConfig, prompts: &[Vec<TokenId>], w: &mut dyn Write) -> Result<Vec<Generation>> {
    let target = load_target(cfg)?;
    let drafter = drafter_for(cfg, cfg.mode)?;
    let runs = run_prompts(cfg, cfg.mode, &target, drafter.as_ref(), prompts)?;
    for g in &runs {
        let line: Vec<String> = g.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    let cycles: Vec<_> = runs.iter().flat_map(|g| g.cycles.iter().cloned()).collect();
    let tokens: usize = runs.iter().map(|g| g.tokens.len()).sum();
    let target_calls: usize = runs.iter().map(|g| g.target_calls).sum();
    let drafter_calls: usize = runs.iter().map(|g| g.drafter_calls).sum();
    let tau = compute_tau(&cycles).unwrap_or(0.0);
    writeln!(
        w,
        "# mode={} prompts={} new_tokens={tokens} cycles={} tau={tau:.4} target_calls={target_calls} drafter_calls={drafter_calls}",
        cfg.mode,
        runs.len(),
        cycles.len()
    )?;
    let wall: f64 = runs.iter().map(|g| g.wall_time).sum();
    log::info!("generation wall time {wall:.3}s");
    Ok(runs)
}

/// Runs every losslessness check; prints one PASS/FAIL line each.
pub fn verify_lossless(cfg: &RunConfig, w: &mut dyn Write) -> Result<Vec<Check>> {
    let target = load_target(cfg)?;
    let drafter = load_drafter(cfg, false)?;
    let prompts = language(cfg)?.prompts(
        cfg.verify_prompts,
        cfg.prompt_len,
        cfg.seed.wrapping_add(EVAL_PROMPT_STREAM),
    );
    let mut checks = lossless::greedy_equality(
        &target,
        &drafter,
        &prompts,
        &cfg.generation(),
        &[Mode::CascadeTree, Mode::CascadeChain],
    )?;
    let exact = SamplingSetup {
        vocab: 4,
        depth: 1,
        topk: cfg.topk.min(4),
        policy: cfg.policy,
        rule: cfg.acceptance_rule,
        seed: cfg.seed,
    };
    checks.push(lossless::exact_check(&exact, 1e-9)?);
    let sampled = SamplingSetup {
        vocab: 8,
        depth: 2,
        topk: cfg.topk.min(8),
        ..exact
    };
    checks.push(lossless::monte_carlo_check(&sampled, cfg.mc_trials, 0.01)?);
    for c in &checks {
        writeln!(w, "{}", c.line())?;
    }
    Ok(checks)
}

/// Runs the evaluation prompts under every mode. Returns the metric records
/// (cycles, then one summary per mode) and prints a summary table.
pub fn bench(cfg: &RunConfig, w: &mut dyn Write) -> Result<Vec<Record>> {
    let target = load_target(cfg)?;
    let prompts = eval_prompts(cfg)?;
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    let mut vanilla: Option<Vec<SessionMetrics>> = None;
    for mode in Mode::ALL {
        let drafter = drafter_for(cfg, mode)?;
        let runs = run_prompts(cfg, mode, &target, drafter.as_ref(), &prompts)?;
        let sessions: Vec<SessionMetrics> = runs.iter().enumerate().map(|(i, g)| g.session(i)).collect();
        for (i, g) in runs.iter().enumerate() {
            records.extend(g.cycles.iter().map(|c| Record::Cycle {
                mode: mode.to_string(),
                prompt_id: i,
                metrics: c.clone(),
            }));
        }
        let cycles: Vec<_> = runs.iter().flat_map(|g| g.cycles.iter().cloned()).collect();
        let speed = match &vanilla {
            Some(v) => Some(compute_speedup(&sessions, v)?),
            None => None,
        };
        let speed = speed.or_else(|| (mode == Mode::Vanilla).then_some(metrics::Speedup { wall: 1.0, call_ratio: 1.0 }));
        let depth = if mode == Mode::Vanilla { 0 } else { cfg.depth };
        summaries.push(Record::Summary {
            mode: mode.to_string(),
            prompts: runs.len(),
            cycles: cycles.len(),
            new_tokens: sessions.iter().map(|s| s.new_tokens).sum(),
            tau: compute_tau(&cycles)?,
            target_calls: sessions.iter().map(|s| s.target_calls).sum(),
            drafter_calls: sessions.iter().map(|s| s.drafter_calls).sum(),
            call_ratio: speed.map(|s| s.call_ratio),
            wall_speedup: speed.map(|s| s.wall),
            wall_time: sessions.iter().map(|s| s.wall_time).sum(),
            acceptance_by_depth: acceptance_rate_by_depth(&cycles, depth),
        });
        if mode == Mode::Vanilla {
            vanilla = Some(sessions);
        }
    }
    writeln!(w, "{:<16} {:>8} {:>10} {:>10}  acceptance by depth", "mode", "tau", "call_ratio", "wall_x")?;
    for s in &summaries {
        if let Record::Summary {
            mode,
            tau,
            call_ratio,
            wall_speedup,
            acceptance_by_depth,
            ..
        } = s
        {
            let rates: Vec<String> = acceptance_by_depth
                .iter()
                .map(|r| r.map_or_else(|| "-".into(), |r| format!("{r:.3}")))
                .collect();
            writeln!(
                w,
                "{mode:<16} {tau:>8.4} {:>10.4} {:>10.3}  {}",
                call_ratio.unwrap_or(f64::NAN),
                wall_speedup.unwrap_or(f64::NAN),
                rates.join(" ")
            )?;
        }
    }
    records.extend(summaries);
    if let Some(path) = &cfg.metrics_path {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::io_at(path))?);
        metrics::write_records(&mut f, &records)?;
        f.flush()?;
    }
    Ok(records)
}
