//! Losslessness checks: greedy equality against vanilla decoding, plus the
//! law of sampled output measured exactly (by enumerating every random
//! branch of a run) and by Monte Carlo.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::draft_tree::CandidatePolicy;
use crate::drafter::{Drafter, DrafterConfig};
use crate::engine::{generate, generate_with, GenerationConfig, Mode};
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::target_model::{ModelConfig, TargetModel, TokenId};
use crate::verification::{AcceptanceRule, Decider, RngDecider};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{verdict} {}: {}", self.name, self.detail)
    }
}

/// Greedy outputs of `modes` against vanilla greedy decoding, one check per
/// mode.
pub fn greedy_equality(
    target: &TargetModel,
    drafter: &Drafter,
    prompts: &[Vec<TokenId>],
    config: &GenerationConfig,
    modes: &[Mode],
) -> Result<Vec<Check>> {
    let base = GenerationConfig {
        temperature: 0.0,
        ..*config
    };
    let vanilla: Vec<Vec<TokenId>> = prompts
        .par_iter()
        .map(|p| generate(p, &GenerationConfig { mode: Mode::Vanilla, ..base }, target, None).map(|g| g.tokens))
        .collect::<Result<_>>()?;
    let mut checks = Vec::new();
    for &mode in modes {
        let cfg = GenerationConfig { mode, ..base };
        let outputs: Vec<Vec<TokenId>> = prompts
            .par_iter()
            .map(|p| generate(p, &cfg, target, Some(drafter)).map(|g| g.tokens))
            .collect::<Result<_>>()?;
        let mismatched = outputs.iter().zip(&vanilla).filter(|(a, b)| a != b).count();
        checks.push(Check {
            name: format!("greedy {mode}"),
            passed: mismatched == 0,
            detail: format!(
                "{} of {} prompts identical to vanilla (depth {}, topk {})",
                prompts.len() - mismatched,
                prompts.len(),
                cfg.depth,
                cfg.topk
            ),
        });
    }
    Ok(checks)
}

/// A tiny target and drafter for checking the sampled-output law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSetup {
    pub vocab: usize,
    pub depth: usize,
    pub topk: usize,
    pub policy: CandidatePolicy,
    pub rule: AcceptanceRule,
    pub seed: u64,
}

impl SamplingSetup {
    /// Models with sharpened embeddings so that target and draft laws are
    /// far from uniform and far from each other.
    pub fn models(&self) -> Result<(TargetModel, Drafter)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let cfg = ModelConfig::new(self.vocab, 8, 3, 2, 16);
        let mut target = TargetModel::random(cfg, &mut rng)?;
        for w in target.tok_emb.data_mut() {
            *w *= 6.0;
        }
        let drafter = Drafter::random(DrafterConfig::for_target(&cfg, self.depth), &mut rng);
        Ok((target, drafter))
    }

    pub fn prompt(&self) -> Vec<TokenId> {
        vec![0, 2 % self.vocab as TokenId, 3 % self.vocab as TokenId]
    }

    /// Tokens per run: one full draft plus the bonus token.
    pub fn horizon(&self) -> usize {
        self.depth + 1
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.horizon(),
            temperature: 1.0,
            depth: self.depth,
            topk: self.topk,
            mode: Mode::CascadeTree,
            seed: self.seed,
            eos: None,
            policy: self.policy,
            rule: self.rule,
        }
    }
}

/// Law of `horizon` tokens sampled one by one from `target` at temperature
/// 1, by enumerating every sequence.
pub fn target_law(target: &TargetModel, prompt: &[TokenId], horizon: usize) -> Result<HashMap<Vec<TokenId>, f64>> {
    let mut law = HashMap::new();
    let mut frontier = vec![(Vec::new(), 1.0f64)];
    for _ in 0..horizon {
        let mut next = Vec::new();
        for (seq, mass) in frontier {
            let mut ctx = prompt.to_vec();
            ctx.extend_from_slice(&seq);
            let mut cache = target.new_cache();
            let out = target.forward_prefill(&ctx, &mut cache)?;
            let mut p = out.logits.row(ctx.len() - 1).to_vec();
            kernels::softmax_row(&mut p, 1.0);
            let z: f64 = p.iter().map(|&x| x as f64).sum();
            for (tok, &px) in p.iter().enumerate() {
                let mut s = seq.clone();
                s.push(tok as TokenId);
                next.push((s, mass * px as f64 / z));
            }
        }
        frontier = next;
    }
    law.extend(frontier);
    Ok(law)
}

/// Replays a fixed prefix of choices and takes the first option after it,
/// recording every decision.
struct Replay<'a> {
    script: &'a [usize],
    /// Chosen option index and option count per decision.
    trace: Vec<(usize, usize)>,
    prob: f64,
}

impl Replay<'_> {
    fn choose(&mut self, options: &[f64]) -> usize {
        let pos = self.trace.len();
        let pick = self.script.get(pos).copied().unwrap_or(0);
        self.trace.push((pick, options.len()));
        self.prob *= options[pick];
        pick
    }
}

impl Decider for Replay<'_> {
    fn accept(&mut self, prob: f64) -> bool {
        let prob = prob.clamp(0.0, 1.0);
        // Outcomes with zero probability are not branches.
        let outcomes: Vec<(bool, f64)> = [(true, prob), (false, 1.0 - prob)]
            .into_iter()
            .filter(|&(_, p)| p > 0.0)
            .collect();
        let probs: Vec<f64> = outcomes.iter().map(|o| o.1).collect();
        outcomes[self.choose(&probs)].0
    }

    fn sample(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let idx: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        let probs: Vec<f64> = idx.iter().map(|&i| weights[i] / total).collect();
        idx[self.choose(&probs)]
    }
}

/// Exact law of a sampled run's output, by depth-first enumeration of all
/// random choices. Fails after `max_runs` runs.
pub fn enumerate_output_law(
    target: &TargetModel,
    drafter: &Drafter,
    prompt: &[TokenId],
    config: &GenerationConfig,
    max_runs: usize,
) -> Result<HashMap<Vec<TokenId>, f64>> {
    let mut law: HashMap<Vec<TokenId>, f64> = HashMap::new();
    let mut script: Vec<usize> = Vec::new();
    for _ in 0..max_runs {
        let mut replay = Replay {
            script: &script,
            trace: Vec::new(),
            prob: 1.0,
        };
        let g = generate_with(prompt, config, target, Some(drafter), &mut replay)?;
        *law.entry(g.tokens).or_default() += replay.prob;
        // Advance the last decision that has an untried option.
        let trace = replay.trace;
        match trace.iter().rposition(|&(pick, count)| pick + 1 < count) {
            Some(j) => {
                script = trace[..j].iter().map(|t| t.0).collect();
                script.push(trace[j].0 + 1);
            }
            None => return Ok(law),
        }
    }
    Err(Error::Parameter(format!("enumeration exceeded {max_runs} runs")))
}

/// Per-position token frequencies of `trials` seeded runs.
pub fn sample_marginals(
    target: &TargetModel,
    drafter: &Drafter,
    prompt: &[TokenId],
    config: &GenerationConfig,
    trials: usize,
) -> Result<Vec<Vec<f64>>> {
    let v = target.config().vocab_size;
    let h = config.max_new_tokens;
    let counts = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<Vec<u64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let g = generate_with(prompt, config, target, Some(drafter), &mut RngDecider(rng))?;
            let mut c = vec![0u64; h * v];
            for (pos, &t) in g.tokens.iter().enumerate() {
                c[pos * v + t as usize] += 1;
            }
            Ok(c)
        })
        .try_reduce(
            || vec![0u64; h * v],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    Ok(counts
        .chunks(v)
        .map(|row| row.iter().map(|&c| c as f64 / trials as f64).collect())
        .collect())
}

/// Per-position marginals of a law over equal-length sequences.
pub fn marginals(law: &HashMap<Vec<TokenId>, f64>, horizon: usize, vocab: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; vocab]; horizon];
    for (seq, &p) in law {
        for (pos, &t) in seq.iter().enumerate() {
            m[pos][t as usize] += p;
        }
    }
    m
}

/// Total-variation distance between two laws given as maps.
pub fn total_variation(a: &HashMap<Vec<TokenId>, f64>, b: &HashMap<Vec<TokenId>, f64>) -> f64 {
    let mut keys: Vec<&Vec<TokenId>> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

/// Largest per-position total-variation distance.
pub fn max_marginal_tv(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| 0.5 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Exact output-law check: joint TV over the whole horizon.
pub fn exact_check(setup: &SamplingSetup, tolerance: f64) -> Result<Check> {
    let (target, drafter) = setup.models()?;
    let prompt = setup.prompt();
    let reference = target_law(&target, &prompt, setup.horizon())?;
    let law = enumerate_output_law(&target, &drafter, &prompt, &setup.generation(), 5_000_000)?;
    let tv = total_variation(&law, &reference);
    Ok(Check {
        name: format!("exact law V={} N={} k={} {:?}", setup.vocab, setup.depth, setup.topk, setup.policy),
        passed: tv <= tolerance,
        detail: format!("TV {tv:.3e} (limit {tolerance:.0e})"),
    })
}

/// Monte-Carlo output-law check: largest per-position TV.
pub fn monte_carlo_check(setup: &SamplingSetup, trials: usize, tolerance: f64) -> Result<Check> {
    let (target, drafter) = setup.models()?;
    let prompt = setup.prompt();
    let reference = marginals(&target_law(&target, &prompt, setup.horizon())?, setup.horizon(), setup.vocab);
    let observed = sample_marginals(&target, &drafter, &prompt, &setup.generation(), trials)?;
    let tv = max_marginal_tv(&observed, &reference);
    Ok(Check {
        name: format!(
            "sampled law V={} N={} k={} {:?} ({trials} runs)",
            setup.vocab, setup.depth, setup.topk, setup.policy
        ),
        passed: tv <= tolerance,
        detail: format!("max per-position TV {tv:.4} (limit {tolerance})"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(policy: CandidatePolicy, rule: AcceptanceRule) -> SamplingSetup {
        SamplingSetup {
            vocab: 4,
            depth: 1,
            topk: 2,
            policy,
            rule,
            seed: 1,
        }
    }

    #[test]
    fn enumerated_laws_sum_to_one() {
        let s = setup(CandidatePolicy::Sampled, AcceptanceRule::Lossless);
        let (t, d) = s.models().unwrap();
        let law = enumerate_output_law(&t, &d, &s.prompt(), &s.generation(), 100_000).unwrap();
        let total: f64 = law.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(law.keys().all(|k| k.len() == 2));
    }

    #[test]
    fn exact_check_passes_and_negative_control_fails() {
        for policy in [CandidatePolicy::TopK, CandidatePolicy::Sampled] {
            assert!(exact_check(&setup(policy, AcceptanceRule::Lossless), 1e-9).unwrap().passed);
            assert!(!exact_check(&setup(policy, AcceptanceRule::AlwaysAccept), 1e-9).unwrap().passed);
        }
    }

    #[test]
    fn tv_of_disjoint_laws_is_one() {
        let a = HashMap::from([(vec![0], 1.0)]);
        let b = HashMap::from([(vec![1], 1.0)]);
        assert_eq!(total_variation(&a, &b), 1.0);
        assert_eq!(total_variation(&a, &a), 0.0);
    }
}
