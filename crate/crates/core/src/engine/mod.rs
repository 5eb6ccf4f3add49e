//! Generation loop: draft in one pass, build the backbone tree, verify it in
//! one target pass, commit the accepted path and repeat.
//!
//! The last emitted token is always "pending": verified, but not yet run
//! through the target. Each cycle feeds it to the target as the root of the
//! tree, so the root row's logits score the tree's first level and one
//! target call per cycle suffices. Before the first cycle the target
//! processes every prompt token except the last.

pub mod metrics;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use metrics::{
    acceptance_rate_by_depth, compute_speedup, compute_tau, CycleMetrics, Record, SessionMetrics, Speedup,
};

use crate::draft_tree::{CandidatePolicy, DraftTree};
use crate::drafter::{DraftInput, Drafter};
use crate::error::{Error, Result};
use crate::numerics::{kernels, softmax, Tensor};
use crate::target_model::{MultiLevelFeatures, TargetModel, TokenId};
use crate::verification::{
    verify_greedy, verify_stochastic_with_rule, AcceptanceRule, Decider, RngDecider,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Vanilla,
    CascadeTree,
    CascadeChain,
    ParallelHeads,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Vanilla,
        Mode::CascadeTree,
        Mode::CascadeChain,
        Mode::ParallelHeads,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::CascadeTree => "cascade_tree",
            Mode::CascadeChain => "cascade_chain",
            Mode::ParallelHeads => "parallel_heads",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    /// 0 selects greedy decoding.
    pub temperature: f32,
    pub depth: usize,
    pub topk: usize,
    pub mode: Mode,
    pub seed: u64,
    pub eos: Option<TokenId>,
    pub policy: CandidatePolicy,
    pub rule: AcceptanceRule,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            temperature: 0.0,
            depth: 7,
            topk: 10,
            mode: Mode::CascadeTree,
            seed: 0,
            eos: None,
            policy: CandidatePolicy::TopK,
            rule: AcceptanceRule::Lossless,
        }
    }
}

impl GenerationConfig {
    pub fn greedy(&self) -> bool {
        self.temperature == 0.0
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.mode != Mode::Vanilla && (self.depth == 0 || self.topk == 0) {
            return Err(Error::Config("depth and topk must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of one generation session.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub cycles: Vec<CycleMetrics>,
    pub target_calls: usize,
    pub drafter_calls: usize,
    pub wall_time: f64,
}

impl Generation {
    pub fn session(&self, prompt_id: usize) -> SessionMetrics {
        SessionMetrics {
            prompt_id,
            new_tokens: self.tokens.len(),
            cycles: self.cycles.len(),
            target_calls: self.target_calls,
            drafter_calls: self.drafter_calls,
            wall_time: self.wall_time,
        }
    }
}

fn pick_token<D: Decider + ?Sized>(logits: &[f32], temperature: f32, decider: &mut D) -> TokenId {
    if temperature == 0.0 {
        return kernels::argmax(logits) as TokenId;
    }
    let mut p = logits.to_vec();
    kernels::softmax_row(&mut p, temperature);
    let w: Vec<f64> = p.iter().map(|&v| v as f64).collect();
    decider.sample(&w) as TokenId
}

/// Appends `new` to `out`, stopping after EOS or at the token budget.
/// Returns the number of tokens taken.
fn emit(out: &mut Vec<TokenId>, new: &[TokenId], config: &GenerationConfig) -> usize {
    let mut n = 0;
    for &t in new {
        if out.len() >= config.max_new_tokens {
            break;
        }
        out.push(t);
        n += 1;
        if Some(t) == config.eos {
            break;
        }
    }
    n
}

fn finished(out: &[TokenId], config: &GenerationConfig) -> bool {
    out.len() >= config.max_new_tokens || (config.eos.is_some() && out.last().copied() == config.eos)
}

/// Drafter rows `from..to`: features of the previous position plus the
/// token at each position.
fn draft_inputs<'a>(
    seq: &[TokenId],
    features: &'a [MultiLevelFeatures],
    from: usize,
    to: usize,
) -> Vec<DraftInput<'a>> {
    (from..to)
        .map(|j| DraftInput {
            prev_features: j.checked_sub(1).map(|p| &features[p]),
            token: seq[j],
        })
        .collect()
}

/// Runs one session. `drafter` is required for every mode except vanilla.
/// Random choices come from a generator seeded with `config.seed`.
pub fn generate(
    prompt: &[TokenId],
    config: &GenerationConfig,
    target: &TargetModel,
    drafter: Option<&Drafter>,
) -> Result<Generation> {
    let mut decider = RngDecider(ChaCha8Rng::seed_from_u64(config.seed));
    generate_with(prompt, config, target, drafter, &mut decider)
}

/// [`generate`] with every random choice delegated to `decider`.
pub fn generate_with<D: Decider + ?Sized>(
    prompt: &[TokenId],
    config: &GenerationConfig,
    target: &TargetModel,
    drafter: Option<&Drafter>,
    decider: &mut D,
) -> Result<Generation> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(Error::Parameter("prompt must not be empty".into()));
    }
    match config.mode {
        Mode::Vanilla => vanilla(prompt, config, target, decider),
        mode => {
            let drafter = drafter.ok_or_else(|| Error::Config(format!("mode {mode} needs a drafter")))?;
            if (mode == Mode::ParallelHeads) != drafter.config().parallel {
                return Err(Error::Config(format!(
                    "mode {mode} does not match a drafter with parallel = {}",
                    drafter.config().parallel
                )));
            }
            if config.depth > drafter.depth() {
                return Err(Error::Config(format!(
                    "draft depth {} exceeds the drafter's {} levels",
                    config.depth,
                    drafter.depth()
                )));
            }
            speculative(prompt, config, target, drafter, decider)
        }
    }
}

fn vanilla<D: Decider + ?Sized>(
    prompt: &[TokenId],
    config: &GenerationConfig,
    target: &TargetModel,
    decider: &mut D,
) -> Result<Generation> {
    let start = Instant::now();
    let mut cache = target.new_cache();
    let (last, context) = prompt.split_last().expect("prompt is non-empty");
    target.forward_prefill(context, &mut cache)?;
    let mut target_calls = 1;
    let mut pending = *last;
    let mut out = Vec::new();
    let mut cycles = Vec::new();
    while !finished(&out, config) {
        let t0 = Instant::now();
        let step = target.forward_extend(&[pending], &mut cache)?;
        target_calls += 1;
        pending = pick_token(step.logits.row(0), config.temperature, decider);
        emit(&mut out, &[pending], config);
        cycles.push(CycleMetrics {
            cycle: cycles.len(),
            nodes_verified: 0,
            accepted_length: 1,
            accepted_depth: 0,
            target_calls: 1,
            drafter_calls: 0,
            wall_time: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(Generation {
        tokens: out,
        cycles,
        target_calls,
        drafter_calls: 0,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn speculative<D: Decider + ?Sized>(
    prompt: &[TokenId],
    config: &GenerationConfig,
    target: &TargetModel,
    drafter: &Drafter,
    decider: &mut D,
) -> Result<Generation> {
    let start = Instant::now();
    let max_positions = target.config().max_positions;
    let topk = if config.mode == Mode::CascadeChain { 1 } else { config.topk };

    let mut cache = target.new_cache();
    let context = &prompt[..prompt.len() - 1];
    let mut features: Vec<MultiLevelFeatures> = target.forward_prefill(context, &mut cache)?.features;
    let mut target_calls = 1;
    let mut drafter_calls = 0;
    let mut state = drafter.new_state();
    let mut seq: Vec<TokenId> = prompt.to_vec();
    drafter.prefill(
        target,
        &draft_inputs(&seq, &features, 0, context.len()),
        &mut state,
        cache.committed_len(),
    )?;

    let mut out = Vec::new();
    let mut cycles = Vec::new();
    while !finished(&out, config) {
        let t0 = Instant::now();
        let committed = cache.committed_len();
        if committed >= max_positions {
            return Err(Error::Capacity {
                position: committed,
                max: max_positions,
            });
        }
        let pending = seq[committed];
        let inputs = draft_inputs(&seq, &features, state.len(), committed + 1);
        let draft = drafter.draft_forward(target, &inputs, &mut state, committed)?;
        drafter_calls += 1;

        // Only as many levels as there are positions left.
        let levels = config.depth.min(max_positions - committed - 1);
        let logits = &draft.logits.data()[..levels * draft.logits.cols()];
        let q = if levels == 0 {
            None
        } else {
            let t = Tensor::matrix(levels, draft.logits.cols(), logits.to_vec())?;
            Some(softmax(&t, if config.greedy() { 1.0 } else { config.temperature })?)
        };
        let tree = match &q {
            Some(q) => DraftTree::build(q, topk.min(q.cols()), config.policy, decider)?,
            None => DraftTree::empty(),
        };
        let input = tree.verification_input(pending)?;
        let fwd = target.forward_tree(&input, &mut cache)?;
        target_calls += 1;

        let v = target.config().vocab_size;
        let prefix_logits = fwd.logits.row(0);
        let node_rows = if tree.is_empty() {
            Tensor::zeros(&[1, v])
        } else {
            Tensor::matrix(tree.len(), v, fwd.logits.data()[v..].to_vec())?
        };
        let outcome = if config.greedy() {
            verify_greedy(&tree, &node_rows, prefix_logits)?
        } else {
            let probs = softmax(&node_rows, config.temperature)?;
            let mut prefix = prefix_logits.to_vec();
            kernels::softmax_row(&mut prefix, config.temperature);
            let q = q.unwrap_or_else(|| Tensor::zeros(&[1, v]));
            verify_stochastic_with_rule(&tree, &probs, &prefix, &q, decider, config.rule)?
        };

        let mut path = vec![0];
        path.extend(outcome.accepted_nodes.iter().map(|&n| n + 1));
        for &row in &path {
            features.push(fwd.features[row].clone());
        }
        cache.commit(&path)?;
        let emitted = emit(&mut out, &outcome.accepted_tokens, config);
        seq.extend_from_slice(&outcome.accepted_tokens[..emitted]);
        cycles.push(CycleMetrics {
            cycle: cycles.len(),
            nodes_verified: tree.len(),
            accepted_length: emitted,
            accepted_depth: outcome.accepted_tree_depth,
            target_calls: 1,
            drafter_calls: 1,
            wall_time: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(Generation {
        tokens: out,
        cycles,
        target_calls,
        drafter_calls,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drafter::DrafterConfig;
    use crate::target_model::ModelConfig;

    fn models() -> (TargetModel, Drafter) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig::new(32, 16, 3, 2, 64);
        let t = TargetModel::random(cfg, &mut rng).unwrap();
        let d = Drafter::random(DrafterConfig::for_target(&cfg, 3), &mut rng);
        (t, d)
    }

    fn cfg(mode: Mode, n: usize) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: n,
            depth: 3,
            topk: 2,
            mode,
            ..Default::default()
        }
    }

    #[test]
    fn one_token_takes_one_cycle() {
        let (t, d) = models();
        let g = generate(&[0, 4, 5], &cfg(Mode::CascadeTree, 1), &t, Some(&d)).unwrap();
        assert_eq!(g.tokens.len(), 1);
        assert_eq!(g.cycles.len(), 1);
        assert_eq!(g.target_calls, 2);
    }

    #[test]
    fn greedy_matches_vanilla() {
        let (t, d) = models();
        for p in [vec![0u32], vec![0, 3], vec![0, 9, 2, 7, 7]] {
            let a = generate(&p, &cfg(Mode::Vanilla, 20), &t, None).unwrap();
            let b = generate(&p, &cfg(Mode::CascadeTree, 20), &t, Some(&d)).unwrap();
            let c = generate(&p, &cfg(Mode::CascadeChain, 20), &t, Some(&d)).unwrap();
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.tokens, c.tokens);
            assert_eq!(b.target_calls, b.cycles.len() + 1);
            assert_eq!(b.drafter_calls, b.cycles.len());
            assert_eq!(a.target_calls, 21);
        }
    }

    #[test]
    fn runs_up_to_the_position_limit() {
        let (t, d) = models();
        let prompt = vec![0u32; 40];
        let a = generate(&prompt, &cfg(Mode::Vanilla, 24), &t, None).unwrap();
        let b = generate(&prompt, &cfg(Mode::CascadeTree, 24), &t, Some(&d)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(matches!(
            generate(&prompt, &cfg(Mode::CascadeTree, 26), &t, Some(&d)),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn parallel_mode_needs_a_parallel_drafter() {
        let (t, d) = models();
        assert!(matches!(
            generate(&[0], &cfg(Mode::ParallelHeads, 4), &t, Some(&d)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let (t, d) = models();
        let mut c = cfg(Mode::CascadeTree, 16);
        c.temperature = 1.0;
        let a = generate(&[0, 1], &c, &t, Some(&d)).unwrap();
        let b = generate(&[0, 1], &c, &t, Some(&d)).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn eos_truncates() {
        let (t, _) = models();
        let plain = generate(&[0, 3], &cfg(Mode::Vanilla, 10), &t, None).unwrap();
        let mut c = cfg(Mode::Vanilla, 10);
        c.eos = Some(plain.tokens[2]);
        let cut = generate(&[0, 3], &c, &t, None).unwrap();
        let stop = plain.tokens.iter().position(|&x| Some(x) == c.eos).unwrap();
        assert_eq!(cut.tokens, plain.tokens[..=stop]);
    }
}
