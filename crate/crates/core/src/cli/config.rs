//! `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::draft_tree::CandidatePolicy;
use crate::drafter::DrafterConfig;
use crate::engine::{GenerationConfig, Mode};
use crate::error::{Error, Result};
use crate::target_model::{FeatureTaps, ModelConfig, TokenId};
use crate::training::{AlignFeature, DataGenConfig, PretrainConfig, TrainConfig};
use crate::verification::AcceptanceRule;

fn message(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// A value that can appear on the right of `=`.
trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|e| Error::Config(format!("`{s}`: {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f32, f64, bool);

impl Value for Option<PathBuf> {
    fn parse_value(s: &str) -> Result<Self> {
        Ok((s != "none").then(|| PathBuf::from(s)))
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
    }
}

impl Value for Option<TokenId> {
    fn parse_value(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|e| Error::Config(format!("`{s}`: {e}")))
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".into(), |t| t.to_string())
    }
}

impl Value for Mode {
    fn parse_value(s: &str) -> Result<Self> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

/// Enum values spelled as lowercase words.
macro_rules! word_value {
    ($t:ty { $($word:literal => $v:expr),* $(,)? }) => {
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($v),)*
                    _ => Err(Error::Config(format!(
                        "`{s}` is not one of {}", [$($word),*].join(", ")
                    ))),
                }
            }
            fn render(&self) -> String {
                $(if *self == $v { return $word.into(); })*
                unreachable!()
            }
        }
    };
}

word_value!(CandidatePolicy { "topk" => CandidatePolicy::TopK, "sampled" => CandidatePolicy::Sampled });
word_value!(AcceptanceRule {
    "lossless" => AcceptanceRule::Lossless,
    "always_accept" => AcceptanceRule::AlwaysAccept,
});
word_value!(AlignFeature { "low" => AlignFeature::Low, "mid" => AlignFeature::Mid, "high" => AlignFeature::High });

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $t:ty = $default:expr;)*) => {
        /// Every setting of a run. Field names are the config-file keys.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $t,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$t as Value>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {}", message(e))))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.render())),*]
            }
        }
    };
}

run_config! {
    /// Seeds model init, prompt streams, training order and sampling.
    seed: u64 = 0;

    vocab_size: usize = 64;
    hidden_dim: usize = 32;
    num_layers: usize = 4;
    num_heads: usize = 4;
    max_positions: usize = 64;
    rms_epsilon: f32 = 1e-5;
    /// Block whose output is the low feature tap (1-based).
    tap_low: usize = 1;
    /// Block whose output is the mid feature tap (1-based).
    tap_mid: usize = 2;

    /// Seed of the synthetic language's successor tables.
    language_seed: u64 = 0;
    language_noise: f64 = 0.1;
    pretrain_steps: usize = 300;
    pretrain_batch: usize = 8;
    pretrain_seq_len: usize = 32;
    pretrain_lr: f32 = 3e-3;

    draft_levels: usize = 4;
    drafter_heads: usize = 4;
    drafter_ffn_dim: usize = 128;
    parallel: bool = false;
    context_attention: bool = true;

    num_prompts: usize = 256;
    prompt_len: usize = 8;
    continuation_len: usize = 32;
    data_temperature: f32 = 1.0;

    alpha: f32 = 0.1;
    beta: f32 = 1.0;
    layer_decay: f32 = 0.9;
    lr: f32 = 5e-5;
    adam_beta1: f32 = 0.9;
    adam_beta2: f32 = 0.95;
    weight_decay: f32 = 0.0;
    grad_clip: f32 = 0.5;
    batch_size: usize = 8;
    steps: usize = 1000;
    align: AlignFeature = AlignFeature::High;

    max_new_tokens: usize = 32;
    temperature: f32 = 0.0;
    depth: usize = 4;
    topk: usize = 4;
    mode: Mode = Mode::CascadeTree;
    policy: CandidatePolicy = CandidatePolicy::TopK;
    /// `always_accept` deliberately breaks losslessness.
    acceptance_rule: AcceptanceRule = AcceptanceRule::Lossless;
    eos: Option<TokenId> = None;
    /// Synthetic evaluation prompts when no prompt file is given.
    eval_prompts: usize = 20;
    /// Prompts of the greedy-equality check.
    verify_prompts: usize = 100;
    mc_trials: usize = 200_000;

    target_path: Option<PathBuf> = None;
    drafter_path: Option<PathBuf> = None;
    parallel_drafter_path: Option<PathBuf> = None;
    data_path: Option<PathBuf> = None;
    loss_csv: Option<PathBuf> = None;
    metrics_path: Option<PathBuf> = None;
    prompts_path: Option<PathBuf> = None;
}

impl FromStr for RunConfig {
    type Err = Error;

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// a key may appear once.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, message(e))))?;
        }
        Ok(cfg)
    }
}

/// The fully resolved configuration; parses back to an equal value.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path).map_err(Error::io_at(path))?.parse()
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            max_positions: self.max_positions,
            rms_epsilon: self.rms_epsilon,
            taps: FeatureTaps {
                low: self.tap_low,
                mid: self.tap_mid,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Drafter settings; `parallel` overrides the configured flag.
    pub fn drafter(&self, parallel: bool) -> Result<DrafterConfig> {
        let target = self.model()?;
        let cfg = DrafterConfig {
            depth: self.draft_levels,
            hidden_dim: self.hidden_dim,
            num_heads: self.drafter_heads,
            ffn_dim: self.drafter_ffn_dim,
            rms_epsilon: self.rms_epsilon,
            parallel,
            context_attention: self.context_attention,
        };
        cfg.validate(&target)?;
        Ok(cfg)
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            seq_len: self.pretrain_seq_len,
            lr: self.pretrain_lr,
            grad_clip: 1.0,
            seed: self.seed,
        }
    }

    pub fn data_gen(&self) -> DataGenConfig {
        DataGenConfig {
            continuation_len: self.continuation_len,
            depth: self.draft_levels,
            temperature: self.data_temperature,
            eos: self.eos,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            layer_decay: self.layer_decay,
            lr: self.lr,
            adam_betas: (self.adam_beta1, self.adam_beta2),
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
            align: self.align,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            depth: self.depth,
            topk: self.topk,
            mode: self.mode,
            seed: self.seed,
            eos: self.eos,
            policy: self.policy,
            rule: self.acceptance_rule,
        }
    }
}
