//! Synthetic formal language for pre-training the toy target.
//!
//! Token 0 is BOS and token 1 is reserved for EOS; content tokens are
//! `2..V`. After BOS comes a uniform content token. Each later token follows
//! one of two fixed successor tables, chosen by the parity of the token two
//! places back, except with probability `noise` where it is uniform. The
//! resulting target has peaked but context-dependent next-token laws.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_global_norm, AdamW};
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::target_model::{Parameters, TargetModel, TokenId};

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
const FIRST_CONTENT: TokenId = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguage {
    vocab: usize,
    even_next: Vec<TokenId>,
    odd_next: Vec<TokenId>,
    noise: f64,
}

impl SyntheticLanguage {
    pub fn new(vocab: usize, noise: f64, seed: u64) -> Result<Self> {
        if vocab < 4 {
            return Err(Error::Config(format!("synthetic language needs V >= 4, got {vocab}")));
        }
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::Config(format!("noise {noise} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let content: Vec<TokenId> = (FIRST_CONTENT..vocab as TokenId).collect();
        let table = |rng: &mut ChaCha8Rng| {
            let mut perm = content.clone();
            perm.shuffle(rng);
            let mut next = vec![FIRST_CONTENT; vocab];
            for (&from, &to) in content.iter().zip(&perm) {
                next[from as usize] = to;
            }
            next
        };
        let even_next = table(&mut rng);
        let odd_next = table(&mut rng);
        Ok(Self {
            vocab,
            even_next,
            odd_next,
            noise,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        rng.random_range(FIRST_CONTENT..self.vocab as TokenId)
    }

    /// Most likely successor of `cur` given the token before it.
    pub fn successor(&self, before: TokenId, cur: TokenId) -> TokenId {
        if before.is_multiple_of(2) {
            self.even_next[cur as usize]
        } else {
            self.odd_next[cur as usize]
        }
    }

    /// A BOS-initial sequence of `len` tokens.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<TokenId> {
        let mut seq = Vec::with_capacity(len);
        if len == 0 {
            return seq;
        }
        seq.push(BOS);
        if len > 1 {
            seq.push(self.uniform(rng));
        }
        while seq.len() < len {
            let n = seq.len();
            let next = if rng.random::<f64>() < self.noise {
                self.uniform(rng)
            } else {
                self.successor(seq[n - 2], seq[n - 1])
            };
            seq.push(next);
        }
        seq
    }

    /// `count` prompts of `len` tokens from a seeded stream.
    pub fn prompts(&self, count: usize, len: usize, seed: u64) -> Vec<Vec<TokenId>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(len, &mut rng)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f32,
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            seq_len: 32,
            lr: 3e-3,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

fn next_token_loss(target: &TargetModel, tape: &mut Tape, vars: &crate::target_model::TargetVars, seq: &[TokenId]) -> Result<crate::numerics::Var> {
    let v = target.config().vocab_size;
    let w = target.forward_window(tape, vars, &seq[..seq.len() - 1])?;
    let q = tape.softmax(w.logits, 1.0)?;
    let mut one_hot = vec![0.0f32; (seq.len() - 1) * v];
    for (t, &tok) in seq[1..].iter().enumerate() {
        one_hot[t * v + tok as usize] = 1.0;
    }
    let p = tape.constant(vec![seq.len() - 1, v], one_hot)?;
    let ce = tape.cross_entropy(p, q)?;
    Ok(tape.sum(ce))
}

/// Mean next-token cross-entropy of `target` over `sequences`.
pub fn lm_cross_entropy(target: &TargetModel, sequences: &[Vec<TokenId>]) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for seq in sequences.iter().filter(|s| s.len() >= 2) {
        let mut tape = Tape::new();
        let vars = target.bind(&mut tape, false);
        let l = next_token_loss(target, &mut tape, &vars, seq)?;
        total += tape.scalar(l)? as f64;
        count += seq.len() - 1;
    }
    if count == 0 {
        return Err(Error::Parameter("no sequence has two tokens".into()));
    }
    Ok((total / count as f64) as f32)
}

/// Trains `target` on fresh samples of `language`; returns the mean
/// next-token loss of every step.
pub fn pretrain_target(target: &mut TargetModel, language: &SyntheticLanguage, config: &PretrainConfig) -> Result<Vec<f32>> {
    if language.vocab() != target.config().vocab_size {
        return Err(Error::Config("language and target vocabularies differ".into()));
    }
    if config.seq_len < 2 || config.seq_len > target.config().max_positions + 1 {
        return Err(Error::Config(format!("pretraining seq_len {} out of range", config.seq_len)));
    }
    let sizes: Vec<usize> = target.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(&sizes, config.lr, (0.9, 0.95), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<Vec<TokenId>> = (0..config.batch_size)
            .map(|_| language.sample(config.seq_len, &mut rng))
            .collect();
        let mut tape = Tape::new();
        let vars = target.bind(&mut tape, true);
        let mut total = None;
        for seq in &batch {
            let l = next_token_loss(target, &mut tape, &vars, seq)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let rows = (batch.len() * (config.seq_len - 1)) as f32;
        let loss = tape.scale(total.expect("batch is non-empty"), 1.0 / rows);
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { batch: step });
        }
        tape.backward(loss)?;
        let params = TargetModel::param_vars(&vars);
        let mut grads: Vec<Vec<f32>> = params
            .iter()
            .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.data(v).len()], <[f32]>::to_vec))
            .collect();
        clip_global_norm(&mut grads, config.grad_clip);
        let mut slots: Vec<_> = target.named_params_mut().into_iter().map(|(_, t)| t).collect();
        opt.update(&mut slots, &grads)?;
        losses.push(value);
        if (step + 1) % (config.steps / 10).max(1) == 0 {
            log::info!("pretrain step {} loss {value:.4}", step + 1);
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequences_start_with_bos_and_avoid_eos() {
        let lang = SyntheticLanguage::new(16, 0.1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = lang.sample(20, &mut rng);
        assert_eq!(s[0], BOS);
        assert!(s[1..].iter().all(|&t| (2..16).contains(&t)));
    }

    #[test]
    fn noiseless_sequences_follow_the_tables() {
        let lang = SyntheticLanguage::new(16, 0.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = lang.sample(12, &mut rng);
        for t in 2..s.len() {
            assert_eq!(s[t], lang.successor(s[t - 2], s[t - 1]));
        }
    }

    #[test]
    fn prompts_are_seeded() {
        let lang = SyntheticLanguage::new(16, 0.2, 3).unwrap();
        assert_eq!(lang.prompts(4, 6, 11), lang.prompts(4, 6, 11));
        assert_ne!(lang.prompts(4, 6, 11), lang.prompts(4, 6, 12));
    }
}
