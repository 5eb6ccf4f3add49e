//! Teacher-generated drafter training data and the "FEGD" file format.
//!
//! Little-endian layout: magic `FEGD`, `u32` version (1), `u64` example
//! count, then per example `u32` prompt length, `u32` sequence length `L`,
//! `u32` width `d`, `u32` vocabulary `V`, `L` token ids as `u32`, and the
//! `f32` arrays low `[L×d]`, mid `[L×d]`, high `[L×d]`, teacher `[L×V]`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::AlignFeature;
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::target_model::weights::Reader;
use crate::target_model::{TargetModel, TokenId};
use crate::verification::{Decider, RngDecider};

pub const MAGIC: &[u8; 4] = b"FEGD";
pub const VERSION: u32 = 1;

/// One prompt plus sampled continuation with the target's features and
/// next-token distributions at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prompt_len: usize,
    pub tokens: Vec<TokenId>,
    pub dim: usize,
    pub vocab: usize,
    pub low: Vec<f32>,
    pub mid: Vec<f32>,
    pub high: Vec<f32>,
    /// Row `t` is the target's distribution for the token after position `t`.
    pub teacher: Vec<f32>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn features(&self, which: AlignFeature) -> &[f32] {
        match which {
            AlignFeature::Low => &self.low,
            AlignFeature::Mid => &self.mid,
            AlignFeature::High => &self.high,
        }
    }

    pub fn teacher_row(&self, t: usize) -> &[f32] {
        &self.teacher[t * self.vocab..(t + 1) * self.vocab]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.examples.len() as u64).to_le_bytes());
        let put_f32s = |buf: &mut Vec<u8>, xs: &[f32]| {
            for v in xs {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        for e in &self.examples {
            for n in [e.prompt_len, e.tokens.len(), e.dim, e.vocab] {
                buf.extend_from_slice(&(n as u32).to_le_bytes());
            }
            for t in &e.tokens {
                buf.extend_from_slice(&t.to_le_bytes());
            }
            put_f32s(&mut buf, &e.low);
            put_f32s(&mut buf, &e.mid);
            put_f32s(&mut buf, &e.high);
            put_f32s(&mut buf, &e.teacher);
        }
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected FEGD".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let count = r.u64()?;
        let mut examples = Vec::new();
        for _ in 0..count {
            let prompt_len = r.u32()? as usize;
            let len = r.u32()? as usize;
            let dim = r.u32()? as usize;
            let vocab = r.u32()? as usize;
            if prompt_len > len {
                return Err(r.err(format!("prompt length {prompt_len} exceeds sequence length {len}")));
            }
            let mut tokens = Vec::with_capacity(len);
            for _ in 0..len {
                tokens.push(r.u32()?);
            }
            let ld = len
                .checked_mul(dim)
                .ok_or_else(|| r.err("feature size overflows"))?;
            let lv = len
                .checked_mul(vocab)
                .ok_or_else(|| r.err("teacher size overflows"))?;
            examples.push(Example {
                prompt_len,
                tokens,
                dim,
                vocab,
                low: r.f32s(ld)?,
                mid: r.f32s(ld)?,
                high: r.f32s(ld)?,
                teacher: r.f32s(lv)?,
            });
        }
        if !r.at_end() {
            return Err(r.err("trailing bytes after last example"));
        }
        Ok(Self { examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(Error::io_at(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(Error::io_at(path))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataGenConfig {
    /// Tokens sampled after each prompt.
    pub continuation_len: usize,
    /// Drafter depth; continuations shorter than `depth + 1` are skipped.
    pub depth: usize,
    pub temperature: f32,
    pub eos: Option<TokenId>,
    pub seed: u64,
}

/// Samples a continuation for every prompt (independent random stream per
/// prompt) and records the target's features and distributions over the
/// full sequence. Returns the dataset and the number of skipped prompts.
pub fn generate_training_data(
    target: &TargetModel,
    prompts: &[Vec<TokenId>],
    config: &DataGenConfig,
) -> Result<(Dataset, usize)> {
    let max = target.config().max_positions;
    let results: Vec<Result<Option<Example>>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            if prompt.is_empty() {
                return Err(Error::Parameter(format!("prompt {i} is empty")));
            }
            if prompt.len() + config.continuation_len > max {
                return Err(Error::Capacity {
                    position: prompt.len() + config.continuation_len - 1,
                    max,
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let mut decider = RngDecider(rng);
            let cont = sample_continuation(target, prompt, config, &mut decider)?;
            if cont.len() < config.depth + 1 {
                return Ok(None);
            }
            let mut tokens = prompt.clone();
            tokens.extend_from_slice(&cont);
            Ok(Some(record(target, prompt.len(), tokens)?))
        })
        .collect();
    let mut examples = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(e) => examples.push(e),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} prompts with short continuations");
    }
    Ok((Dataset { examples }, skipped))
}

fn sample_continuation<D: Decider>(
    target: &TargetModel,
    prompt: &[TokenId],
    config: &DataGenConfig,
    decider: &mut D,
) -> Result<Vec<TokenId>> {
    let v = target.config().vocab_size;
    let mut cache = target.new_cache();
    let out = target.forward_prefill(prompt, &mut cache)?;
    let mut logits = out.logits.row(prompt.len() - 1).to_vec();
    let mut cont = Vec::with_capacity(config.continuation_len);
    while cont.len() < config.continuation_len {
        kernels::softmax_row(&mut logits, config.temperature);
        let w: Vec<f64> = logits.iter().map(|&p| p as f64).collect();
        let tok = decider.sample(&w) as TokenId;
        cont.push(tok);
        if Some(tok) == config.eos || cont.len() == config.continuation_len {
            break;
        }
        let step = target.forward_extend(&[tok], &mut cache)?;
        logits = step.logits.data()[..v].to_vec();
    }
    Ok(cont)
}

fn record(target: &TargetModel, prompt_len: usize, tokens: Vec<TokenId>) -> Result<Example> {
    let mut cache = target.new_cache();
    let out = target.forward_prefill(&tokens, &mut cache)?;
    let mut teacher = out.logits.into_data();
    for row in teacher.chunks_mut(target.config().vocab_size) {
        kernels::softmax_row(row, 1.0);
    }
    let flat = |pick: fn(&crate::target_model::MultiLevelFeatures) -> &[f32]| -> Vec<f32> {
        out.features.iter().flat_map(|f| pick(f).to_vec()).collect()
    };
    Ok(Example {
        prompt_len,
        dim: target.config().hidden_dim,
        vocab: target.config().vocab_size,
        low: flat(|f| f.l.data()),
        mid: flat(|f| f.m.data()),
        high: flat(|f| f.h.data()),
        teacher,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target_model::ModelConfig;

    fn target() -> TargetModel {
        let cfg = ModelConfig::new(16, 8, 3, 2, 32);
        TargetModel::random(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    fn cfg() -> DataGenConfig {
        DataGenConfig {
            continuation_len: 6,
            depth: 3,
            temperature: 1.0,
            eos: None,
            seed: 9,
        }
    }

    #[test]
    fn empty_dataset_has_a_valid_header() {
        let buf = Dataset::default().encode();
        assert_eq!(buf.len(), 16);
        assert_eq!(&buf[..4], b"FEGD");
        assert!(Dataset::decode(&buf).unwrap().is_empty());
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let t = target();
        let prompts = vec![vec![0, 3, 4], vec![0, 7]];
        let (a, skipped) = generate_training_data(&t, &prompts, &cfg()).unwrap();
        let (b, _) = generate_training_data(&t, &prompts, &cfg()).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(a.encode(), b.encode());
        assert_eq!(Dataset::decode(&a.encode()).unwrap(), a);
        assert_eq!(a.examples[0].len(), 9);
    }

    #[test]
    fn short_continuations_are_skipped() {
        let t = target();
        let mut c = cfg();
        c.continuation_len = 3;
        let (d, skipped) = generate_training_data(&t, &[vec![0, 1]], &c).unwrap();
        assert_eq!((d.len(), skipped), (0, 1));
    }

    #[test]
    fn truncated_dataset_is_a_format_error() {
        let t = target();
        let (d, _) = generate_training_data(&t, &[vec![0, 1]], &cfg()).unwrap();
        let buf = d.encode();
        assert!(matches!(
            Dataset::decode(&buf[..buf.len() - 1]),
            Err(Error::Format { .. })
        ));
    }
}
