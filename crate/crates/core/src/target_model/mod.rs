//! Small decoder-only transformer used as the verification ground truth.
//!
//! Learned token and absolute position embeddings, `E` pre-norm blocks and an
//! LM head made of a final RMS norm followed by the transposed (tied)
//! embedding matrix. Block outputs at three tap points are exposed as
//! low/mid/high features for the drafter.

mod block;
mod kv_cache;
pub mod weights;

pub use block::{Block, BlockVars};
pub use kv_cache::{KvCache, LayerKv};
pub use weights::Parameters;

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{kernels, AttentionMask, Tape, Tensor, Var};

pub type TokenId = u32;

/// Which block outputs (1-based) feed the low and mid features. The high
/// feature is always the last block's output, i.e. the LM head's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureTaps {
    pub low: usize,
    pub mid: usize,
}

impl FeatureTaps {
    pub fn default_for(num_layers: usize) -> Self {
        Self {
            low: 1,
            mid: num_layers.div_ceil(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_positions: usize,
    pub rms_epsilon: f32,
    pub taps: FeatureTaps,
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        hidden_dim: usize,
        num_layers: usize,
        num_heads: usize,
        max_positions: usize,
    ) -> Self {
        Self {
            vocab_size,
            hidden_dim,
            num_layers,
            num_heads,
            max_positions,
            rms_epsilon: 1e-5,
            taps: FeatureTaps::default_for(num_layers),
        }
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.max_positions == 0 {
            return bad("vocab_size, hidden_dim and max_positions must be positive".into());
        }
        if self.num_layers < 3 {
            return bad(format!(
                "num_layers = {} but low/mid/high features need at least 3 blocks",
                self.num_layers
            ));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "num_heads = {} does not divide hidden_dim = {}",
                self.num_heads, self.hidden_dim
            ));
        }
        if !(self.rms_epsilon > 0.0) {
            return bad("rms_epsilon must be positive".into());
        }
        let FeatureTaps { low, mid } = self.taps;
        if !(1 <= low && low < mid && mid < self.num_layers) {
            return bad(format!(
                "feature taps must satisfy 1 <= low < mid < {} (got low={low}, mid={mid})",
                self.num_layers
            ));
        }
        Ok(())
    }
}

/// Low/mid/high hidden states of the target at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelFeatures {
    pub l: Tensor,
    pub m: Tensor,
    pub h: Tensor,
    pub position: usize,
}

/// Logits for every processed row plus their features.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub features: Vec<MultiLevelFeatures>,
}

/// Flat token tree for [`TargetModel::forward_tree`].
///
/// `parents[i]` is `None` for nodes that hang off the committed prefix and
/// `Some(j)` (with `j < i`) otherwise. `mask[i][j]` must be true exactly when
/// `j == i` or `j` is an ancestor of `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeInput {
    pub tokens: Vec<TokenId>,
    pub parents: Vec<Option<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl TreeInput {
    /// Builds the input with the mask derived from `parents`.
    pub fn from_parents(tokens: Vec<TokenId>, parents: Vec<Option<usize>>) -> Result<Self> {
        let mask = ancestor_mask(&parents)?;
        Ok(Self {
            tokens,
            parents,
            mask,
        })
    }

    pub fn chain(tokens: Vec<TokenId>) -> Self {
        let parents = (0..tokens.len()).map(|i| i.checked_sub(1)).collect();
        Self::from_parents(tokens, parents).expect("a chain is a valid tree")
    }
}

/// Reflexive ancestor relation of a parent-linked forest.
pub fn ancestor_mask(parents: &[Option<usize>]) -> Result<Vec<Vec<bool>>> {
    let n = parents.len();
    let mut mask = vec![vec![false; n]; n];
    for i in 0..n {
        if let Some(p) = parents[i] {
            if p >= i {
                return Err(Error::Structure(format!(
                    "node {i} has parent {p}; parents must precede children"
                )));
            }
        }
        mask[i][i] = true;
        let mut cur = parents[i];
        while let Some(p) = cur {
            mask[i][p] = true;
            cur = parents[p];
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
}

/// The target's parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct TargetVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
}

/// Tape outputs of a training-window forward pass.
#[derive(Debug, Clone)]
pub struct WindowOutput {
    pub logits: Var,
    /// Output of every block, in order.
    pub block_outputs: Vec<Var>,
}

impl TargetModel {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        Ok(Self {
            config,
            tok_emb: Tensor::zeros(&[config.vocab_size, d]),
            pos_emb: Tensor::zeros(&[config.max_positions, d]),
            blocks: (0..config.num_layers)
                .map(|_| Block::zeros(d, config.ffn_dim()))
                .collect(),
            final_norm: Tensor::filled(&[d], 1.0),
        })
    }

    pub fn random<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let resid = 1.0 / (2.0 * config.num_layers as f32).sqrt();
        let tok_emb = Tensor::randn(&[config.vocab_size, d], 0.1, rng);
        let pos_emb = Tensor::randn(&[config.max_positions, d], 0.1, rng);
        let blocks = (0..config.num_layers)
            .map(|_| Block::random(d, config.ffn_dim(), resid, rng))
            .collect();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_norm: Tensor::filled(&[d], 1.0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.num_layers, self.config.hidden_dim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(self, path)
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        weights::load(&mut m, path)?;
        Ok(m)
    }

    /// Embedding row of `token` (no position term).
    pub fn embedding(&self, token: TokenId) -> &[f32] {
        self.tok_emb.row(token as usize)
    }

    /// Final norm followed by the tied output projection.
    pub fn head_logits(&self, hidden: &[f32], rows: usize) -> Vec<f32> {
        let d = self.config.hidden_dim;
        let v = self.config.vocab_size;
        let (normed, _) = kernels::rms_norm(hidden, self.final_norm.data(), self.config.rms_epsilon);
        let et = kernels::transpose(self.tok_emb.data(), v, d);
        kernels::matmul(&normed, &et, rows, d, v)
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Range(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        tokens: &[TokenId],
        parents: &[Option<usize>],
        cache: &mut KvCache,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        if cache.speculative_len() != 0 {
            return Err(Error::State(
                "cache holds uncommitted speculative rows".into(),
            ));
        }
        if cache.num_layers() != self.config.num_layers || cache.dim() != self.config.hidden_dim {
            return Err(Error::State("cache does not match the model shape".into()));
        }
        let rows = tokens.len();
        let d = self.config.hidden_dim;
        let base = cache.committed_len();
        let mut depth = vec![0usize; rows];
        for i in 0..rows {
            depth[i] = match parents[i] {
                None => 1,
                Some(p) if p < i => depth[p] + 1,
                Some(p) => {
                    return Err(Error::Structure(format!(
                        "node {i} has parent {p}; parents must precede children"
                    )))
                }
            };
            let position = base + depth[i] - 1;
            if position >= self.config.max_positions {
                return Err(Error::Capacity {
                    position,
                    max: self.config.max_positions,
                });
            }
        }
        cache.open_speculative(parents)?;
        let visible: Vec<Vec<usize>> = (0..rows).map(|i| cache.visible_rows(i)).collect();

        let mut x = Vec::with_capacity(rows * d);
        for (i, &t) in tokens.iter().enumerate() {
            let pos = base + depth[i] - 1;
            let e = self.tok_emb.row(t as usize);
            let p = self.pos_emb.row(pos);
            x.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        let FeatureTaps { low, mid } = self.config.taps;
        let mut low_out = Vec::new();
        let mut mid_out = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward_cached(
                &x,
                rows,
                cache,
                l,
                &visible,
                self.config.num_heads,
                self.config.rms_epsilon,
            );
            if l + 1 == low {
                low_out = x.clone();
            }
            if l + 1 == mid {
                mid_out = x.clone();
            }
        }
        let logits = self.head_logits(&x, rows);
        let features = (0..rows)
            .map(|i| MultiLevelFeatures {
                l: Tensor::vector(low_out[i * d..(i + 1) * d].to_vec()),
                m: Tensor::vector(mid_out[i * d..(i + 1) * d].to_vec()),
                h: Tensor::vector(x[i * d..(i + 1) * d].to_vec()),
                position: base + depth[i] - 1,
            })
            .collect();
        let logits = if rows == 0 {
            Tensor::vector(Vec::new())
        } else {
            Tensor::matrix(rows, self.config.vocab_size, logits)?
        };
        Ok(ForwardOutput { logits, features })
    }

    /// Causal forward over `tokens` into an empty cache; every row is
    /// committed. An empty token list is accepted and yields no rows.
    pub fn forward_prefill(&self, tokens: &[TokenId], cache: &mut KvCache) -> Result<ForwardOutput> {
        if !cache.is_empty() {
            return Err(Error::State("prefill needs an empty cache".into()));
        }
        self.forward_extend(tokens, cache)
    }

    /// Appends `tokens` after the committed prefix and commits them.
    pub fn forward_extend(&self, tokens: &[TokenId], cache: &mut KvCache) -> Result<ForwardOutput> {
        let parents: Vec<Option<usize>> = (0..tokens.len()).map(|i| i.checked_sub(1)).collect();
        let out = self.run(tokens, &parents, cache)?;
        cache.commit_prefix(tokens.len())?;
        Ok(out)
    }

    /// Verifies a token tree in one pass. Each node sees the committed
    /// prefix and its own ancestors; its position is the committed length
    /// plus its depth minus one. The new rows stay speculative.
    pub fn forward_tree(&self, tree: &TreeInput, cache: &mut KvCache) -> Result<ForwardOutput> {
        let n = tree.tokens.len();
        if tree.parents.len() != n || tree.mask.len() != n {
            return Err(Error::dim(
                "forward_tree",
                &[n],
                &[tree.parents.len(), tree.mask.len()],
            ));
        }
        let expected = ancestor_mask(&tree.parents)?;
        for (i, (got, want)) in tree.mask.iter().zip(&expected).enumerate() {
            if got != want {
                return Err(Error::Mask(format!(
                    "row {i} does not match the ancestor closure of the parent links"
                )));
            }
        }
        self.run(&tree.tokens, &tree.parents, cache)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TargetVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.shape().to_vec(), t.data().to_vec())
                    .expect("tensor shape is consistent")
            }
        };
        let tok_emb = put(&self.tok_emb);
        let pos_emb = put(&self.pos_emb);
        let final_norm = put(&self.final_norm);
        let blocks = self.blocks.iter().map(|b| b.bind(tape, trainable)).collect();
        TargetVars {
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
        }
    }

    /// Causal forward over a whole window on a tape, starting at position 0.
    pub fn forward_window(
        &self,
        tape: &mut Tape,
        vars: &TargetVars,
        tokens: &[TokenId],
    ) -> Result<WindowOutput> {
        self.check_tokens(tokens)?;
        if tokens.len() > self.config.max_positions {
            return Err(Error::Capacity {
                position: tokens.len() - 1,
                max: self.config.max_positions,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let e = tape.gather(vars.tok_emb, &ids)?;
        let p = tape.gather(vars.pos_emb, &positions)?;
        let mut x = tape.add(e, p)?;
        let mut block_outputs = Vec::with_capacity(vars.blocks.len());
        for b in &vars.blocks {
            x = b.forward(
                tape,
                x,
                self.config.num_heads,
                AttentionMask::Causal,
                self.config.rms_epsilon,
            )?;
            block_outputs.push(x);
        }
        let logits = head_on_tape(tape, vars.final_norm, vars.tok_emb, x, self.config.rms_epsilon)?;
        Ok(WindowOutput {
            logits,
            block_outputs,
        })
    }

    /// Tape vars of the (trainable) parameters in [`Parameters`] order.
    pub fn param_vars(vars: &TargetVars) -> Vec<Var> {
        let mut out = vec![vars.tok_emb, vars.pos_emb];
        for b in &vars.blocks {
            out.extend(b.vars());
        }
        out.push(vars.final_norm);
        out
    }
}

/// LM head on a tape: final RMS norm then `· Eᵀ`.
pub fn head_on_tape(tape: &mut Tape, final_norm: Var, tok_emb: Var, hidden: Var, eps: f32) -> Result<Var> {
    let normed = tape.rms_norm(hidden, final_norm, eps)?;
    tape.matmul_t(normed, tok_emb)
}

impl Parameters for TargetModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("blocks.{i}")));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("blocks.{i}")));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TargetModel {
        let cfg = ModelConfig::new(32, 16, 3, 2, 64);
        TargetModel::random(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn config_rejects_two_layers() {
        let cfg = ModelConfig::new(32, 16, 2, 2, 64);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn default_taps() {
        assert_eq!(FeatureTaps::default_for(4), FeatureTaps { low: 1, mid: 2 });
        assert_eq!(FeatureTaps::default_for(5), FeatureTaps { low: 1, mid: 3 });
    }

    #[test]
    fn single_token_prefill() {
        let m = tiny();
        let mut c = m.new_cache();
        let out = m.forward_prefill(&[3], &mut c).unwrap();
        assert_eq!(out.logits.shape(), &[1, 32]);
        assert_eq!(c.committed_len(), 1);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = TargetModel::zeros(ModelConfig::new(8, 8, 3, 2, 16)).unwrap();
        let mut c = m.new_cache();
        let out = m.forward_prefill(&[1, 2, 3], &mut c).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == out.logits.data()[0]));
    }

    #[test]
    fn capacity_error_names_position() {
        let cfg = ModelConfig::new(8, 8, 3, 2, 4);
        let m = TargetModel::random(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut c = m.new_cache();
        match m.forward_prefill(&[1; 5], &mut c) {
            Err(Error::Capacity { position: 4, max: 4 }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(c.len(), 0);
    }

    #[test]
    fn bad_mask_rejected() {
        let m = tiny();
        let mut c = m.new_cache();
        m.forward_prefill(&[1, 2], &mut c).unwrap();
        let mut t = TreeInput::from_parents(vec![3, 4, 5], vec![None, Some(0), Some(1)]).unwrap();
        t.mask[2][0] = false;
        assert!(matches!(m.forward_tree(&t, &mut c), Err(Error::Mask(_))));
    }

    #[test]
    fn high_feature_is_head_input() {
        let m = tiny();
        let mut c = m.new_cache();
        let out = m.forward_prefill(&[1, 2, 3], &mut c).unwrap();
        let h = out.features[2].h.data();
        assert_eq!(m.head_logits(h, 1), out.logits.row(2));
    }

    #[test]
    fn window_forward_matches_cached_forward() {
        let m = tiny();
        let toks = [1u32, 5, 9, 2, 7];
        let mut c = m.new_cache();
        let cached = m.forward_prefill(&toks, &mut c).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let w = m.forward_window(&mut tape, &vars, &toks).unwrap();
        for (a, b) in tape.data(w.logits).iter().zip(cached.logits.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
