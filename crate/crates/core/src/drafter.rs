//! Cascaded drafter: `N` serial decoder levels that turn one fused input row
//! into `N` next-token distributions in a single pass.
//!
//! Row `j` of the drafter stream combines the fused target features of
//! position `j − 1` (zero features for position 0) with the embedding of the
//! token at position `j`. Level `i` of the last row predicts the token `i`
//! steps after that row's token. Each level keeps its own key/value cache of
//! every row it has processed, and the LM head is borrowed from the target.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{kernels, AttentionMask, Tape, Tensor, Var};
use crate::target_model::{
    head_on_tape, weights, Block, BlockVars, KvCache, ModelConfig, MultiLevelFeatures, Parameters,
    TargetModel, TokenId,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrafterConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub rms_epsilon: f32,
    /// Every level reads the fused input directly instead of the previous
    /// level's output.
    pub parallel: bool,
    /// Levels attend over their cache of earlier rows; when false each row
    /// only sees itself.
    pub context_attention: bool,
}

impl DrafterConfig {
    /// Defaults matched to a target's width.
    pub fn for_target(target: &ModelConfig, depth: usize) -> Self {
        Self {
            depth,
            hidden_dim: target.hidden_dim,
            num_heads: target.num_heads,
            ffn_dim: 4 * target.hidden_dim,
            rms_epsilon: target.rms_epsilon,
            parallel: false,
            context_attention: true,
        }
    }

    pub fn validate(&self, target: &ModelConfig) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("drafter depth must be at least 1".into()));
        }
        if self.hidden_dim != target.hidden_dim {
            return Err(Error::Config(format!(
                "drafter hidden_dim {} differs from target hidden_dim {}",
                self.hidden_dim, target.hidden_dim
            )));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "drafter num_heads = {} does not divide hidden_dim = {}",
                self.num_heads, self.hidden_dim
            )));
        }
        if self.ffn_dim == 0 || !(self.rms_epsilon > 0.0) {
            return Err(Error::Config("drafter ffn_dim and rms_epsilon must be positive".into()));
        }
        Ok(())
    }

    fn mask(&self) -> AttentionMask {
        if self.context_attention {
            AttentionMask::Causal
        } else {
            AttentionMask::SelfOnly
        }
    }
}

/// One row of drafter input.
#[derive(Debug, Clone, Copy)]
pub struct DraftInput<'a> {
    /// Target features of the previous position; `None` at position 0.
    pub prev_features: Option<&'a MultiLevelFeatures>,
    pub token: TokenId,
}

/// Per-level key/value caches of a generation session.
#[derive(Debug, Clone, PartialEq)]
pub struct DrafterState {
    levels: Vec<KvCache>,
}

impl DrafterState {
    /// Rows processed so far (identical across levels).
    pub fn len(&self) -> usize {
        self.levels[0].committed_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn level(&self, i: usize) -> &KvCache {
        &self.levels[i]
    }
}

/// Result of one [`Drafter::draft_forward`] call.
#[derive(Debug, Clone)]
pub struct DraftOutput {
    /// Level outputs of the last row, level 1 first.
    pub hidden: Vec<Tensor>,
    /// `[N × V]` head logits of the last row.
    pub logits: Tensor,
    /// `[N × V]` softmax of `logits` at temperature 1.
    pub q: Tensor,
    pub level_evals: usize,
    pub head_projections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drafter {
    config: DrafterConfig,
    pub fc_fuse_w: Tensor,
    pub fc_fuse_b: Tensor,
    pub fc_in_w: Tensor,
    pub fc_in_b: Tensor,
    pub levels: Vec<Block>,
}

/// Trainable drafter parameters on a tape.
#[derive(Debug, Clone)]
pub struct DrafterVars {
    pub fc_fuse_w: Var,
    pub fc_fuse_b: Var,
    pub fc_in_w: Var,
    pub fc_in_b: Var,
    pub levels: Vec<BlockVars>,
}

impl DrafterVars {
    /// Vars in [`Parameters`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.fc_fuse_w, self.fc_fuse_b, self.fc_in_w, self.fc_in_b];
        for l in &self.levels {
            out.extend(l.vars());
        }
        out
    }
}

/// Frozen target pieces the drafter reads on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FrozenHead {
    pub tok_emb: Var,
    pub final_norm: Var,
    pub eps: f32,
}

impl FrozenHead {
    pub fn bind(tape: &mut Tape, target: &TargetModel) -> Result<Self> {
        Ok(Self {
            tok_emb: tape.constant(target.tok_emb.shape().to_vec(), target.tok_emb.data().to_vec())?,
            final_norm: tape.constant(
                target.final_norm.shape().to_vec(),
                target.final_norm.data().to_vec(),
            )?,
            eps: target.config().rms_epsilon,
        })
    }
}

/// Tape inputs for one training sequence.
#[derive(Debug, Clone, Copy)]
pub struct WindowInput<'a> {
    pub tokens: &'a [TokenId],
    /// `[L × d]` low/mid/high target features, one row per position.
    pub low: &'a [f32],
    pub mid: &'a [f32],
    pub high: &'a [f32],
}

impl Drafter {
    pub fn zeros(config: DrafterConfig) -> Self {
        let d = config.hidden_dim;
        Self {
            config,
            fc_fuse_w: Tensor::zeros(&[3 * d, d]),
            fc_fuse_b: Tensor::zeros(&[d]),
            fc_in_w: Tensor::zeros(&[2 * d, d]),
            fc_in_b: Tensor::zeros(&[d]),
            levels: (0..config.depth).map(|_| Block::zeros(d, config.ffn_dim)).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(config: DrafterConfig, rng: &mut R) -> Self {
        let d = config.hidden_dim;
        let resid = 1.0 / (2.0 * config.depth as f32).sqrt();
        Self {
            config,
            fc_fuse_w: Tensor::randn(&[3 * d, d], 1.0 / (3.0 * d as f32).sqrt(), rng),
            fc_fuse_b: Tensor::zeros(&[d]),
            fc_in_w: Tensor::randn(&[2 * d, d], 1.0 / (2.0 * d as f32).sqrt(), rng),
            fc_in_b: Tensor::zeros(&[d]),
            levels: (0..config.depth)
                .map(|_| Block::random(d, config.ffn_dim, resid, rng))
                .collect(),
        }
    }

    pub fn config(&self) -> &DrafterConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(self, path)
    }

    pub fn load(config: DrafterConfig, path: &Path) -> Result<Self> {
        let mut d = Self::zeros(config);
        weights::load(&mut d, path)?;
        Ok(d)
    }

    pub fn new_state(&self) -> DrafterState {
        DrafterState {
            levels: (0..self.config.depth)
                .map(|_| KvCache::new(1, self.config.hidden_dim))
                .collect(),
        }
    }

    /// `FC_fuse(concat(l, m, h))`.
    pub fn fuse_features(&self, l: &[f32], m: &[f32], h: &[f32]) -> Result<Vec<f32>> {
        let d = self.config.hidden_dim;
        for x in [l, m, h] {
            if x.len() != d {
                return Err(Error::dim("fuse_features", &[x.len()], &[d]));
            }
        }
        let mut cat = Vec::with_capacity(3 * d);
        cat.extend_from_slice(l);
        cat.extend_from_slice(m);
        cat.extend_from_slice(h);
        let mut g = kernels::matmul(&cat, self.fc_fuse_w.data(), 1, 3 * d, d);
        kernels::add_row_bias(&mut g, self.fc_fuse_b.data());
        Ok(g)
    }

    /// `FC_in(concat(g, e))` for every row.
    fn input_rows(&self, target: &TargetModel, inputs: &[DraftInput]) -> Result<Vec<f32>> {
        let d = self.config.hidden_dim;
        let zeros = vec![0.0f32; d];
        let mut cat = Vec::with_capacity(inputs.len() * 2 * d);
        for inp in inputs {
            if inp.token as usize >= target.config().vocab_size {
                return Err(Error::Range(format!("token {} outside vocabulary", inp.token)));
            }
            let g = match inp.prev_features {
                Some(f) => self.fuse_features(f.l.data(), f.m.data(), f.h.data())?,
                None => self.fuse_features(&zeros, &zeros, &zeros)?,
            };
            cat.extend_from_slice(&g);
            cat.extend_from_slice(target.embedding(inp.token));
        }
        let mut x = kernels::matmul(&cat, self.fc_in_w.data(), inputs.len(), 2 * d, d);
        kernels::add_row_bias(&mut x, self.fc_in_b.data());
        Ok(x)
    }

    /// Runs rows through every level, appending them to the level caches.
    /// Returns each level's output for all rows.
    fn run_levels(&self, x0: &[f32], rows: usize, state: &mut DrafterState) -> Result<Vec<Vec<f32>>> {
        let base = state.len();
        let visible: Vec<Vec<usize>> = (0..rows)
            .map(|r| {
                if self.config.context_attention {
                    (0..=base + r).collect()
                } else {
                    vec![base + r]
                }
            })
            .collect();
        let chain: Vec<Option<usize>> = (0..rows).map(|r| r.checked_sub(1)).collect();
        let mut outs: Vec<Vec<f32>> = Vec::with_capacity(self.config.depth);
        for (i, block) in self.levels.iter().enumerate() {
            let input = match outs.last() {
                Some(prev) if !self.config.parallel => prev.as_slice(),
                _ => x0,
            };
            let cache = &mut state.levels[i];
            cache.open_speculative(&chain)?;
            let h = block.forward_cached(
                input,
                rows,
                cache,
                0,
                &visible,
                self.config.num_heads,
                self.config.rms_epsilon,
            );
            cache.commit_prefix(rows)?;
            outs.push(h);
        }
        Ok(outs)
    }

    fn check_state(&self, state: &DrafterState) -> Result<()> {
        if state.levels.len() != self.config.depth {
            return Err(Error::State(format!(
                "state has {} levels, drafter has {}",
                state.levels.len(),
                self.config.depth
            )));
        }
        Ok(())
    }

    /// Appends context rows without producing distributions. Afterwards the
    /// level caches must hold exactly `target_committed` rows.
    pub fn prefill(
        &self,
        target: &TargetModel,
        inputs: &[DraftInput],
        state: &mut DrafterState,
        target_committed: usize,
    ) -> Result<()> {
        self.check_state(state)?;
        if state.len() + inputs.len() != target_committed {
            return Err(Error::State(format!(
                "prefill of {} rows onto {} leaves the drafter misaligned with {} target rows",
                inputs.len(),
                state.len(),
                target_committed
            )));
        }
        if inputs.is_empty() {
            return Ok(());
        }
        let x0 = self.input_rows(target, inputs)?;
        self.run_levels(&x0, inputs.len(), state)?;
        Ok(())
    }

    /// One drafting pass. `inputs` are the rows not yet seen by the drafter,
    /// ending with the pending (verified but not yet target-processed) token,
    /// so the caches end one row ahead of `target_committed`.
    pub fn draft_forward(
        &self,
        target: &TargetModel,
        inputs: &[DraftInput],
        state: &mut DrafterState,
        target_committed: usize,
    ) -> Result<DraftOutput> {
        self.check_state(state)?;
        if inputs.is_empty() || state.len() + inputs.len() != target_committed + 1 {
            return Err(Error::State(format!(
                "{} new rows onto {} cached rows do not end one past {} target rows",
                inputs.len(),
                state.len(),
                target_committed
            )));
        }
        let rows = inputs.len();
        let d = self.config.hidden_dim;
        let x0 = self.input_rows(target, inputs)?;
        let outs = self.run_levels(&x0, rows, state)?;
        let mut last = Vec::with_capacity(self.config.depth * d);
        let mut hidden = Vec::with_capacity(self.config.depth);
        for h in &outs {
            let row = &h[(rows - 1) * d..rows * d];
            last.extend_from_slice(row);
            hidden.push(Tensor::vector(row.to_vec()));
        }
        let logits = target.head_logits(&last, self.config.depth);
        let mut q = logits.clone();
        for row in q.chunks_mut(target.config().vocab_size) {
            kernels::softmax_row(row, 1.0);
        }
        let v = target.config().vocab_size;
        Ok(DraftOutput {
            hidden,
            logits: Tensor::matrix(self.config.depth, v, logits)?,
            q: Tensor::matrix(self.config.depth, v, q)?,
            level_evals: outs.len(),
            head_projections: self.config.depth,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> DrafterVars {
        DrafterVars {
            fc_fuse_w: tape.param(&self.fc_fuse_w),
            fc_fuse_b: tape.param(&self.fc_fuse_b),
            fc_in_w: tape.param(&self.fc_in_w),
            fc_in_b: tape.param(&self.fc_in_b),
            levels: self.levels.iter().map(|b| b.bind(tape, true)).collect(),
        }
    }

    /// Whole-sequence cascade on a tape. Returns the `[L × d]` output of each
    /// level and its `[L × V]` head distribution.
    pub fn forward_window(
        &self,
        tape: &mut Tape,
        vars: &DrafterVars,
        head: &FrozenHead,
        input: &WindowInput,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let d = self.config.hidden_dim;
        let len = input.tokens.len();
        for x in [input.low, input.mid, input.high] {
            if x.len() != len * d {
                return Err(Error::dim("forward_window", &[x.len()], &[len * d]));
            }
        }
        // Features shifted down one row, zeros in front of position 0.
        let shifted = |x: &[f32]| {
            let mut v = vec![0.0f32; d];
            v.extend_from_slice(&x[..(len - 1) * d]);
            v
        };
        let l = tape.constant(vec![len, d], shifted(input.low))?;
        let m = tape.constant(vec![len, d], shifted(input.mid))?;
        let h = tape.constant(vec![len, d], shifted(input.high))?;
        let lm = tape.concat_cols(l, m)?;
        let lmh = tape.concat_cols(lm, h)?;
        let g = tape.matmul(lmh, vars.fc_fuse_w)?;
        let g = tape.add_row_bias(g, vars.fc_fuse_b)?;
        let ids: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
        let e = tape.gather(head.tok_emb, &ids)?;
        let ge = tape.concat_cols(g, e)?;
        let x0 = tape.matmul(ge, vars.fc_in_w)?;
        let x0 = tape.add_row_bias(x0, vars.fc_in_b)?;

        let mask = self.config.mask();
        let mut hidden = Vec::with_capacity(self.config.depth);
        let mut probs = Vec::with_capacity(self.config.depth);
        let mut cur = x0;
        for lv in &vars.levels {
            let input = if self.config.parallel { x0 } else { cur };
            cur = lv.forward(tape, input, self.config.num_heads, mask, self.config.rms_epsilon)?;
            let logits = head_on_tape(tape, head.final_norm, head.tok_emb, cur, head.eps)?;
            probs.push(tape.softmax(logits, 1.0)?);
            hidden.push(cur);
        }
        Ok((hidden, probs))
    }

    /// Copies trained values back from a tape.
    pub fn read_back(&mut self, tape: &Tape, vars: &DrafterVars) {
        for ((_, slot), v) in self.named_params_mut().into_iter().zip(vars.all()) {
            slot.data_mut().copy_from_slice(tape.data(v));
        }
    }
}

impl Parameters for Drafter {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("fc_fuse.weight".to_string(), &self.fc_fuse_w),
            ("fc_fuse.bias".to_string(), &self.fc_fuse_b),
            ("fc_in.weight".to_string(), &self.fc_in_w),
            ("fc_in.bias".to_string(), &self.fc_in_b),
        ];
        for (i, b) in self.levels.iter().enumerate() {
            out.extend(b.named(&format!("cascade.{i}")));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("fc_fuse.weight".to_string(), &mut self.fc_fuse_w),
            ("fc_fuse.bias".to_string(), &mut self.fc_fuse_b),
            ("fc_in.weight".to_string(), &mut self.fc_in_w),
            ("fc_in.bias".to_string(), &mut self.fc_in_b),
        ];
        for (i, b) in self.levels.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("cascade.{i}")));
        }
        out
    }
}
