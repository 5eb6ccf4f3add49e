//! Lossless acceptance over a draft tree.
//!
//! Greedy verification walks the tree following the target's argmax.
//! Stochastic verification runs multi-candidate speculative sampling: at each
//! level the children of the current node are tried in stored order, each
//! accepted with the usual `min(1, p/q)` ratio against the law it was
//! actually proposed from, and the target distribution is replaced by the
//! normalised residual after every rejection. When every child is rejected
//! (or the node is a leaf) the bonus token is drawn from what remains.

use rand::Rng;

use crate::draft_tree::{CandidatePolicy, DraftTree};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};
use crate::target_model::TokenId;

/// Source of the random decisions made during stochastic verification.
pub trait Decider {
    /// True with probability `prob` (clamped to `[0, 1]`). One draw.
    fn accept(&mut self, prob: f64) -> bool;
    /// An index drawn in proportion to `weights`. One draw.
    fn sample(&mut self, weights: &[f64]) -> usize;
}

/// [`Decider`] backed by a uniform generator.
#[derive(Debug, Clone)]
pub struct RngDecider<R>(pub R);

impl<R: Rng> Decider for RngDecider<R> {
    fn accept(&mut self, prob: f64) -> bool {
        self.0.random::<f64>() < prob
    }

    fn sample(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.0.random::<f64>() * total;
        let mut last = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last = i;
                if u < w {
                    return i;
                }
                u -= w;
            }
        }
        last
    }
}

impl<D: Decider + ?Sized> Decider for &mut D {
    fn accept(&mut self, prob: f64) -> bool {
        (**self).accept(prob)
    }

    fn sample(&mut self, weights: &[f64]) -> usize {
        (**self).sample(weights)
    }
}

/// Acceptance rule for stochastic verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AcceptanceRule {
    #[default]
    Lossless,
    /// Accepts the first child at every level. Breaks losslessness on
    /// purpose; used as a negative control.
    AlwaysAccept,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    /// Accepted draft tokens followed by the bonus token.
    pub accepted_tokens: Vec<TokenId>,
    /// Tree node indices of the accepted draft tokens, root-first.
    pub accepted_nodes: Vec<usize>,
    pub accepted_tree_depth: usize,
    /// Entry `i` is true when a node at depth `i + 1` was accepted.
    pub per_depth_accept: Vec<bool>,
}

impl VerifyOutcome {
    fn new(levels: usize) -> Self {
        Self {
            accepted_tokens: Vec::new(),
            accepted_nodes: Vec::new(),
            accepted_tree_depth: 0,
            per_depth_accept: vec![false; levels],
        }
    }

    fn take(&mut self, node: usize, token: TokenId) {
        self.accepted_nodes.push(node);
        self.accepted_tokens.push(token);
        self.per_depth_accept[self.accepted_tree_depth] = true;
        self.accepted_tree_depth += 1;
    }

    pub fn bonus(&self) -> TokenId {
        *self.accepted_tokens.last().expect("outcome always has a bonus token")
    }
}

fn levels(tree: &DraftTree) -> usize {
    tree.nodes().iter().map(|n| n.depth).max().unwrap_or(0)
}

fn check_rows(tree: &DraftTree, rows: &Tensor, prefix_len: usize) -> Result<usize> {
    let v = prefix_len;
    let n = tree.len();
    // An empty tree has no node rows to check.
    let shape_ok = n == 0 || rows.shape().len() == 2 && rows.rows() == n && rows.cols() == v;
    if !shape_ok {
        return Err(Error::dim("verify", rows.shape(), &[n, v]));
    }
    Ok(v)
}

/// Greedy acceptance: output equals vanilla greedy decoding truncated to the
/// accepted depth plus one.
pub fn verify_greedy(tree: &DraftTree, node_logits: &Tensor, prefix_logits: &[f32]) -> Result<VerifyOutcome> {
    check_rows(tree, node_logits, prefix_logits.len())?;
    let mut out = VerifyOutcome::new(levels(tree));
    let mut logits = prefix_logits;
    let mut parent = None;
    loop {
        let best = kernels::argmax(logits) as TokenId;
        let hit = tree
            .children(parent)
            .into_iter()
            .find(|&c| tree.nodes()[c].token == best);
        match hit {
            Some(c) => {
                out.take(c, best);
                logits = node_logits.row(c);
                parent = Some(c);
            }
            None => {
                out.accepted_tokens.push(best);
                return Ok(out);
            }
        }
    }
}

fn normalize(p: &mut [f64]) -> bool {
    let z: f64 = p.iter().sum();
    if z > 0.0 && z.is_finite() {
        for v in p.iter_mut() {
            *v /= z;
        }
        true
    } else {
        false
    }
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Stochastic acceptance. `node_probs[i]` and `prefix_probs` are target
/// distributions (at the sampling temperature) after the path to node `i`
/// and after the committed prefix; `draft_q` holds the `[N × V]` draft
/// distributions the tree was built from.
pub fn verify_stochastic<D: Decider + ?Sized>(
    tree: &DraftTree,
    node_probs: &Tensor,
    prefix_probs: &[f32],
    draft_q: &Tensor,
    decider: &mut D,
) -> Result<VerifyOutcome> {
    verify_stochastic_with_rule(tree, node_probs, prefix_probs, draft_q, decider, AcceptanceRule::Lossless)
}

pub fn verify_stochastic_with_rule<D: Decider + ?Sized>(
    tree: &DraftTree,
    node_probs: &Tensor,
    prefix_probs: &[f32],
    draft_q: &Tensor,
    decider: &mut D,
    rule: AcceptanceRule,
) -> Result<VerifyOutcome> {
    let v = check_rows(tree, node_probs, prefix_probs.len())?;
    let depth = levels(tree);
    if depth > 0 && (draft_q.shape().len() != 2 || draft_q.rows() < depth || draft_q.cols() != v) {
        return Err(Error::dim("verify_stochastic", draft_q.shape(), &[depth, v]));
    }
    let mut out = VerifyOutcome::new(depth);
    let mut p = to_f64(prefix_probs);
    if !normalize(&mut p) {
        return Err(Error::Parameter("prefix distribution has no mass".into()));
    }
    let mut parent = None;
    'levels: loop {
        let children = tree.children(parent);
        // Candidates were drawn from the normalised row.
        let level_q = children.first().map(|&c| {
            let mut q = to_f64(draft_q.row(tree.nodes()[c].depth - 1));
            normalize(&mut q);
            q
        });
        // Mass of the proposal law already spent on tried candidates.
        let mut tried = 0.0f64;
        let mut tried_tokens: Vec<usize> = Vec::new();
        for &c in &children {
            let node = &tree.nodes()[c];
            let tok = node.token as usize;
            if !(node.draft_prob > 0.0) {
                return Err(Error::Consistency(format!(
                    "tree node {c} carries token {tok} with zero draft probability"
                )));
            }
            let accepted = match rule {
                AcceptanceRule::AlwaysAccept => true,
                AcceptanceRule::Lossless => match tree.policy() {
                    // Deterministic candidates are point proposals.
                    CandidatePolicy::TopK => {
                        let accepted = decider.accept(p[tok].min(1.0));
                        if !accepted {
                            p[tok] = 0.0;
                            normalize(&mut p);
                        }
                        accepted
                    }
                    CandidatePolicy::Sampled => {
                        let q = level_q.as_ref().expect("level has children");
                        if !(q[tok] > 0.0) {
                            return Err(Error::Consistency(format!(
                                "draft distribution is zero at tree token {tok}"
                            )));
                        }
                        let rest = 1.0 - tried;
                        let qt = q[tok] / rest;
                        let accepted = decider.accept((p[tok] / qt).min(1.0));
                        if !accepted {
                            let mut residual: Vec<f64> = p
                                .iter()
                                .enumerate()
                                .map(|(x, &px)| {
                                    let qx = if tried_tokens.contains(&x) { 0.0 } else { q[x] / rest };
                                    (px - qx).max(0.0)
                                })
                                .collect();
                            if normalize(&mut residual) {
                                p = residual;
                            }
                            tried += q[tok];
                            tried_tokens.push(tok);
                        }
                        accepted
                    }
                },
            };
            if accepted {
                out.take(c, node.token);
                p = to_f64(node_probs.row(c));
                normalize(&mut p);
                parent = Some(c);
                continue 'levels;
            }
        }
        let bonus = decider.sample(&p) as TokenId;
        out.accepted_tokens.push(bonus);
        return Ok(out);
    }
}
