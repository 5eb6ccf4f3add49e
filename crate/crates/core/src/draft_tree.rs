//! Backbone-expansion draft trees.
//!
//! Level 1 holds the top-k tokens of the first draft distribution; its most
//! probable token is the backbone node. Every deeper level attaches the
//! top-k tokens of its distribution under the previous backbone node, whose
//! argmax extends the backbone. Nodes are stored level by level, so parents
//! always precede children.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::target_model::{ancestor_mask, TokenId, TreeInput};
use crate::verification::Decider;

/// How a level's candidate tokens are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CandidatePolicy {
    /// The `k` most probable tokens, probability descending then id
    /// ascending.
    #[default]
    TopK,
    /// `k` tokens sampled without replacement from the draft distribution,
    /// stored in sampling order.
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftNode {
    pub token: TokenId,
    /// `None` for children of the root (the committed prefix).
    pub parent: Option<usize>,
    pub depth: usize,
    pub draft_prob: f32,
    pub on_backbone: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    nodes: Vec<DraftNode>,
    backbone: Vec<usize>,
    k: usize,
    policy: CandidatePolicy,
}

fn check_rows(q: &Tensor, k: usize) -> Result<(usize, usize)> {
    if q.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "draft distributions must be [N × V], got {:?}",
            q.shape()
        )));
    }
    let (n, v) = (q.rows(), q.cols());
    if k == 0 || k > v {
        return Err(Error::Parameter(format!("k = {k} must lie in 1..={v}")));
    }
    Ok((n, v))
}

/// Indices of the `k` largest positive entries, probability descending and
/// id ascending on ties.
pub fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| row[i] > 0.0).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Up to `k` distinct indices drawn without replacement in proportion to
/// `row`, in draw order. One `sample` decision per index.
pub fn sample_without_replacement<D: Decider + ?Sized>(row: &[f32], k: usize, decider: &mut D) -> Vec<usize> {
    let mut weights: Vec<f64> = row.iter().map(|&p| p.max(0.0) as f64).collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k && weights.iter().any(|&w| w > 0.0) {
        let i = decider.sample(&weights);
        weights[i] = 0.0;
        out.push(i);
    }
    out
}

impl DraftTree {
    /// Deterministic top-k construction.
    pub fn build_backbone_tree(q: &Tensor, k: usize) -> Result<Self> {
        let (n, _) = check_rows(q, k)?;
        Self::assemble(q, k, CandidatePolicy::TopK, |i| top_k(q.row(i), k), n)
    }

    /// Construction with `policy`; `decider` is only consulted for
    /// [`CandidatePolicy::Sampled`].
    pub fn build<D: Decider + ?Sized>(q: &Tensor, k: usize, policy: CandidatePolicy, decider: &mut D) -> Result<Self> {
        let (n, _) = check_rows(q, k)?;
        match policy {
            CandidatePolicy::TopK => Self::build_backbone_tree(q, k),
            CandidatePolicy::Sampled => Self::assemble(
                q,
                k,
                policy,
                |i| sample_without_replacement(q.row(i), k, decider),
                n,
            ),
        }
    }

    fn assemble(
        q: &Tensor,
        k: usize,
        policy: CandidatePolicy,
        mut candidates: impl FnMut(usize) -> Vec<usize>,
        levels: usize,
    ) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut backbone = Vec::with_capacity(levels);
        let mut parent = None;
        for level in 0..levels {
            let row = q.row(level);
            let picks = candidates(level);
            if picks.is_empty() {
                break;
            }
            // Highest probability among the candidates, lowest id on ties.
            let best = picks
                .iter()
                .copied()
                .reduce(|a, b| match row[b].total_cmp(&row[a]) {
                    std::cmp::Ordering::Greater => b,
                    std::cmp::Ordering::Equal if b < a => b,
                    _ => a,
                })
                .expect("non-empty");
            for &tok in &picks {
                let on_backbone = tok == best;
                if on_backbone {
                    backbone.push(nodes.len());
                }
                nodes.push(DraftNode {
                    token: tok as TokenId,
                    parent,
                    depth: level + 1,
                    draft_prob: row[tok],
                    on_backbone,
                });
            }
            parent = backbone.last().copied();
        }
        Ok(Self {
            nodes,
            backbone,
            k,
            policy,
        })
    }

    /// A tree without nodes; verifying it emits only the bonus token.
    pub fn empty() -> Self {
        Self {
            nodes: Vec::new(),
            backbone: Vec::new(),
            k: 1,
            policy: CandidatePolicy::TopK,
        }
    }

    pub fn nodes(&self) -> &[DraftNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn backbone(&self) -> &[usize] {
        &self.backbone
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn policy(&self) -> CandidatePolicy {
        self.policy
    }

    /// Children of `parent` (`None` = root) in stored order.
    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].parent == parent)
            .collect()
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    /// `mask[i][j]` is true iff `j == i` or `j` is an ancestor of `i`.
    pub fn attention_mask(&self) -> Result<Vec<Vec<bool>>> {
        ancestor_mask(&self.parents())
    }

    /// Tokens on the root→`node` path.
    pub fn linearize_path(&self, node: usize) -> Result<Vec<TokenId>> {
        Ok(self
            .path_to(node)?
            .into_iter()
            .map(|i| self.nodes[i].token)
            .collect())
    }

    /// Node indices on the root→`node` path.
    pub fn path_to(&self, node: usize) -> Result<Vec<usize>> {
        if node >= self.nodes.len() {
            return Err(Error::Range(format!(
                "node {node} of a tree with {} nodes",
                self.nodes.len()
            )));
        }
        let mut path = vec![node];
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            if path.len() > self.nodes.len() {
                return Err(Error::Structure("parent links form a cycle".into()));
            }
            path.push(p);
            cur = self.nodes[p].parent;
        }
        path.reverse();
        Ok(path)
    }

    /// Target input for verifying the tree after a root token: row 0 is the
    /// root and node `i` becomes row `i + 1`.
    pub fn verification_input(&self, root: TokenId) -> Result<TreeInput> {
        let mut tokens = Vec::with_capacity(self.nodes.len() + 1);
        let mut parents = Vec::with_capacity(self.nodes.len() + 1);
        tokens.push(root);
        parents.push(None);
        for n in &self.nodes {
            tokens.push(n.token);
            parents.push(Some(n.parent.map_or(0, |p| p + 1)));
        }
        TreeInput::from_parents(tokens, parents)
    }

    /// One line per node: index, parent (−1 for the root), depth, token,
    /// probability, backbone flag.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or(-1, |p| p as i64);
            let _ = writeln!(
                out,
                "{i}\t{parent}\t{}\t{}\t{}\t{}",
                n.depth,
                n.token,
                n.draft_prob,
                u8::from(n.on_backbone)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verification::RngDecider;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(rows: &[&[f32]]) -> Tensor {
        let v = rows[0].len();
        Tensor::matrix(rows.len(), v, rows.concat()).unwrap()
    }

    #[test]
    fn worked_example() {
        let t = DraftTree::build_backbone_tree(&q(&[&[0.5, 0.3, 0.2], &[0.1, 0.6, 0.3]]), 2).unwrap();
        let toks: Vec<_> = t.nodes().iter().map(|n| (n.token, n.parent, n.on_backbone)).collect();
        assert_eq!(
            toks,
            vec![
                (0, None, true),
                (1, None, false),
                (1, Some(0), true),
                (2, Some(0), false)
            ]
        );
        assert_eq!(t.backbone(), &[0, 2]);
    }

    #[test]
    fn k_one_is_a_chain_of_argmaxes() {
        let t = DraftTree::build_backbone_tree(&q(&[&[0.2, 0.8], &[0.6, 0.4], &[0.5, 0.5]]), 1).unwrap();
        let toks: Vec<_> = t.nodes().iter().map(|n| n.token).collect();
        assert_eq!(toks, vec![1, 0, 0]);
        assert_eq!(t.parents(), vec![None, Some(0), Some(1)]);
    }

    #[test]
    fn k_larger_than_vocab_is_rejected() {
        let err = DraftTree::build_backbone_tree(&q(&[&[0.5, 0.5]]), 3).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn zero_probability_tokens_are_skipped() {
        let t = DraftTree::build_backbone_tree(&q(&[&[0.0, 1.0, 0.0]]), 3).unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn siblings_do_not_see_each_other() {
        let t = DraftTree::build_backbone_tree(&q(&[&[0.5, 0.3, 0.2], &[0.1, 0.6, 0.3]]), 2).unwrap();
        let m = t.attention_mask().unwrap();
        assert!(!m[0][1] && !m[1][0]);
        assert!(m[3][0] && !m[3][1] && !m[3][2]);
    }

    #[test]
    fn linearized_paths() {
        let t = DraftTree::build_backbone_tree(&q(&[&[0.5, 0.3, 0.2], &[0.1, 0.6, 0.3]]), 2).unwrap();
        assert_eq!(t.linearize_path(1).unwrap(), vec![1]);
        assert_eq!(t.linearize_path(2).unwrap(), vec![0, 1]);
        assert!(matches!(t.linearize_path(4), Err(Error::Range(_))));
    }

    #[test]
    fn dump_format() {
        let t = DraftTree::build_backbone_tree(&q(&[&[0.25, 0.75]]), 2).unwrap();
        assert_eq!(t.dump(), "0\t-1\t1\t1\t0.75\t1\n1\t-1\t1\t0\t0.25\t0\n");
    }

    #[test]
    fn verification_input_prepends_root() {
        let t = DraftTree::build_backbone_tree(&q(&[&[0.5, 0.3, 0.2], &[0.1, 0.6, 0.3]]), 2).unwrap();
        let input = t.verification_input(7).unwrap();
        assert_eq!(input.tokens, vec![7, 0, 1, 1, 2]);
        assert_eq!(input.parents, vec![None, Some(0), Some(0), Some(1), Some(1)]);
    }

    #[test]
    fn sampled_policy_keeps_the_shape_rules() {
        let mut rng = RngDecider(ChaCha8Rng::seed_from_u64(3));
        let d = q(&[&[0.1, 0.2, 0.3, 0.4], &[0.4, 0.3, 0.2, 0.1]]);
        let t = DraftTree::build(&d, 3, CandidatePolicy::Sampled, &mut rng).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.backbone().len(), 2);
        for n in t.nodes() {
            assert_eq!(n.draft_prob, d.row(n.depth - 1)[n.token as usize]);
        }
    }
}
