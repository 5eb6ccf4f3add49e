mod common;

use fegl::cli::RunConfig;
use fegl::draft_tree::{CandidatePolicy, DraftTree};
use fegl::engine::{acceptance_rate_by_depth, CycleMetrics};
use fegl::numerics::{softmax, Tensor};
use fegl::target_model::{ModelConfig, TargetModel, TokenId};
use fegl::training::{Dataset, Example};
use fegl::verification::RngDecider;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn distributions(rows: usize, vocab: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.01f32..1.0, rows * vocab).prop_map(move |w| {
        let mut data = w;
        for row in data.chunks_mut(vocab) {
            let z: f32 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        Tensor::matrix(rows, vocab, data).unwrap()
    })
}

fn tree_case() -> impl Strategy<Value = (Tensor, usize, bool, u64)> {
    (1usize..=8, 16usize..=20).prop_flat_map(|(n, v)| (distributions(n, v), 1usize..=16, any::<bool>(), any::<u64>()))
}

fn build(q: &Tensor, k: usize, sampled: bool, seed: u64) -> DraftTree {
    let policy = if sampled { CandidatePolicy::Sampled } else { CandidatePolicy::TopK };
    DraftTree::build(q, k, policy, &mut RngDecider(ChaCha8Rng::seed_from_u64(seed))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tree_shape((q, k, sampled, seed) in tree_case()) {
        let n = q.rows();
        let t = build(&q, k, sampled, seed);
        prop_assert_eq!(t.backbone().len(), n);
        prop_assert_eq!(t.len(), n * k);
        for level in 1..=n {
            let at: Vec<_> = t.nodes().iter().filter(|x| x.depth == level).collect();
            prop_assert_eq!(at.iter().filter(|x| x.on_backbone).count(), 1);
            prop_assert!(at.len() - 1 < k);
            let parent = if level == 1 { None } else { Some(t.backbone()[level - 2]) };
            prop_assert!(at.iter().all(|x| x.parent == parent));
        }
        for (i, node) in t.nodes().iter().enumerate() {
            if let Some(p) = node.parent {
                prop_assert!(p < i);
            }
            prop_assert_eq!(node.draft_prob, q.row(node.depth - 1)[node.token as usize]);
        }
    }

    #[test]
    fn backbone_is_the_most_probable_candidate((q, k, sampled, seed) in tree_case()) {
        let t = build(&q, k, sampled, seed);
        for &b in t.backbone() {
            let node = &t.nodes()[b];
            for sib in t.children(node.parent) {
                prop_assert!(t.nodes()[sib].draft_prob <= node.draft_prob);
            }
        }
    }

    #[test]
    fn mask_is_the_transitive_ancestor_relation((q, k, sampled, seed) in tree_case()) {
        let t = build(&q, k, sampled, seed);
        let m = t.attention_mask().unwrap();
        let len = t.len();
        for i in 0..len {
            let path = t.path_to(i).unwrap();
            for j in 0..len {
                prop_assert_eq!(m[i][j], path.contains(&j));
                for l in 0..len {
                    if m[i][j] && m[j][l] {
                        prop_assert!(m[i][l]);
                    }
                }
            }
            let toks: Vec<TokenId> = path.iter().map(|&p| t.nodes()[p].token).collect();
            prop_assert_eq!(t.linearize_path(i).unwrap(), toks);
            prop_assert_eq!(path.len(), t.nodes()[i].depth);
        }
    }

    #[test]
    fn single_candidate_gives_a_causal_chain((q, _k, sampled, seed) in tree_case()) {
        let t = build(&q, 1, sampled, seed);
        let m = t.attention_mask().unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, &seen) in row.iter().enumerate() {
                prop_assert_eq!(seen, j <= i);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-1e4f32..1e4, 1..64)) {
        let n = logits.len();
        let p = softmax(&Tensor::matrix(1, n, logits).unwrap(), 1.0).unwrap();
        let s: f64 = p.data().iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn conditional_acceptance_rates_are_probabilities(depths in prop::collection::vec(0usize..=5, 1..40)) {
        let m: Vec<CycleMetrics> = depths
            .iter()
            .map(|&d| CycleMetrics {
                cycle: 0,
                nodes_verified: 5,
                accepted_length: d + 1,
                accepted_depth: d,
                target_calls: 1,
                drafter_calls: 1,
                wall_time: 0.0,
            })
            .collect();
        let rates = acceptance_rate_by_depth(&m, 5);
        prop_assert_eq!(rates.len(), 5);
        prop_assert!(rates[0].is_some());
        for r in rates.into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn config_dump_round_trips(
        seed in any::<u64>(),
        lr in 1e-7f32..1.0,
        temperature in 0.0f32..4.0,
        topk in 1usize..32,
        eos in prop::option::of(0u32..64),
        sampled in any::<bool>(),
    ) {
        let cfg = RunConfig {
            seed,
            lr,
            temperature,
            topk,
            eos,
            policy: if sampled { CandidatePolicy::Sampled } else { CandidatePolicy::TopK },
            ..Default::default()
        };
        let back: RunConfig = cfg.to_string().parse().unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn dataset_round_trips(lens in prop::collection::vec(1usize..6, 0..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (3, 5);
        let examples: Vec<Example> = lens
            .iter()
            .map(|&len| {
                let mut f = |n: usize| Tensor::randn(&[n], 1.0, &mut rng).into_data();
                Example {
                    prompt_len: 1,
                    tokens: (0..len as TokenId).collect(),
                    dim: d,
                    vocab: v,
                    low: f(len * d),
                    mid: f(len * d),
                    high: f(len * d),
                    teacher: f(len * v),
                }
            })
            .collect();
        let data = Dataset { examples };
        prop_assert_eq!(Dataset::decode(&data.encode()).unwrap(), data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Every tree row scores exactly like a plain forward pass over its
    /// root-to-node path.
    #[test]
    fn tree_rows_equal_path_prefills(
        prefix in prop::collection::vec(0u32..24, 1..10),
        (q, k, sampled, seed) in (1usize..=4).prop_flat_map(|n| (distributions(n, 24), 1usize..=4, any::<bool>(), any::<u64>())),
    ) {
        let cfg = ModelConfig::new(24, 16, 3, 2, 32);
        let target = TargetModel::random(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tree = build(&q, k, sampled, seed);
        let (root, context) = prefix.split_last().unwrap();
        let mut cache = target.new_cache();
        target.forward_prefill(context, &mut cache).unwrap();
        let fwd = target.forward_tree(&tree.verification_input(*root).unwrap(), &mut cache).unwrap();
        for i in 0..tree.len() {
            let mut seq = prefix.clone();
            seq.extend(tree.linearize_path(i).unwrap());
            let mut fresh = target.new_cache();
            let plain = target.forward_prefill(&seq, &mut fresh).unwrap();
            prop_assert_eq!(fwd.logits.row(i + 1), plain.logits.row(seq.len() - 1));
            prop_assert_eq!(&fwd.features[i + 1], &plain.features[seq.len() - 1]);
        }
        let mut fresh = target.new_cache();
        let plain = target.forward_prefill(&prefix, &mut fresh).unwrap();
        prop_assert_eq!(fwd.logits.row(0), plain.logits.row(prefix.len() - 1));
    }
}

#[test]
fn greedy_decoding_matches_a_cache_free_recompute() {
    let cfg = ModelConfig::new(32, 16, 3, 2, 48);
    let target = TargetModel::random(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let g = fegl::engine::generate(
        &[0, 5, 9],
        &fegl::engine::GenerationConfig {
            max_new_tokens: 20,
            mode: fegl::engine::Mode::Vanilla,
            ..Default::default()
        },
        &target,
        None,
    )
    .unwrap();
    assert_eq!(g.tokens, common::greedy_by_recompute(&target, &[0, 5, 9], 20));
}
