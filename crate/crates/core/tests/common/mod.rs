//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use fegl::drafter::{Drafter, DrafterConfig};
use fegl::numerics::kernels;
use fegl::target_model::{Parameters, TargetModel, TokenId};
use fegl::training::{Example, TrainConfig};
use fegl::verification::Decider;

/// Greedy continuation recomputed from scratch at every step, without a
/// key/value cache.
pub fn greedy_by_recompute(target: &TargetModel, prompt: &[TokenId], n: usize) -> Vec<TokenId> {
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let mut cache = target.new_cache();
        let out = target.forward_prefill(&seq, &mut cache).unwrap();
        let row = out.logits.row(seq.len() - 1);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        seq.push(best as TokenId);
    }
    seq.split_off(prompt.len())
}

/// Law of `horizon` tokens sampled one at a time from the target at
/// temperature 1, enumerated over every sequence.
pub fn sequence_law(target: &TargetModel, prompt: &[TokenId], horizon: usize) -> HashMap<Vec<TokenId>, f64> {
    fn walk(
        target: &TargetModel,
        ctx: &mut Vec<TokenId>,
        prompt_len: usize,
        left: usize,
        mass: f64,
        law: &mut HashMap<Vec<TokenId>, f64>,
    ) {
        if left == 0 {
            law.insert(ctx[prompt_len..].to_vec(), mass);
            return;
        }
        let mut cache = target.new_cache();
        let out = target.forward_prefill(ctx, &mut cache).unwrap();
        let mut p = out.logits.row(ctx.len() - 1).to_vec();
        kernels::softmax_row(&mut p, 1.0);
        let z: f64 = p.iter().map(|&x| x as f64).sum();
        for (t, &px) in p.iter().enumerate() {
            ctx.push(t as TokenId);
            walk(target, ctx, prompt_len, left - 1, mass * px as f64 / z, law);
            ctx.pop();
        }
    }
    let mut law = HashMap::new();
    let mut ctx = prompt.to_vec();
    walk(target, &mut ctx, prompt.len(), horizon, 1.0, &mut law);
    law
}

/// Follows a scripted prefix of option indices, then always the first
/// option, remembering how many options each unscripted decision had.
struct Scripted {
    script: Vec<usize>,
    taken: Vec<usize>,
    arity: Vec<usize>,
    prob: f64,
}

impl Scripted {
    fn pick(&mut self, probs: Vec<f64>) -> usize {
        let t = self.taken.len();
        let choice = if t < self.script.len() { self.script[t] } else { 0 };
        self.taken.push(choice);
        self.arity.push(probs.len());
        self.prob *= probs[choice];
        choice
    }
}

impl Decider for Scripted {
    fn accept(&mut self, prob: f64) -> bool {
        let prob = prob.clamp(0.0, 1.0);
        if prob >= 1.0 {
            return true;
        }
        if prob <= 0.0 {
            return false;
        }
        self.pick(vec![prob, 1.0 - prob]) == 0
    }

    fn sample(&mut self, weights: &[f64]) -> usize {
        let z: f64 = weights.iter().sum();
        let support: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        let c = self.pick(support.iter().map(|&i| weights[i] / z).collect());
        support[c]
    }
}

/// Exact output law of a randomised procedure, found by expanding every
/// branch of its decisions.
pub fn enumerate_law(mut run: impl FnMut(&mut dyn Decider) -> Vec<TokenId>) -> HashMap<Vec<TokenId>, f64> {
    let mut law = HashMap::new();
    let mut stack = vec![Vec::new()];
    while let Some(script) = stack.pop() {
        let fixed = script.len();
        let mut d = Scripted {
            script,
            taken: Vec::new(),
            arity: Vec::new(),
            prob: 1.0,
        };
        let out = run(&mut d);
        *law.entry(out).or_insert(0.0) += d.prob;
        for t in fixed..d.taken.len() {
            for alt in 1..d.arity[t] {
                let mut s = d.taken[..t].to_vec();
                s.push(alt);
                stack.push(s);
            }
        }
    }
    law
}

pub fn tv(a: &HashMap<Vec<TokenId>, f64>, b: &HashMap<Vec<TokenId>, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, &pa) in a {
        sum += (pa - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, &pb) in b {
        if !a.contains_key(k) {
            sum += pb;
        }
    }
    0.5 * sum
}

// ---------------------------------------------------------------------------
// f64 reference of the drafter training loss.

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
    }
}

fn rms(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let d = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| v * inv * g));
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Decoder block with pre-norm attention and GELU feed-forward.
fn block(p: &[Vec<f64>], x: &[f64], rows: usize, d: usize, heads: usize, causal: bool, eps: f64) -> Vec<f64> {
    let [attn_norm, wq, wk, wv, wo, ffn_norm, w1, b1, w2, b2] = p else {
        panic!("block has ten tensors")
    };
    let f = b1.len();
    let a = rms(x, attn_norm, eps);
    let (q, k, v) = (mm(&a, wq, rows, d, d), mm(&a, wk, rows, d, d), mm(&a, wv, rows, d, d));
    let hd = d / heads;
    let mut att = vec![0.0; rows * d];
    for h in 0..heads {
        let o = h * hd;
        for i in 0..rows {
            let seen: Vec<usize> = if causal { (0..=i).collect() } else { vec![i] };
            let scores: Vec<f64> = seen
                .iter()
                .map(|&j| (0..hd).map(|t| q[i * d + o + t] * k[j * d + o + t]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, &j) in e.iter().zip(&seen) {
                for t in 0..hd {
                    att[i * d + o + t] += w / z * v[j * d + o + t];
                }
            }
        }
    }
    let proj = mm(&att, wo, rows, d, d);
    let h: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
    let bn = rms(&h, ffn_norm, eps);
    let mut u = mm(&bn, w1, rows, d, f);
    add_bias(&mut u, b1);
    u.iter_mut().for_each(|v| *v = gelu(*v));
    let mut y = mm(&u, w2, rows, f, d);
    add_bias(&mut y, b2);
    h.iter().zip(&y).map(|(a, b)| a + b).collect()
}

/// Drafter parameters as `f64`, in [`Parameters`] order.
pub fn drafter_params_f64(drafter: &Drafter) -> Vec<Vec<f64>> {
    drafter
        .named_params()
        .iter()
        .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
        .collect()
}

/// Batch loss: for every example and anchor `j` in `0..=L−N`, level `i`
/// (0-based) is scored against teacher row `j + i` and feature row
/// `j + i`; each level's terms are averaged over all anchors and weighted
/// by `decay^(N−1−i)`.
pub fn reference_loss(
    params: &[Vec<f64>],
    cfg: &DrafterConfig,
    target: &TargetModel,
    batch: &[&Example],
    tc: &TrainConfig,
) -> f64 {
    let d = cfg.hidden_dim;
    let n = cfg.depth;
    let v = target.config().vocab_size;
    let eps = cfg.rms_epsilon as f64;
    let emb: Vec<f64> = target.tok_emb.data().iter().map(|&x| x as f64).collect();
    let final_norm: Vec<f64> = target.final_norm.data().iter().map(|&x| x as f64).collect();
    let mut ce = vec![0.0; n];
    let mut feat = vec![0.0; n];
    let mut anchors = 0usize;
    for ex in batch {
        let len = ex.tokens.len();
        if len < n {
            continue;
        }
        let f64s = |x: &[f32]| x.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let (low, mid, high) = (f64s(&ex.low), f64s(&ex.mid), f64s(&ex.high));
        let mut cat = Vec::with_capacity(len * 3 * d);
        for j in 0..len {
            for src in [&low, &mid, &high] {
                if j == 0 {
                    cat.extend(std::iter::repeat_n(0.0, d));
                } else {
                    cat.extend_from_slice(&src[(j - 1) * d..j * d]);
                }
            }
        }
        let mut g = mm(&cat, &params[0], len, 3 * d, d);
        add_bias(&mut g, &params[1]);
        let mut ge = Vec::with_capacity(len * 2 * d);
        for j in 0..len {
            ge.extend_from_slice(&g[j * d..(j + 1) * d]);
            let t = ex.tokens[j] as usize;
            ge.extend_from_slice(&emb[t * d..(t + 1) * d]);
        }
        let mut x0 = mm(&ge, &params[2], len, 2 * d, d);
        add_bias(&mut x0, &params[3]);
        let aligned = f64s(ex.features(tc.align));
        let mut cur = x0.clone();
        for i in 0..n {
            let input = if cfg.parallel { &x0 } else { &cur };
            cur = block(&params[4 + 10 * i..14 + 10 * i], input, len, d, cfg.num_heads, cfg.context_attention, eps);
            let normed = rms(&cur, &final_norm, eps);
            for j in 0..=len - n {
                let row = &normed[j * d..(j + 1) * d];
                let logits: Vec<f64> = (0..v)
                    .map(|t| (0..d).map(|c| row[c] * emb[t * d + c]).sum())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                let teacher = ex.teacher_row(j + i);
                for t in 0..v {
                    if teacher[t] != 0.0 {
                        let q = ((logits[t] - mx).exp() / z).max(1e-12);
                        ce[i] -= teacher[t] as f64 * q.ln();
                    }
                }
                for c in 0..d {
                    feat[i] += smooth_l1(cur[j * d + c] - aligned[(j + i) * d + c]);
                }
            }
        }
        anchors += len - n + 1;
    }
    (0..n)
        .map(|i| {
            let w = (tc.layer_decay as f64).powi((n - 1 - i) as i32);
            w * (tc.alpha as f64 * ce[i] + tc.beta as f64 * feat[i]) / anchors as f64
        })
        .sum()
}

