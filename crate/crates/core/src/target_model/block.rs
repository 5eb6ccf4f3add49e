use rand::Rng;

use super::kv_cache::KvCache;
use crate::error::Result;
use crate::numerics::{kernels, AttentionMask, Tape, Tensor, Var};

/// Pre-norm decoder block: RMS-normed multi-head self-attention and a GELU
/// feed-forward layer, each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// A [`Block`]'s parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Block {
    pub fn zeros(d: usize, ffn: usize) -> Self {
        Self {
            attn_norm: Tensor::filled(&[d], 1.0),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ffn_norm: Tensor::filled(&[d], 1.0),
            w1: Tensor::zeros(&[d, ffn]),
            b1: Tensor::zeros(&[ffn]),
            w2: Tensor::zeros(&[ffn, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    /// Gaussian init; the two projections that write into the residual
    /// stream are scaled down by `resid_scale`.
    pub fn random<R: Rng + ?Sized>(d: usize, ffn: usize, resid_scale: f32, rng: &mut R) -> Self {
        let sd = 1.0 / (d as f32).sqrt();
        let sf = 1.0 / (ffn as f32).sqrt();
        Self {
            attn_norm: Tensor::filled(&[d], 1.0),
            wq: Tensor::randn(&[d, d], sd, rng),
            wk: Tensor::randn(&[d, d], sd, rng),
            wv: Tensor::randn(&[d, d], sd, rng),
            wo: Tensor::randn(&[d, d], sd * resid_scale, rng),
            ffn_norm: Tensor::filled(&[d], 1.0),
            w1: Tensor::randn(&[d, ffn], sd, rng),
            b1: Tensor::zeros(&[ffn]),
            w2: Tensor::randn(&[ffn, d], sf * resid_scale, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.attn_norm.len()
    }

    pub fn ffn_dim(&self) -> usize {
        self.b1.len()
    }

    pub fn named<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Tensor)> {
        vec![
            (format!("{prefix}.attn_norm"), &self.attn_norm),
            (format!("{prefix}.wq"), &self.wq),
            (format!("{prefix}.wk"), &self.wk),
            (format!("{prefix}.wv"), &self.wv),
            (format!("{prefix}.wo"), &self.wo),
            (format!("{prefix}.ffn_norm"), &self.ffn_norm),
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.b1"), &self.b1),
            (format!("{prefix}.w2"), &self.w2),
            (format!("{prefix}.b2"), &self.b2),
        ]
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Tensor)> {
        vec![
            (format!("{prefix}.attn_norm"), &mut self.attn_norm),
            (format!("{prefix}.wq"), &mut self.wq),
            (format!("{prefix}.wk"), &mut self.wk),
            (format!("{prefix}.wv"), &mut self.wv),
            (format!("{prefix}.wo"), &mut self.wo),
            (format!("{prefix}.ffn_norm"), &mut self.ffn_norm),
            (format!("{prefix}.w1"), &mut self.w1),
            (format!("{prefix}.b1"), &mut self.b1),
            (format!("{prefix}.w2"), &mut self.w2),
            (format!("{prefix}.b2"), &mut self.b2),
        ]
    }

    /// Runs `rows` new rows through the block, appending their keys and
    /// values to `layer` of `cache`. `visible[i]` lists the cache rows that
    /// new row `i` attends to (its own row included).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward_cached(
        &self,
        x: &[f32],
        rows: usize,
        cache: &mut KvCache,
        layer: usize,
        visible: &[Vec<usize>],
        heads: usize,
        eps: f32,
    ) -> Vec<f32> {
        let d = self.dim();
        let ffn = self.ffn_dim();
        let (a, _) = kernels::rms_norm(x, self.attn_norm.data(), eps);
        let q = kernels::matmul(&a, self.wq.data(), rows, d, d);
        let k = kernels::matmul(&a, self.wk.data(), rows, d, d);
        let v = kernels::matmul(&a, self.wv.data(), rows, d, d);
        cache.push_rows(layer, &k, &v);
        let kv = cache.layer(layer);
        let mut att = vec![0.0f32; rows * d];
        for i in 0..rows {
            kernels::attend_row(
                &q[i * d..(i + 1) * d],
                &kv.keys,
                &kv.values,
                d,
                heads,
                &visible[i],
                &mut att[i * d..(i + 1) * d],
                None,
            );
        }
        let o = kernels::matmul(&att, self.wo.data(), rows, d, d);
        let mut h: Vec<f32> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let (b, _) = kernels::rms_norm(&h, self.ffn_norm.data(), eps);
        let mut u = kernels::matmul(&b, self.w1.data(), rows, d, ffn);
        kernels::add_row_bias(&mut u, self.b1.data());
        for v in u.iter_mut() {
            *v = kernels::gelu(*v);
        }
        let mut y = kernels::matmul(&u, self.w2.data(), rows, ffn, d);
        kernels::add_row_bias(&mut y, self.b2.data());
        for (hv, yv) in h.iter_mut().zip(&y) {
            *hv += yv;
        }
        h
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.shape().to_vec(), t.data().to_vec())
                    .expect("tensor shape is consistent")
            }
        };
        BlockVars {
            attn_norm: put(&self.attn_norm),
            wq: put(&self.wq),
            wk: put(&self.wk),
            wv: put(&self.wv),
            wo: put(&self.wo),
            ffn_norm: put(&self.ffn_norm),
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
        }
    }
}

impl BlockVars {
    pub fn vars(&self) -> [Var; 10] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]
    }

    /// Same computation as [`Block::forward_cached`] over a whole window.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        heads: usize,
        mask: AttentionMask,
        eps: f32,
    ) -> Result<Var> {
        let a = tape.rms_norm(x, self.attn_norm, eps)?;
        let q = tape.matmul(a, self.wq)?;
        let k = tape.matmul(a, self.wk)?;
        let v = tape.matmul(a, self.wv)?;
        let att = tape.attention(q, k, v, heads, mask)?;
        let o = tape.matmul(att, self.wo)?;
        let h = tape.add(x, o)?;
        let b = tape.rms_norm(h, self.ffn_norm, eps)?;
        let u = tape.matmul(b, self.w1)?;
        let u = tape.add_row_bias(u, self.b1)?;
        let u = tape.gelu(u);
        let y = tape.matmul(u, self.w2)?;
        let y = tape.add_row_bias(y, self.b2)?;
        tape.add(h, y)
    }
}
