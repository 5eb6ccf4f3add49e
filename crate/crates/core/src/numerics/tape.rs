//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Values live on the tape; parameters are copied in as leaves at the start
//! of a step and their gradients copied back out after [`Tape::backward`].

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which rows a query row of [`Tape::attention`] may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMask {
    /// Row `t` sees rows `0..=t`.
    Causal,
    /// Row `t` sees only itself.
    SelfOnly,
}

impl AttentionMask {
    pub fn visible(self, t: usize) -> std::ops::RangeInclusive<usize> {
        match self {
            AttentionMask::Causal => 0..=t,
            AttentionMask::SelfOnly => t..=t,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRowBias { x: Var, bias: Var },
    Scale { x: Var, factor: f32 },
    Gelu { x: Var },
    RmsNorm { x: Var, gain: Var, inv: Vec<f32> },
    Softmax { x: Var, temperature: f32 },
    CrossEntropy { p: Var, q: Var },
    SmoothL1 { x: Var },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Vec<f32> },
    ConcatCols { a: Var, b: Var, ca: usize, cb: usize },
    Gather { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: AttentionMask, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    let r = if shape.len() <= 1 {
        1
    } else {
        shape[..shape.len() - 1].iter().product()
    };
    (r, c)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it participates in differentiation iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<f32> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Shape(format!("expected scalar, got {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let value = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// `a · bᵀ` where `b` is `[n × k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (n, k2) = self.rc(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(Error::dim("matmul_t", self.shape(a), self.shape(b)));
        }
        let bt = kernels::transpose(self.data(b), n, k);
        let value = kernels::matmul(self.data(a), &bt, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, rg, Op::MatMulT { a, b, m, k, n }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Mul { a, b }))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.rc(x);
        if self.data(bias).len() != c {
            return Err(Error::dim("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let mut value = self.data(x).to_vec();
        kernels::add_row_bias(&mut value, self.data(bias));
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), value, rg, Op::AddRowBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let value = self.data(x).iter().map(|v| v * factor).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, rg, Op::Scale { x, factor })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, rg, Op::Gelu { x })
    }

    /// Row-wise RMS normalisation with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let (_, c) = self.rc(x);
        if self.data(gain).len() != c {
            return Err(Error::dim("rms_norm", self.shape(x), self.shape(gain)));
        }
        let (value, inv) = kernels::rms_norm(self.data(x), self.data(gain), eps);
        let rg = self.rg(&[x, gain]);
        Ok(self.push(self.shape(x).to_vec(), value, rg, Op::RmsNorm { x, gain, inv }))
    }

    /// Softmax along the last axis of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: f32) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let (_, c) = self.rc(x);
        let mut value = self.data(x).to_vec();
        for row in value.chunks_mut(c) {
            kernels::softmax_row(row, temperature);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, rg, Op::Softmax { x, temperature }))
    }

    /// Row-wise `−Σ_k p_k log max(q_k, 1e-12)`; zero-probability terms of
    /// `p` contribute nothing. Output has one entry per row.
    pub fn cross_entropy(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("cross_entropy", p, q)?;
        let (r, c) = self.rc(p);
        let pd = self.data(p);
        let qd = self.data(q);
        let mut value = Vec::with_capacity(r);
        for i in 0..r {
            let mut acc = 0.0f32;
            for k in 0..c {
                let pk = pd[i * c + k];
                if pk != 0.0 {
                    acc -= pk * qd[i * c + k].max(kernels::LOG_CLAMP).ln();
                }
            }
            value.push(acc);
        }
        let rg = self.rg(&[p, q]);
        Ok(self.push(vec![r], value, rg, Op::CrossEntropy { p, q }))
    }

    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let value = self.data(x).iter().map(|&v| kernels::smooth_l1(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, rg, Op::SmoothL1 { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = 0.0f32;
        for v in self.data(x) {
            acc += v;
        }
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![acc], rg, Op::Sum { x })
    }

    /// `Σ_i weights_i · x_i` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        if weights.len() != self.data(x).len() {
            return Err(Error::dim("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let mut acc = 0.0f32;
        for (v, w) in self.data(x).iter().zip(&weights) {
            acc += v * w;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![acc], rg, Op::WeightedSum { x, weights }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.rc(a);
        let (rb, cb) = self.rc(b);
        if ra != rb {
            return Err(Error::dim("concat_cols", self.shape(a), self.shape(b)));
        }
        let mut value = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            value.extend_from_slice(&self.data(a)[i * ca..(i + 1) * ca]);
            value.extend_from_slice(&self.data(b)[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![ra, ca + cb], value, rg, Op::ConcatCols { a, b, ca, cb }))
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(table);
        let mut value = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Range(format!("row {id} of table with {r} rows")));
            }
            value.extend_from_slice(&self.data(table)[id * c..(id + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), c],
            value,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention over rows of `q`, `k`, `v`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttentionMask,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (t, d) = self.rc(q);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Parameter(format!("{heads} heads do not divide width {d}")));
        }
        let mut value = vec![0.0f32; t * d];
        let mut probs = Vec::new();
        let mut visible = Vec::with_capacity(t);
        for row in 0..t {
            visible.clear();
            visible.extend(mask.visible(row));
            kernels::attend_row(
                &self.data(q)[row * d..(row + 1) * d],
                self.data(k),
                self.data(v),
                d,
                heads,
                &visible,
                &mut value[row * d..(row + 1) * d],
                Some(&mut probs),
            );
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![t, d],
            value,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
        ))
    }

    /// Clears every gradient so `backward` may run again.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Propagates `∂loss/∂·` to every node that requires grad, visiting the
    /// recorded operations in exact reverse order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape("backward already ran; call zero_grads first".into()));
        }
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Tape(format!("unknown var {}", loss.0)))?;
        if node.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Err(Error::Tape("loss is not connected to any parameter".into()));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (var, delta) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[var.0].grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[idx];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if want(a) {
                    let bt = kernels::transpose(self.data(b), k, n);
                    out.push((a, kernels::matmul(g, &bt, m, n, k)));
                }
                if want(b) {
                    let at = kernels::transpose(self.data(a), m, k);
                    out.push((b, kernels::matmul(&at, g, k, m, n)));
                }
            }
            &Op::MatMulT { a, b, m, k, n } => {
                // c = a · bᵀ, b is [n × k]
                if want(a) {
                    out.push((a, kernels::matmul(g, self.data(b), m, n, k)));
                }
                if want(b) {
                    let gt = kernels::transpose(g, m, n);
                    out.push((b, kernels::matmul(&gt, self.data(a), n, m, k)));
                }
            }
            &Op::Add { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|v| -v).collect()));
            }
            &Op::Mul { a, b } => {
                if want(a) {
                    out.push((a, g.iter().zip(self.data(b)).map(|(x, y)| x * y).collect()));
                }
                if want(b) {
                    out.push((b, g.iter().zip(self.data(a)).map(|(x, y)| x * y).collect()));
                }
            }
            &Op::AddRowBias { x, bias } => {
                out.push((x, g.to_vec()));
                if want(bias) {
                    let c = self.data(bias).len();
                    let mut gb = vec![0.0f32; c];
                    for row in g.chunks(c) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    out.push((bias, gb));
                }
            }
            &Op::Scale { x, factor } => {
                out.push((x, g.iter().map(|v| v * factor).collect()));
            }
            &Op::Gelu { x } => {
                let gx = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                out.push((x, gx));
            }
            Op::RmsNorm { x, gain, inv } => {
                let (x, gain) = (*x, *gain);
                let xd = self.data(x);
                let gd = self.data(gain);
                let c = gd.len();
                let mut gx = vec![0.0f32; xd.len()];
                let mut gg = vec![0.0f32; c];
                for (r, &s) in inv.iter().enumerate() {
                    let xr = &xd[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    // y = x·s·γ with s = (mean(x²)+ε)^(-1/2)
                    let mut dot = 0.0f32;
                    for j in 0..c {
                        dot += gr[j] * gd[j] * xr[j];
                        gg[j] += gr[j] * xr[j] * s;
                    }
                    let coef = s * s * s * dot / c as f32;
                    for j in 0..c {
                        gx[r * c + j] = gr[j] * gd[j] * s - xr[j] * coef;
                    }
                }
                if want(x) {
                    out.push((x, gx));
                }
                if want(gain) {
                    out.push((gain, gg));
                }
            }
            &Op::Softmax { x, temperature } => {
                let y = &node.value;
                let c = *node.shape.last().unwrap_or(&1);
                let mut gx = vec![0.0f32; y.len()];
                for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let mut dot = 0.0f32;
                    for (a, b) in yr.iter().zip(gr) {
                        dot += a * b;
                    }
                    for ((o, a), b) in or.iter_mut().zip(yr).zip(gr) {
                        *o = a * (b - dot) / temperature;
                    }
                }
                out.push((x, gx));
            }
            &Op::CrossEntropy { p, q } => {
                let c = *self.shape(p).last().unwrap_or(&1);
                let pd = self.data(p);
                let qd = self.data(q);
                if want(q) {
                    let mut gq = vec![0.0f32; qd.len()];
                    for (i, gi) in g.iter().enumerate() {
                        for k in 0..c {
                            let j = i * c + k;
                            if pd[j] != 0.0 && qd[j] > kernels::LOG_CLAMP {
                                gq[j] = -gi * pd[j] / qd[j];
                            }
                        }
                    }
                    out.push((q, gq));
                }
                if want(p) {
                    let mut gp = vec![0.0f32; pd.len()];
                    for (i, gi) in g.iter().enumerate() {
                        for k in 0..c {
                            let j = i * c + k;
                            gp[j] = -gi * qd[j].max(kernels::LOG_CLAMP).ln();
                        }
                    }
                    out.push((p, gp));
                }
            }
            &Op::SmoothL1 { x } => {
                let gx = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, &xv)| gv * kernels::smooth_l1_grad(xv))
                    .collect();
                out.push((x, gx));
            }
            &Op::Sum { x } => {
                out.push((x, vec![g[0]; self.data(x).len()]));
            }
            Op::WeightedSum { x, weights } => {
                out.push((*x, weights.iter().map(|w| w * g[0]).collect()));
            }
            &Op::ConcatCols { a, b, ca, cb } => {
                let rows = g.len() / (ca + cb);
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for row in g.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                out.push((a, ga));
                out.push((b, gb));
            }
            Op::Gather { table, ids } => {
                if want(*table) {
                    let c = *self.shape(*table).last().unwrap_or(&1);
                    let mut gt = vec![0.0f32; self.data(*table).len()];
                    for (i, &id) in ids.iter().enumerate() {
                        for k in 0..c {
                            gt[id * c + k] += g[i * c + k];
                        }
                    }
                    out.push((*table, gt));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let (q, k, v, heads, mask) = (*q, *k, *v, *heads, *mask);
                let (t, d) = rows_cols(&node.shape);
                let hd = d / heads;
                let scale = 1.0 / (hd as f32).sqrt();
                let qd = self.data(q);
                let kd = self.data(k);
                let vd = self.data(v);
                let mut gq = vec![0.0f32; t * d];
                let mut gk = vec![0.0f32; t * d];
                let mut gv = vec![0.0f32; t * d];
                let mut offset = 0;
                let mut dp = Vec::new();
                for row in 0..t {
                    let vis: Vec<usize> = mask.visible(row).collect();
                    let n = vis.len();
                    for h in 0..heads {
                        let off = h * hd;
                        let p = &probs[offset..offset + n];
                        offset += n;
                        let go = &g[row * d + off..row * d + off + hd];
                        dp.clear();
                        let mut dot = 0.0f32;
                        for (&pj, &j) in p.iter().zip(&vis) {
                            let vj = &vd[j * d + off..j * d + off + hd];
                            let mut s = 0.0f32;
                            for (a, b) in go.iter().zip(vj) {
                                s += a * b;
                            }
                            dp.push(s);
                            dot += pj * s;
                            for (acc, gov) in gv[j * d + off..j * d + off + hd].iter_mut().zip(go) {
                                *acc += pj * gov;
                            }
                        }
                        for ((&pj, &j), &dpj) in p.iter().zip(&vis).zip(&dp) {
                            let ds = pj * (dpj - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for e in 0..hd {
                                gq[row * d + off + e] += ds * kd[j * d + off + e];
                                gk[j * d + off + e] += ds * qd[row * d + off + e];
                            }
                        }
                    }
                }
                out.push((q, gq));
                out.push((k, gk));
                out.push((v, gv));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0]));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
        tape.zero_grads();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn non_scalar_and_detached_losses_are_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Shape(_))));
        let c = tape.constant(vec![1], vec![3.0]).unwrap();
        assert!(matches!(tape.backward(c), Err(Error::Tape(_))));
    }

    #[test]
    fn softmax_cross_entropy_closed_form() {
        let z = vec![0.3f32, -1.2, 2.0, 0.5];
        let mut tape = Tape::new();
        let zv = tape.param(&Tensor::vector(z));
        let q = tape.softmax(zv, 1.0).unwrap();
        let p = tape.constant(vec![4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let ce = tape.cross_entropy(p, q).unwrap();
        let loss = tape.sum(ce);
        tape.backward(loss).unwrap();
        let probs = tape.data(q).to_vec();
        let grad = tape.grad(zv).unwrap();
        for k in 0..4 {
            let expect = probs[k] - if k == 2 { 1.0 } else { 0.0 };
            assert!((grad[k] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
