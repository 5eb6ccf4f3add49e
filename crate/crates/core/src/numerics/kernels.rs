//! Slice-level kernels shared by the tape and the cached inference path.
//!
//! Every kernel computes each output row from its own input row with a fixed
//! sequential summation order, so a row's result does not depend on how many
//! other rows are processed alongside it. Tree verification relies on this to
//! reproduce incremental decoding bit for bit.

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// `out += a[m×k] · b[k×n]`.
pub fn matmul_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn add_row_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Returns the inverse RMS used, for the backward pass.
pub fn rms_norm_row(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) -> f32 {
    let mut ss = 0.0f32;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + eps).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

pub fn rms_norm(x: &[f32], gain: &[f32], eps: f32) -> (Vec<f32>, Vec<f32>) {
    let d = gain.len();
    let mut out = vec![0.0f32; x.len()];
    let mut invs = Vec::with_capacity(x.len() / d);
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        invs.push(rms_norm_row(xr, gain, eps, or));
    }
    (out, invs)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place softmax of one row after dividing by `temperature`.
pub fn softmax_row(row: &mut [f32], temperature: f32) {
    let inv_t = 1.0 / temperature;
    let mut max = f32::NEG_INFINITY;
    for v in row.iter_mut() {
        *v *= inv_t;
        if *v > max {
            max = *v;
        }
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv_sum = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv_sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Multi-head attention for a single query row.
///
/// `keys`/`values` are row-major buffers of width `d`; `visible` lists the
/// rows the query may attend to, in the order they are summed. When `probs`
/// is given, the per-head attention weights are appended to it
/// (`heads × visible.len()` values).
#[allow(clippy::too_many_arguments)]
pub fn attend_row(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    d: usize,
    heads: usize,
    visible: &[usize],
    out: &mut [f32],
    mut probs: Option<&mut Vec<f32>>,
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut scores = vec![0.0f32; visible.len()];
    for h in 0..heads {
        let off = h * hd;
        let qh = &q[off..off + hd];
        let mut max = f32::NEG_INFINITY;
        for (s, &j) in scores.iter_mut().zip(visible) {
            let kh = &keys[j * d + off..j * d + off + hd];
            let mut dot = 0.0f32;
            for (a, b) in qh.iter().zip(kh) {
                dot += a * b;
            }
            *s = dot * scale;
            if *s > max {
                max = *s;
            }
        }
        let mut sum = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let inv = 1.0 / sum;
        for s in scores.iter_mut() {
            *s *= inv;
        }
        let oh = &mut out[off..off + hd];
        oh.iter_mut().for_each(|v| *v = 0.0);
        for (&p, &j) in scores.iter().zip(visible) {
            let vh = &values[j * d + off..j * d + off + hd];
            for (o, v) in oh.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
        if let Some(buf) = probs.as_deref_mut() {
            buf.extend_from_slice(&scores);
        }
    }
}

pub fn smooth_l1(x: f32) -> f32 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f32) -> f32 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Lower clamp applied to probabilities before taking a log.
pub const LOG_CLAMP: f32 = 1e-12;
