//! Dense `f32` tensors, shared kernels and a reverse-mode tape.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{AttentionMask, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Matrix product of `[m×k]` and `[k×n]` tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::matrix(m, n, kernels::matmul(a.data(), b.data(), m, k, n))
}

/// Softmax along the last axis of `x / temperature`.
pub fn softmax(x: &Tensor, temperature: f32) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let c = x.cols();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(c) {
        kernels::softmax_row(row, temperature);
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn check_distribution(name: &str, t: &Tensor) -> Result<()> {
    let mut sum = 0.0f64;
    for &v in t.data() {
        if !(v >= 0.0) {
            return Err(Error::Parameter(format!("{name} has a negative or NaN entry")));
        }
        sum += v as f64;
    }
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::Parameter(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// `−Σ_k p_k log q_k` with `q` clamped below at `1e-12`.
pub fn cross_entropy(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.len() != q.len() {
        return Err(Error::dim("cross_entropy", p.shape(), q.shape()));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let mut acc = 0.0f32;
    for (&pk, &qk) in p.data().iter().zip(q.data()) {
        if pk != 0.0 {
            acc -= pk * qk.max(kernels::LOG_CLAMP).ln();
        }
    }
    Ok(Tensor::scalar(acc))
}

/// Elementwise Smooth-L1 with unit threshold.
pub fn smooth_l1(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernels::smooth_l1(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity_and_scalar() {
        let i = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let c = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for k in 0..5 {
                    acc += a.data()[i * 5 + k] as f64 * b.data()[k * 3 + j] as f64;
                }
                assert!((c.data()[i * 3 + j] as f64 - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn matmul_reports_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::vector(vec![0.0; 4]), 1.0).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]), 1.0).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6);
        let t = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]), 1.0).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in t.data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((*got as f64 - want).abs() < 1e-7);
        }
        assert!(matches!(
            softmax(&Tensor::vector(vec![1.0]), 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn softmax_sums_to_one_for_large_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let row: Vec<f32> = (0..64).map(|_| rng.random_range(-1e4f32..1e4)).collect();
            let s = softmax(&Tensor::vector(row), 1.0).unwrap();
            let sum: f64 = s.data().iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() <= 1e-6, "sum {sum}");
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let q = Tensor::vector(vec![0.1, 0.6, 0.3]);
        let p = Tensor::vector(vec![0.0, 1.0, 0.0]);
        let ce = cross_entropy(&p, &q).unwrap().item().unwrap();
        assert!((ce - (-(0.6f32).ln())).abs() < 1e-6);

        let u = Tensor::vector(vec![0.25; 4]);
        let h = cross_entropy(&u, &u).unwrap().item().unwrap();
        assert!((h - 1.386_294_4).abs() < 1e-6);

        assert!(matches!(
            cross_entropy(&u, &q),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..8).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|v| v / z).collect::<Vec<f64>>()
        };
        let p = mk(&mut rng);
        let q = mk(&mut rng);
        let oracle: f64 = -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>();
        let pt = Tensor::vector(p.iter().map(|&v| v as f32).collect());
        let qt = Tensor::vector(q.iter().map(|&v| v as f32).collect());
        let got = cross_entropy(&pt, &qt).unwrap().item().unwrap();
        assert!((got as f64 - oracle).abs() < 1e-5);
    }

    #[test]
    fn smooth_l1_examples() {
        let y = smooth_l1(&Tensor::vector(vec![0.0, 0.5, -2.0, 1.0, -1.0]));
        assert_eq!(y.data(), &[0.0, 0.125, 1.5, 0.5, 0.5]);
    }
}
