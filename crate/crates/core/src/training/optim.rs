use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Scales every gradient so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], lr: f32, betas: (f32, f32), weight_decay: f32) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` given matching `grads`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("adamw", &[params.len(), grads.len()], &[self.m.len()]));
        }
        self.step += 1;
        if self.lr == 0.0 {
            return Ok(());
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != p.len() {
                return Err(Error::dim("adamw", p.shape(), &[g.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_scales_norm_five_by_a_tenth() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        let n = clip_global_norm(&mut g, 0.5);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.3).abs() < 1e-7 && (g[1][0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn small_gradients_are_untouched() {
        let mut g = vec![vec![0.1f32, 0.2]];
        clip_global_norm(&mut g, 0.5);
        assert_eq!(g[0], vec![0.1, 0.2]);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut p = Tensor::vector(vec![1.5, -2.25]);
        let before = p.clone();
        let mut opt = AdamW::new(&[2], 0.0, (0.9, 0.95), 0.1);
        opt.update(&mut [&mut p], &[vec![3.0, -1.0]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = Tensor::vector(vec![1.0, 1.0]);
        let mut opt = AdamW::new(&[2], 0.01, (0.9, 0.95), 0.0);
        opt.update(&mut [&mut p], &[vec![2.0, -0.5]]).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-6);
        assert!((p.data()[1] - 1.01).abs() < 1e-6);
    }
}
