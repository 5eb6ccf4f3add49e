//! Drafter training: per-level cross-entropy against teacher distributions
//! plus Smooth-L1 alignment of level outputs with target features, weighted
//! by `decay^(N − i)` and optimised end to end through the whole cascade.

pub mod corpus;
pub mod data;
pub mod optim;
pub mod trainer;

pub use corpus::{pretrain_target, PretrainConfig, SyntheticLanguage};
pub use data::{generate_training_data, DataGenConfig, Dataset, Example};
pub use optim::{clip_global_norm, AdamW};
pub use trainer::{write_loss_csv, DrafterTrainer, StepReport};

use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, kernels, Tensor};

/// Which target features level outputs are pulled towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignFeature {
    Low,
    Mid,
    /// Final block output, the LM head's input.
    #[default]
    High,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub alpha: f32,
    pub beta: f32,
    pub layer_decay: f32,
    pub lr: f32,
    pub adam_betas: (f32, f32),
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub align: AlignFeature,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            layer_decay: 0.9,
            lr: 5e-5,
            adam_betas: (0.9, 0.95),
            weight_decay: 0.0,
            grad_clip: 0.5,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            align: AlignFeature::High,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return bad("layer_decay must lie in (0, 1]");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// `w_i = decay^(N − i)` for `i = 1..=N`.
pub fn layer_weights(depth: usize, decay: f32) -> Vec<f32> {
    (1..=depth)
        .map(|i| (decay as f64).powi((depth - i) as i32) as f32)
        .collect()
}

/// Loss of one anchor: `Σ_i w_i (α·CE(p_i, q_i) + β·Σ_d SmoothL1(h_i − f_i))`.
///
/// `teacher[i]`, `draft[i]`, `hidden[i]` and `features[i]` belong to level
/// `i + 1`.
pub fn total_loss(
    teacher: &[Tensor],
    draft: &[Tensor],
    hidden: &[Tensor],
    features: &[Tensor],
    config: &TrainConfig,
) -> Result<f32> {
    let n = teacher.len();
    for len in [draft.len(), hidden.len(), features.len()] {
        if len != n {
            return Err(Error::dim("total_loss", &[n], &[len]));
        }
    }
    let w = layer_weights(n, config.layer_decay);
    let mut total = 0.0f32;
    for i in 0..n {
        let ce = cross_entropy(&teacher[i], &draft[i])?.item()?;
        if hidden[i].len() != features[i].len() {
            return Err(Error::dim("total_loss", hidden[i].shape(), features[i].shape()));
        }
        let mut feat = 0.0f32;
        for (h, f) in hidden[i].data().iter().zip(features[i].data()) {
            feat += kernels::smooth_l1(h - f);
        }
        total += w[i] * (config.alpha * ce + config.beta * feat);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_weights_for_four_levels() {
        let w = layer_weights(4, 0.9);
        for (got, want) in w.iter().zip([0.729f32, 0.81, 0.9, 1.0]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn perfect_drafter_with_one_hot_teacher_costs_nothing() {
        let one_hot = Tensor::vector(vec![0.0, 1.0, 0.0]);
        let h = Tensor::vector(vec![0.3, -0.2]);
        let loss = total_loss(
            &[one_hot.clone(), one_hot.clone()],
            &[one_hot.clone(), one_hot],
            &[h.clone(), h.clone()],
            &[h.clone(), h],
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn perfect_drafter_pays_teacher_entropy() {
        let p = Tensor::vector(vec![0.25; 4]);
        let h = Tensor::vector(vec![1.0]);
        let cfg = TrainConfig::default();
        let loss = total_loss(&[p.clone(), p.clone()], &[p.clone(), p], &[h.clone(), h.clone()], &[h.clone(), h], &cfg)
            .unwrap();
        let want = 0.1 * (0.9 + 1.0) * 4f32.ln();
        assert!((loss - want).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_two_level_case() {
        // Level 1: p=[1,0], q=[0.8,0.2], h−f=[0.5,−2]  → CE=−ln 0.8, feat=0.125+1.5
        // Level 2: p=[0.5,0.5], q=[0.5,0.5], h−f=[1,0] → CE=ln 2, feat=0.5
        let cfg = TrainConfig::default();
        let loss = total_loss(
            &[Tensor::vector(vec![1.0, 0.0]), Tensor::vector(vec![0.5, 0.5])],
            &[Tensor::vector(vec![0.8, 0.2]), Tensor::vector(vec![0.5, 0.5])],
            &[Tensor::vector(vec![0.5, -2.0]), Tensor::vector(vec![1.0, 0.0])],
            &[Tensor::vector(vec![0.0, 0.0]), Tensor::vector(vec![0.0, 0.0])],
            &cfg,
        )
        .unwrap();
        let l1 = 0.1 * -(0.8f64).ln() + 1.625;
        let l2 = 0.1 * (2f64).ln() + 0.5;
        let want = 0.9 * l1 + l2;
        assert!((loss as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn level_count_mismatch() {
        let p = Tensor::vector(vec![1.0]);
        let err = total_loss(std::slice::from_ref(&p), &[], std::slice::from_ref(&p), std::slice::from_ref(&p), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }
}
