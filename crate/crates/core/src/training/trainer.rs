use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{Dataset, Example};
use super::optim::{clip_global_norm, AdamW};
use super::{layer_weights, TrainConfig};
use crate::drafter::{Drafter, DrafterVars, FrozenHead, WindowInput};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::target_model::{Parameters, TargetModel};

/// Loss terms of one batch on a tape.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    /// Mean cross-entropy per level over the batch's anchors.
    pub ce: Vec<Var>,
    /// Mean summed Smooth-L1 per level over the batch's anchors.
    pub feat: Vec<Var>,
    pub anchors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub total: f32,
    pub ce: Vec<f32>,
    pub feat: Vec<f32>,
    pub grad_norm: f32,
}

/// Drafter plus optimiser state and a shuffled pass over the dataset.
#[derive(Debug, Clone)]
pub struct DrafterTrainer {
    pub drafter: Drafter,
    config: TrainConfig,
    opt: AdamW,
    step: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

/// Records the batch loss of `drafter` on `tape`.
pub fn batch_loss(
    drafter: &Drafter,
    tape: &mut Tape,
    vars: &DrafterVars,
    head: &FrozenHead,
    batch: &[&Example],
    config: &TrainConfig,
) -> Result<LossVars> {
    let n = drafter.depth();
    let d = drafter.config().hidden_dim;
    let mut ce_acc: Vec<Option<Var>> = vec![None; n];
    let mut feat_acc: Vec<Option<Var>> = vec![None; n];
    let mut anchors = 0usize;
    for ex in batch {
        if ex.dim != d {
            return Err(Error::dim("batch_loss", &[ex.dim], &[d]));
        }
        if ex.len() < n {
            continue;
        }
        let window = WindowInput {
            tokens: &ex.tokens,
            low: &ex.low,
            mid: &ex.mid,
            high: &ex.high,
        };
        let (hidden, probs) = drafter.forward_window(tape, vars, head, &window)?;
        let rows: Vec<usize> = (0..=ex.len() - n).collect();
        anchors += rows.len();
        let feats = ex.features(config.align);
        for i in 0..n {
            let mut teacher = Vec::with_capacity(rows.len() * ex.vocab);
            let mut aligned = Vec::with_capacity(rows.len() * d);
            for &j in &rows {
                teacher.extend_from_slice(ex.teacher_row(j + i));
                aligned.extend_from_slice(&feats[(j + i) * d..(j + i + 1) * d]);
            }
            let p = tape.constant(vec![rows.len(), ex.vocab], teacher)?;
            let q = tape.gather(probs[i], &rows)?;
            let ce = tape.cross_entropy(p, q)?;
            let ce = tape.sum(ce);
            let f = tape.constant(vec![rows.len(), d], aligned)?;
            let h = tape.gather(hidden[i], &rows)?;
            let diff = tape.sub(h, f)?;
            let sl = tape.smooth_l1(diff);
            let feat = tape.sum(sl);
            ce_acc[i] = Some(match ce_acc[i] {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
            feat_acc[i] = Some(match feat_acc[i] {
                Some(acc) => tape.add(acc, feat)?,
                None => feat,
            });
        }
    }
    if anchors == 0 {
        return Err(Error::Parameter(format!(
            "batch has no sequence of at least {n} tokens"
        )));
    }
    let inv = 1.0 / anchors as f32;
    let w = layer_weights(n, config.layer_decay);
    let mut ce = Vec::with_capacity(n);
    let mut feat = Vec::with_capacity(n);
    let mut total: Option<Var> = None;
    for i in 0..n {
        let c = tape.scale(ce_acc[i].expect("anchors exist"), inv);
        let f = tape.scale(feat_acc[i].expect("anchors exist"), inv);
        let wc = tape.scale(c, w[i] * config.alpha);
        let wf = tape.scale(f, w[i] * config.beta);
        let level = tape.add(wc, wf)?;
        total = Some(match total {
            Some(t) => tape.add(t, level)?,
            None => level,
        });
        ce.push(c);
        feat.push(f);
    }
    Ok(LossVars {
        total: total.expect("depth is at least 1"),
        ce,
        feat,
        anchors,
    })
}

impl DrafterTrainer {
    pub fn new(drafter: Drafter, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = drafter.named_params().iter().map(|(_, t)| t.len()).collect();
        let opt = AdamW::new(&sizes, config.lr, config.adam_betas, config.weight_decay);
        Ok(Self {
            drafter,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            opt,
            step: 0,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Backward through the whole cascade, global-norm clipping and one
    /// AdamW update. A non-finite loss aborts the step without touching the
    /// drafter.
    pub fn train_step(&mut self, target: &TargetModel, batch: &[&Example]) -> Result<StepReport> {
        if self.drafter.config().hidden_dim != target.config().hidden_dim {
            return Err(Error::Config("drafter and target widths differ".into()));
        }
        let mut tape = Tape::new();
        let vars = self.drafter.bind(&mut tape);
        let head = FrozenHead::bind(&mut tape, target)?;
        let loss = batch_loss(&self.drafter, &mut tape, &vars, &head, batch, &self.config)?;
        let total = tape.scalar(loss.total)?;
        if !total.is_finite() {
            return Err(Error::NonFinite { batch: self.step });
        }
        tape.backward(loss.total)?;
        let params = vars.all();
        let mut grads: Vec<Vec<f32>> = params
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.data(v).len()],
            })
            .collect();
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        {
            let mut slots: Vec<_> = self
                .drafter
                .named_params_mut()
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            self.opt.update(&mut slots, &grads)?;
        }
        self.step += 1;
        let read = |vs: &[Var]| -> Result<Vec<f32>> { vs.iter().map(|&v| tape.scalar(v)).collect() };
        Ok(StepReport {
            step: self.step,
            total,
            ce: read(&loss.ce)?,
            feat: read(&loss.feat)?,
            grad_norm,
        })
    }

    /// Next batch from a reshuffled pass over `dataset`.
    pub fn next_batch<'a>(&mut self, dataset: &'a Dataset) -> Vec<&'a Example> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        if dataset.is_empty() {
            return batch;
        }
        while batch.len() < self.config.batch_size.min(dataset.len()) {
            if self.cursor >= self.order.len() {
                self.order = (0..dataset.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(&dataset.examples[self.order[self.cursor]]);
            self.cursor += 1;
        }
        batch
    }

    /// Runs `steps` training steps, logging progress every tenth of the run.
    pub fn train(&mut self, target: &TargetModel, dataset: &Dataset, steps: usize) -> Result<Vec<StepReport>> {
        if steps > 0 && dataset.is_empty() {
            return Err(Error::Parameter("training dataset is empty".into()));
        }
        let mut reports = Vec::with_capacity(steps);
        let every = (steps / 10).max(1);
        for s in 0..steps {
            let batch = self.next_batch(dataset);
            let r = self.train_step(target, &batch)?;
            if (s + 1) % every == 0 {
                log::info!("step {} loss {:.5}", r.step, r.total);
            }
            reports.push(r);
        }
        Ok(reports)
    }
}

/// Loss curve as CSV: step, total, per-level CE, per-level feature loss.
pub fn write_loss_csv(path: &Path, reports: &[StepReport], depth: usize) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["step".to_string(), "total".to_string()];
    header.extend((1..=depth).map(|i| format!("ce_{i}")));
    header.extend((1..=depth).map(|i| format!("feat_{i}")));
    w.write_record(&header).map_err(io)?;
    for r in reports {
        let mut row = vec![r.step.to_string(), r.total.to_string()];
        row.extend(r.ce.iter().map(|v| v.to_string()));
        row.extend(r.feat.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
