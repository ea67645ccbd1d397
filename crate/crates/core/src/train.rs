//! Loss, Adam and the teacher-forced training loop.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainMeta};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::network::Model;
use crate::physics::Trajectory;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Number of supervised frames per sequence, after frame 0.
    pub t_train: usize,
    /// Coefficient of an optional `Σ‖W‖²` penalty; 0 disables it.
    pub l2: f64,
    /// Seeds the per-epoch sequence order.
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr: 0.1,
            lr_decay: 0.995,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            t_train: 20,
            l2: 0.0,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::contract(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::contract("Adam betas must lie in [0, 1)"));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::contract("adam_eps must be positive"));
        }
        if self.t_train == 0 {
            return Err(Error::contract("t_train must be at least 1"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::contract("l2 must be non-negative"));
        }
        Ok(())
    }

    /// Step size for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

fn check_frames(targets: &[Tensor], preds: &[Tensor]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::contract("loss needs at least one frame"));
    }
    if targets.len() != preds.len() {
        return Err(Error::contract(format!(
            "{} target frames vs {} predicted frames",
            targets.len(),
            preds.len()
        )));
    }
    for (y, p) in targets.iter().zip(preds) {
        if y.shape() != p.shape() {
            return Err(Error::shape("loss", y.shape(), p.shape()));
        }
    }
    Ok(())
}

/// Mean per-vertex Euclidean distance over all frames.
pub fn sequence_loss(targets: &[Tensor], preds: &[Tensor]) -> Result<f64> {
    check_frames(targets, preds)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (y, p) in targets.iter().zip(preds) {
        let d = p.sub(y)?.row_norms()?;
        total += d.sum();
        count += d.numel();
    }
    Ok(total / count as f64)
}

/// [`sequence_loss`] recorded on a tape.
pub fn loss_on_tape(tape: &mut Tape, preds: &[Var], targets: &[Tensor]) -> Result<Var> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (&p, y) in preds.iter().zip(targets) {
        let yv = tape.constant(y.clone());
        let d = tape.sub(p, yv)?;
        let n = tape.row_norms(d)?;
        count += tape.value(n).numel();
        let s = tape.sum(n);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / count as f64))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(shapes: &[&Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(params: &[&Tensor], cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// `p ← p − lr·m̂/(√v̂ + ε)`. Non-finite gradients are rejected before
    /// anything is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::numeric(format!("gradient of parameter tensor {i}")));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * gk;
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = md[k] / c1;
                let v_hat = vd[k] / c2;
                pd[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Teacher-forced loss of one sequence over frames `1..=steps`, and the
/// gradient of every parameter tensor in [`Model::tensors`] order.
pub fn loss_and_grads(model: &Model, g: &Graph, seq: &Trajectory, steps: usize) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let preds = model.unroll_on_tape(&mut tape, &bound, g, &seq.x, &seq.y[0], Some(&seq.y), steps)?;
    let loss = loss_on_tape(&mut tape, &preds, &seq.y[1..=steps])?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::numeric("training loss"));
    }
    tape.backward(loss)?;
    let grads = bound
        .iter()
        .flat_map(|b| b.vars())
        .map(|v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect();
    Ok((value, grads))
}

/// Teacher-forced loss without gradients.
pub fn teacher_forced_loss(model: &Model, g: &Graph, seq: &Trajectory, steps: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let preds = model.unroll_on_tape(&mut tape, &bound, g, &seq.x, &seq.y[0], Some(&seq.y), steps)?;
    let loss = loss_on_tape(&mut tape, &preds, &seq.y[1..=steps])?;
    Ok(tape.value(loss).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean teacher-forced loss over the epoch's updates, meters.
    pub train_loss: f64,
    /// Teacher-forced loss on the validation split after the epoch, meters.
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub best: Checkpoint,
    /// Parameters after the last epoch.
    pub last: Model,
    pub curve: Vec<EpochRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Invalid(#[from] Error),
    #[error("training diverged in epoch {epoch}: {cause}")]
    Diverged {
        epoch: usize,
        cause: Error,
        last_good: Box<Checkpoint>,
    },
}

fn mean_loss(model: &Model, g: &Graph, seqs: &[Trajectory], steps: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in seqs {
        total += teacher_forced_loss(model, g, s, steps)?;
    }
    Ok(total / seqs.len() as f64)
}

/// Trains with one Adam step per sequence. With an empty validation split
/// the training loss drives checkpoint selection.
pub fn train(
    model: Model,
    g: &Graph,
    train_set: &[Trajectory],
    val_set: &[Trajectory],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty").into());
    }
    let steps = cfg.t_train;
    for (i, s) in train_set.iter().chain(val_set).enumerate() {
        if s.num_frames() < steps + 1 || s.y.len() != s.x.len() {
            return Err(Error::contract(format!(
                "sequence {i} has {} frames, training needs {}",
                s.num_frames(),
                steps + 1
            ))
            .into());
        }
    }

    let mut model = model;
    let mut adam = Adam::from_config(&model.tensors(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let meta = |epoch, loss| TrainMeta {
        epoch,
        loss,
        seed: cfg.seed,
    };
    let mut best = Checkpoint::new(model.clone(), meta(0, None));
    let mut best_loss = f64::INFINITY;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let diverged = |cause: Error, best: &Checkpoint| TrainError::Diverged {
            epoch,
            cause,
            last_good: Box::new(best.clone()),
        };
        let mut total = 0.0;
        for &i in &order {
            let (loss, mut grads) = match loss_and_grads(&model, g, &train_set[i], steps) {
                Ok(r) => r,
                Err(e @ Error::NumericFault { .. }) => return Err(diverged(e, &best)),
                Err(e) => return Err(e.into()),
            };
            if cfg.l2 > 0.0 {
                for (gr, p) in grads.iter_mut().zip(model.tensors()) {
                    *gr = gr.add(&p.scale(2.0 * cfg.l2))?;
                }
            }
            if let Err(e) = adam.step(&mut model.tensors_mut(), &grads, lr) {
                return Err(diverged(e, &best));
            }
            if !model.is_finite() {
                return Err(diverged(Error::numeric("parameters after update"), &best));
            }
            total += loss;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = if val_set.is_empty() {
            mean_loss(&model, g, train_set, steps)
        } else {
            mean_loss(&model, g, val_set, steps)
        };
        let val_loss = match val_loss {
            Ok(v) if v.is_finite() => v,
            Ok(_) => return Err(diverged(Error::numeric("validation loss"), &best)),
            Err(e @ Error::NumericFault { .. }) => return Err(diverged(e, &best)),
            Err(e) => return Err(e.into()),
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_loss,
        };
        log::debug!(
            "epoch {} lr {:.3e} train {:.6e} val {:.6e}",
            rec.epoch,
            lr,
            train_loss,
            val_loss
        );
        on_epoch(&rec);
        curve.push(rec);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = Checkpoint::new(model.clone(), meta(epoch + 1, Some(val_loss)));
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        curve,
    })
}
