//! Loss, optimizer, learning-rate schedule, training loop and the
//! finite-difference gradient checker.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Graph, NodeId, Tensor};

/// Mean squared error over all elements of `pred` and `target` (both
/// `[n, 2]`), as a scalar graph node.
pub fn mse_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Dim(format!(
            "mse_loss: prediction shape {:?} vs target shape {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates, stored in the order of
/// `ModelParams::trainable`.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub hyper: AdamWHyper,
    pub step_count: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamWState {
    pub fn new(hyper: AdamWHyper) -> Self {
        AdamWState {
            hyper,
            step_count: 0,
            moments: Vec::new(),
        }
    }
}

/// One decoupled-weight-decay Adam step. Gradients are read from each
/// tensor's attached `grad`; `lr` overrides `hyper.lr` so a schedule can
/// drive it per step.
///
/// Update: `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected
/// `m^ = m / (1-b1^t)`, `v^ = v / (1-b2^t)`, then
/// `theta <- theta - lr (m^ / (sqrt(v^) + eps) + wd theta)`.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    if state.moments.is_empty() {
        state.moments = params
            .iter()
            .map(|(_, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
            .collect();
    }
    if state.moments.len() != params.len() {
        return Err(Error::Train(format!(
            "optimizer state tracks {} parameter groups, got {}",
            state.moments.len(),
            params.len()
        )));
    }
    let h = state.hyper;
    let t = state.step_count + 1;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for ((name, tensor), (m, v)) in params.iter_mut().zip(state.moments.iter_mut()) {
        let grad = tensor
            .grad()
            .ok_or_else(|| Error::Train(format!("parameter {name} has no gradient")))?
            .to_vec();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Train(format!(
                "non-finite gradient in parameter {name}"
            )));
        }
        if m.len() != grad.len() {
            return Err(Error::Train(format!(
                "optimizer state for {name} has {} entries, gradient has {}",
                m.len(),
                grad.len()
            )));
        }
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * data[i]);
        }
    }
    state.step_count = t;
    Ok(())
}

/// Cosine annealing with warm restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    /// First cycle length in optimizer steps.
    pub t0: usize,
    /// Cycle length multiplier at each restart.
    pub t_mult: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::Param(format!(
                "schedule needs lr_max >= lr_min >= 0, got lr_max={} lr_min={}",
                self.lr_max, self.lr_min
            )));
        }
        if self.t0 == 0 || self.t_mult == 0 {
            return Err(Error::Param(format!(
                "schedule needs t0 >= 1 and t_mult >= 1, got t0={} t_mult={}",
                self.t0, self.t_mult
            )));
        }
        Ok(())
    }
}

/// Learning rate at a global step:
/// `lr_min + (lr_max - lr_min) (1 + cos(pi T_cur / T_i)) / 2` where `T_cur`
/// is the offset into the current cycle of length `T_i = t0 * t_mult^cycle`;
/// every restart boundary returns to `lr_max`.
pub fn cosine_warm_restart_lr(step: u64, sched: &ScheduleConfig) -> Result<f64> {
    sched.validate()?;
    let (t_cur, t_i) = if sched.t_mult == 1 {
        (step % sched.t0 as u64, sched.t0 as u64)
    } else {
        let mut rem = step;
        let mut cycle_len = sched.t0 as u64;
        while rem >= cycle_len {
            rem -= cycle_len;
            cycle_len *= sched.t_mult as u64;
        }
        (rem, cycle_len)
    };
    let phase = std::f64::consts::PI * t_cur as f64 / t_i as f64;
    Ok(sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + phase.cos()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_train_loss: Vec<f64>,
    /// Pooled RMSE of clamped predictions over the validation set, per
    /// epoch; `None` when there is no validation data.
    pub epoch_val_rmse: Vec<Option<f64>>,
    pub steps: u64,
    pub wall_seconds: f64,
    pub checkpoint: Option<String>,
}

/// Full training loop: seeded init, seeded shuffling, one graph per batch,
/// backward, and a scheduled AdamW step. Deterministic given the seeds.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    config: &ModelConfig,
    sched: &ScheduleConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(Model, TrainReport)> {
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Param("batch_size must be >= 1".into()));
    }
    sched.validate()?;
    let start = Instant::now();
    let mut model = Model::new(config.clone())?;
    let mut state = AdamWState::new(AdamWHyper {
        lr: sched.lr_max,
        ..AdamWHyper::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut report = TrainReport {
        epoch_train_loss: Vec::with_capacity(epochs),
        epoch_val_rmse: Vec::with_capacity(epochs),
        steps: 0,
        wall_seconds: 0.0,
        checkpoint: None,
    };

    for epoch in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let loss = run_batch(
                &mut model,
                &mut state,
                train_set,
                chunk,
                report.steps,
                epoch,
                sched,
            )?;
            epoch_loss += loss;
            batches += 1;
            report.steps += 1;
        }
        report.epoch_train_loss.push(epoch_loss / batches as f64);
        report
            .epoch_val_rmse
            .push(validation_rmse(&model, val_set)?);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    model: &mut Model,
    state: &mut AdamWState,
    samples: &[Sample],
    indices: &[usize],
    step: u64,
    epoch: usize,
    sched: &ScheduleConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids = model.insert_params(&mut g);

    let mut preds = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len() * 2);
    for &i in indices {
        let raw = model.forward_with(&mut g, &ids, &samples[i].window)?;
        preds.push(g.reshape(raw, vec![1, 2])?);
        targets.extend_from_slice(&samples[i].target);
    }
    let pred = g.concat_rows(&preds)?;
    let target = g.constant(Tensor::from_vec(vec![indices.len(), 2], targets)?);
    let loss = mse_loss(&mut g, pred, target)?;
    let loss_value = g.data(loss)[0];
    if !loss_value.is_finite() {
        return Err(Error::Train(format!(
            "non-finite loss {loss_value} at epoch {epoch}, step {step}"
        )));
    }

    let grads = g.backward(loss)?;
    let nodes = ids.trainable_nodes();
    let mut params = model.params.trainable_mut();
    debug_assert_eq!(nodes.len(), params.len());
    for ((name, tensor), node) in params.iter_mut().zip(&nodes) {
        let grad = grads
            .get(*node)
            .ok_or_else(|| Error::Train(format!("no gradient produced for {name}")))?;
        tensor.set_grad(Some(grad.to_vec()));
    }
    let lr = cosine_warm_restart_lr(step, sched)?;
    adamw_step(&mut params, state, lr)?;
    Ok(loss_value)
}

/// Pooled RMSE of clamped predictions over both output dimensions.
fn validation_rmse(model: &Model, val_set: &[Sample]) -> Result<Option<f64>> {
    if val_set.is_empty() {
        return Ok(None);
    }
    let mut sq_sum = 0.0;
    for s in val_set {
        let p = model.predict(&s.window)?;
        sq_sum += (p.valence - s.target[0]).powi(2) + (p.arousal - s.target[1]).powi(2);
    }
    Ok(Some((sq_sum / (2 * val_set.len()) as f64).sqrt()))
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    /// Worst relative error over the checked entries; `None` for frozen
    /// groups that receive no gradient.
    pub max_rel_err: Option<f64>,
    pub entries_checked: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    /// Worst relative error over all gradient-carrying groups.
    pub worst: f64,
    pub eps: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst < tolerance
    }
}

/// Compares reverse-mode gradients of `mse_loss . forward` against central
/// finite differences on a seeded random window. Each parameter group is
/// probed at up to `max_entries_per_group` seeded entries. The target is
/// placed near the model's raw output so the loss stays O(1) and the
/// difference quotient stays well-conditioned.
pub fn grad_check(
    config: &ModelConfig,
    eps: f64,
    seed: u64,
    max_entries_per_group: usize,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::Param(format!(
            "grad_check eps must be > 0, got {eps}"
        )));
    }
    if max_entries_per_group == 0 {
        return Err(Error::Param(
            "grad_check needs at least one entry per group".into(),
        ));
    }
    let mut model = Model::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("fixed std");
    let window = Tensor::from_vec(
        vec![config.seq_len, 8],
        (0..config.seq_len * 8)
            .map(|_| normal.sample(&mut rng))
            .collect(),
    )?;
    let raw = model.forward_raw(&window)?;
    let mut offset = || {
        let mag = rng.gen_range(0.3..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    };
    let target = [raw[0] + offset(), raw[1] + offset()];

    let loss_of = |model: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let ids = model.insert_params(&mut g);
        let out = model.forward_with(&mut g, &ids, &window)?;
        let pred = g.reshape(out, vec![1, 2])?;
        let tgt = g.constant(Tensor::from_vec(vec![1, 2], target.to_vec())?);
        let loss = mse_loss(&mut g, pred, tgt)?;
        Ok(g.data(loss)[0])
    };

    // analytic gradients
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let ids = model.insert_params(&mut g);
        let out = model.forward_with(&mut g, &ids, &window)?;
        let pred = g.reshape(out, vec![1, 2])?;
        let tgt = g.constant(Tensor::from_vec(vec![1, 2], target.to_vec())?);
        let loss = mse_loss(&mut g, pred, tgt)?;
        let grads = g.backward(loss)?;
        ids.trainable_nodes()
            .iter()
            .map(|n| {
                grads
                    .get(*n)
                    .expect("all trainable nodes reach the loss")
                    .to_vec()
            })
            .collect()
    };

    let group_count = model.params.trainable().len();
    let mut groups = Vec::with_capacity(group_count);
    let mut worst = 0.0f64;
    for gi in 0..group_count {
        let (name, numel) = {
            let t = &model.params.trainable()[gi];
            (t.0.clone(), t.1.numel())
        };
        let entries: Vec<usize> = if numel <= max_entries_per_group {
            (0..numel).collect()
        } else {
            let mut idx: Vec<usize> = (0..numel).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            idx.truncate(max_entries_per_group);
            idx.sort_unstable();
            idx
        };
        let mut group_worst = 0.0f64;
        for &e in &entries {
            let orig = model.params.trainable()[gi].1.data()[e];
            model.params.trainable_mut()[gi].1.data_mut()[e] = orig + eps;
            let plus = loss_of(&model)?;
            model.params.trainable_mut()[gi].1.data_mut()[e] = orig - eps;
            let minus = loss_of(&model)?;
            model.params.trainable_mut()[gi].1.data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic[gi][e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
            group_worst = group_worst.max(rel);
        }
        worst = worst.max(group_worst);
        groups.push(GroupCheck {
            name,
            max_rel_err: Some(group_worst),
            entries_checked: entries.len(),
        });
    }
    for (name, _) in model.params.frozen() {
        groups.push(GroupCheck {
            name,
            max_rel_err: None,
            entries_checked: 0,
        });
    }
    Ok(GradCheckReport { groups, worst, eps })
}
