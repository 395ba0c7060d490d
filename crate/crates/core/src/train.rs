//! Losses, optimizers and the training loops.
//!
//! Per-sample gradients within a minibatch are computed in parallel over
//! fixed-size chunks and reduced in chunk order, so results depend only on
//! the seed and never on the worker count.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::editing::{Activation, PhyTaylorModel};
use crate::error::{Error, Result};
use crate::network::{Evaluator, GradientSet};

/// Samples per parallel work unit. Part of the reduction order, so changing
/// it changes results in the last bits.
const CHUNK: usize = 16;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Aligned input/target pairs with a split tag and a trajectory id each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub splits: Vec<Split>,
    pub trajectories: Vec<usize>,
}

impl Dataset {
    /// All samples tagged as training data from trajectory 0.
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        let n = inputs.len();
        Self::with_tags(inputs, targets, vec![Split::Train; n], vec![0; n])
    }

    pub fn with_tags(
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        splits: Vec<Split>,
        trajectories: Vec<usize>,
    ) -> Result<Self> {
        let n = inputs.len();
        for len in [targets.len(), splits.len(), trajectories.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        let data = Self {
            inputs,
            targets,
            splits,
            trajectories,
        };
        data.check_rows()?;
        Ok(data)
    }

    fn check_rows(&self) -> Result<()> {
        let (din, dout) = (self.input_dim(), self.target_dim());
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            if x.len() != din {
                return Err(Error::DimensionMismatch {
                    expected: din,
                    actual: x.len(),
                });
            }
            if y.len() != dout {
                return Err(Error::DimensionMismatch {
                    expected: dout,
                    actual: y.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn target_dim(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, split: Split) -> Dataset {
        let idx = self.indices(split);
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            splits: vec![split; idx.len()],
            trajectories: idx.iter().map(|&i| self.trajectories[i]).collect(),
        }
    }

    /// Rebuilds state sequences from one-step pairs, grouped by trajectory id
    /// in order of first appearance.
    pub fn state_trajectories(&self) -> Vec<Vec<Vec<f64>>> {
        let mut ids: Vec<usize> = Vec::new();
        let mut out: Vec<Vec<Vec<f64>>> = Vec::new();
        for i in 0..self.len() {
            let id = self.trajectories[i];
            let pos = match ids.iter().position(|&t| t == id) {
                Some(p) => p,
                None => {
                    ids.push(id);
                    out.push(vec![self.inputs[i].clone()]);
                    ids.len() - 1
                }
            };
            out[pos].push(self.targets[i].clone());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

impl LossKind {
    /// Per-element loss and its derivative with respect to the prediction.
    fn eval(self, pred: f64, target: f64) -> (f64, f64) {
        let r = pred - target;
        match self {
            LossKind::Mse => (r * r, 2.0 * r),
            LossKind::Mae => (r.abs(), r.signum() * (r != 0.0) as u8 as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Factor applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            loss: LossKind::Mse,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "learning-rate decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.train_loss)
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.epochs.last().and_then(|r| r.val_loss)
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().filter_map(|r| r.val_loss).reduce(f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for r in &self.epochs {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, val));
        }
        out
    }
}

/// One scalar Adam step. `t` is the 1-based step count.
pub fn adam_update(param: &mut f64, grad: f64, m: &mut f64, v: &mut f64, t: i32, lr: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grad;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grad * grad;
    let m_hat = *m / (1.0 - ADAM_BETA1.powi(t));
    let v_hat = *v / (1.0 - ADAM_BETA2.powi(t));
    *param -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
}

/// Optimizer state for one model. Only positions with `M = 1` are touched.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl Optimizer {
    pub fn new(model: &PhyTaylorModel, kind: OptimizerKind, lr: f64) -> Self {
        let zeros: Vec<DMatrix<f64>> = model
            .layers()
            .iter()
            .map(|l| DMatrix::zeros(l.out_dim(), l.basis().len()))
            .collect();
        Self {
            kind,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut PhyTaylorModel, grads: &GradientSet) {
        self.step += 1;
        for (t, layer) in model.layers_mut().iter_mut().enumerate() {
            let mask = layer.mask().clone();
            let g = &grads.weights[t];
            let w = layer.weights_mut();
            for j in 0..w.ncols() {
                for i in 0..w.nrows() {
                    if !mask[(i, j)] {
                        continue;
                    }
                    match self.kind {
                        OptimizerKind::Sgd => w[(i, j)] -= self.lr * g[(i, j)],
                        OptimizerKind::Adam => adam_update(
                            &mut w[(i, j)],
                            g[(i, j)],
                            &mut self.m[t][(i, j)],
                            &mut self.v[t][(i, j)],
                            self.step,
                            self.lr,
                        ),
                    }
                }
            }
        }
    }
}

/// Mean per-element loss over the given samples.
pub fn evaluate_loss(model: &PhyTaylorModel, data: &Dataset, idx: &[usize], loss: LossKind) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let ev = Evaluator::new(model);
    let partial: Vec<f64> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sum = 0.0;
            for &i in chunk {
                let y = ev.forward(&data.inputs[i])?;
                for (p, t) in y.iter().zip(&data.targets[i]) {
                    sum += loss.eval(*p, *t).0;
                }
            }
            Ok(sum)
        })
        .collect::<Result<_>>()?;
    let total: f64 = partial.iter().sum();
    Ok(total / (idx.len() * data.target_dim()) as f64)
}

fn batch_gradient(ev: &Evaluator, data: &Dataset, batch: &[usize], loss: LossKind) -> Result<(GradientSet, f64)> {
    let scale = 1.0 / (batch.len() * data.target_dim()) as f64;
    let parts: Vec<(GradientSet, f64)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = GradientSet::zeros_like(ev.model());
            let mut sum = 0.0;
            for &i in chunk {
                let trace = ev.trace(&data.inputs[i])?;
                let y = trace.output();
                let mut g = DVector::zeros(y.len());
                for k in 0..y.len() {
                    let (l, d) = loss.eval(y[k], data.targets[i][k]);
                    sum += l;
                    g[k] = d * scale;
                }
                acc.accumulate(&ev.backward(&trace, &g));
            }
            Ok((acc, sum))
        })
        .collect::<Result<_>>()?;
    let mut total = GradientSet::zeros_like(ev.model());
    let mut loss_sum = 0.0;
    for (g, l) in &parts {
        total.accumulate(g);
        loss_sum += l;
    }
    Ok((total, loss_sum * scale))
}

fn weights_finite(model: &PhyTaylorModel) -> bool {
    model.layers().iter().all(|l| l.weights().iter().all(|w| w.is_finite()))
}

fn restore(model: &mut PhyTaylorModel, snapshot: &[DMatrix<f64>]) {
    for (layer, w) in model.layers_mut().iter_mut().zip(snapshot) {
        *layer.weights_mut() = w.clone();
    }
}

/// Trains on the `Train` split and reports the loss on both the `Train` and
/// `Val` splits after every epoch.
pub fn train_model(model: &mut PhyTaylorModel, data: &Dataset, config: &TrainConfig) -> Result<History> {
    config.validate()?;
    check_dims(model, data)?;
    let mut train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(model, config.optimizer, config.learning_rate);
    let mut history = History::default();
    let mut snapshot = model.weight_matrices();

    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(config.batch_size) {
            let step = {
                let ev = Evaluator::new(model);
                batch_gradient(&ev, data, batch, config.loss)
            };
            match step {
                Ok((grads, l)) if l.is_finite() => opt.step(model, &grads),
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    restore(model, &snapshot);
                    return Err(Error::Divergence { epoch });
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = evaluate_loss(model, data, &train_idx, config.loss);
        let val_loss = if val_idx.is_empty() {
            Ok(None)
        } else {
            evaluate_loss(model, data, &val_idx, config.loss).map(Some)
        };
        match (train_loss, val_loss) {
            (Ok(t), Ok(v)) if t.is_finite() && v.is_none_or(f64::is_finite) && weights_finite(model) => {
                log::debug!("epoch {epoch}: train {t:.6e}");
                history.epochs.push(EpochRecord {
                    epoch,
                    train_loss: t,
                    val_loss: v,
                });
                snapshot = model.weight_matrices();
                opt.lr *= config.lr_decay;
            }
            (Err(e), _) | (_, Err(e)) if !matches!(e, Error::NonFinite { .. }) => return Err(e),
            _ => {
                restore(model, &snapshot);
                return Err(Error::Divergence { epoch });
            }
        }
    }
    Ok(history)
}

fn check_dims(model: &PhyTaylorModel, data: &Dataset) -> Result<()> {
    if data.input_dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: data.input_dim(),
        });
    }
    if data.target_dim() != model.terminal_out_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.terminal_out_dim(),
            actual: data.target_dim(),
        });
    }
    Ok(())
}

/// Samples for the two-model objective: state, reference command and the
/// observed safety metric.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControlDataset {
    pub states: Vec<Vec<f64>>,
    pub reference_commands: Vec<Vec<f64>>,
    pub safety_truth: Vec<Vec<f64>>,
}

impl ControlDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Batch-averaged `alpha |s(pi(x)) - s_truth|^2 + beta |u_ref - pi(x)|^2`
/// and the gradients for both models.
pub fn selfcorrecting_loss(
    policy: &PhyTaylorModel,
    safety: &PhyTaylorModel,
    data: &ControlDataset,
    batch: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<(f64, GradientSet, GradientSet)> {
    let pe = Evaluator::new(policy);
    let se = Evaluator::new(safety);
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, GradientSet, GradientSet)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut gp = GradientSet::zeros_like(policy);
            let mut gs = GradientSet::zeros_like(safety);
            let mut sum = 0.0;
            for &i in chunk {
                let pt = pe.trace(&data.states[i])?;
                let u = pt.output();
                let st = se.trace(u.as_slice())?;
                let s_res = st.output() - DVector::from_column_slice(&data.safety_truth[i]);
                let u_res = u - DVector::from_column_slice(&data.reference_commands[i]);
                sum += alpha * s_res.norm_squared() + beta * u_res.norm_squared();
                let sg = se.backward(&st, &(s_res * (2.0 * alpha * scale)));
                let du = &sg.input + u_res * (2.0 * beta * scale);
                gs.accumulate(&sg);
                gp.accumulate(&pe.backward(&pt, &du));
            }
            Ok((sum, gp, gs))
        })
        .collect::<Result<_>>()?;
    let mut gp = GradientSet::zeros_like(policy);
    let mut gs = GradientSet::zeros_like(safety);
    let mut total = 0.0;
    for (l, p, s) in &parts {
        total += l;
        gp.accumulate(p);
        gs.accumulate(s);
    }
    Ok((total * scale, gp, gs))
}

/// Joint training of a command policy and a safety model wired in cascade.
pub fn train_selfcorrecting(
    policy: &mut PhyTaylorModel,
    safety: &mut PhyTaylorModel,
    data: &ControlDataset,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    for (t, l) in safety.layers().iter().enumerate() {
        if l.activation() != Activation::Identity || l.suppressor().is_active() {
            return Err(Error::PlanInconsistent(format!(
                "safety model layer {t} must use identity activation and no suppressor"
            )));
        }
    }
    if policy.terminal_out_dim() != safety.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: safety.input_dim(),
            actual: policy.terminal_out_dim(),
        });
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty control dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut op = Optimizer::new(policy, config.optimizer, config.learning_rate);
    let mut os = Optimizer::new(safety, config.optimizer, config.learning_rate);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    let mut snapshot = (policy.weight_matrices(), safety.weight_matrices());
    let all: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        idx.shuffle(&mut rng);
        for batch in idx.chunks(config.batch_size) {
            match selfcorrecting_loss(policy, safety, data, batch, config.alpha, config.beta) {
                Ok((l, gp, gs)) if l.is_finite() => {
                    op.step(policy, &gp);
                    os.step(safety, &gs);
                }
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    restore(policy, &snapshot.0);
                    restore(safety, &snapshot.1);
                    return Err(Error::Divergence { epoch });
                }
                Err(e) => return Err(e),
            }
        }
        match selfcorrecting_loss(policy, safety, data, &all, config.alpha, config.beta) {
            Ok((l, _, _)) if l.is_finite() => {
                history.epochs.push(EpochRecord {
                    epoch,
                    train_loss: l,
                    val_loss: None,
                });
                snapshot = (policy.weight_matrices(), safety.weight_matrices());
                op.lr *= config.lr_decay;
                os.lr *= config.lr_decay;
            }
            Ok(_) | Err(Error::NonFinite { .. }) => {
                restore(policy, &snapshot.0);
                restore(safety, &snapshot.1);
                return Err(Error::Divergence { epoch });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(history)
}

/// Closed-loop prediction error `(1/k) sum_t (1/d) |x_hat(t) - x(t)|` over
/// `horizon` steps, starting from the first state of `trajectory`.
pub fn rollout_error_with<F>(step: F, trajectory: &[Vec<f64>], horizon: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    if horizon == 0 {
        return Err(Error::InvalidArgument("rollout horizon must be at least 1".into()));
    }
    let available = trajectory.len().saturating_sub(1);
    if horizon > available {
        return Err(Error::HorizonTooLong { horizon, available });
    }
    let d = trajectory[0].len() as f64;
    let mut state = trajectory[0].clone();
    let mut total = 0.0;
    for truth in &trajectory[1..=horizon] {
        let next = step(&state)?;
        let err: f64 = next.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        total += err / d;
        state = next.as_slice().to_vec();
    }
    Ok(total / horizon as f64)
}

pub fn rollout_error(model: &PhyTaylorModel, trajectory: &[Vec<f64>], horizon: usize) -> Result<f64> {
    if model.input_dim() != model.terminal_out_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: model.terminal_out_dim(),
        });
    }
    let ev = Evaluator::new(model);
    rollout_error_with(|x| ev.forward(x), trajectory, horizon)
}

/// Rollout predictions `x_hat(1..=horizon)` from `x0`.
pub fn rollout(model: &PhyTaylorModel, x0: &[f64], horizon: usize) -> Result<Vec<Vec<f64>>> {
    let ev = Evaluator::new(model);
    let mut state = x0.to_vec();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        state = ev.forward(&state)?.as_slice().to_vec();
        out.push(state.clone());
    }
    Ok(out)
}
