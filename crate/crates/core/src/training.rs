//! Adam, the completion loss and its weight ramp, and the epoch loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::error::{config_err, contract_err, Error, Result};
use crate::graph::{ChamferKind, Graph, Var};
use crate::models::{AXformNet, CompletionMode, ReconstructionNet};
use crate::params::ParamSet;

/// Adam moments, step counter and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(contract_err!("optimizer state covers {} tensors, model has {}", self.m.len(), params.len()));
        }
        for (i, t) in params.tensors().iter().enumerate() {
            if self.m[i].len() != t.numel() || self.v[i].len() != t.numel() {
                return Err(contract_err!("optimizer moments for {} do not match shape {:?}", params.names()[i], t.shape()));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamSet, grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    state.check(params)?;
    if grads.len() != params.len() {
        return Err(contract_err!("{} gradient buffers for {} parameters", grads.len(), params.len()));
    }
    for (i, (g, t)) in grads.iter().zip(params.tensors()).enumerate() {
        if g.len() != t.numel() {
            return Err(contract_err!("gradient for {} has {} values, expected {}", params.names()[i], g.len(), t.numel()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(state.beta1, t);
    let c2 = 1.0 - libm::pow(state.beta2, t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *p -= lr * mhat / (libm::sqrt(vhat) + eps);
        }
    }
    Ok(())
}

/// `alpha * CD_L1(coarse, gt) + CD_L1(final, gt)` as a scalar graph node.
pub fn completion_loss(g: &mut Graph<'_>, coarse: Var, final_cloud: Var, gt: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(contract_err!("loss weight alpha must be nonnegative, got {alpha}"));
    }
    let c = g.chamfer(coarse, gt, ChamferKind::L1)?;
    let c = g.sum(c);
    let f = g.chamfer(final_cloud, gt, ChamferKind::L1)?;
    let f = g.sum(f);
    let c = g.scale(c, alpha);
    g.add(c, f)
}

/// Linear ramp of the coarse-loss weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    pub start: f64,
    pub end: f64,
    pub ramp_epochs: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule { start: 0.01, end: 1.0, ramp_epochs: 25.0 }
    }
}

impl AlphaSchedule {
    pub fn at(&self, epoch: f64) -> f64 {
        let t = if self.ramp_epochs > 0.0 { (epoch / self.ramp_epochs).clamp(0.0, 1.0) } else { 1.0 };
        // Exact at both endpoints.
        self.start * (1.0 - t) + self.end * t
    }
}

/// The default weight ramp: 0.01 at epoch 0 rising linearly to 1 at epoch 25.
pub fn alpha_schedule(epoch: f64) -> f64 {
    AlphaSchedule::default().at(epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Reconstruct,
    Complete,
}

/// Optimization hyperparameters shared by both tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: AlphaSchedule,
    /// Seed of the per-epoch shuffle.
    pub shuffle_seed: u64,
    /// Global gradient-norm cap; `None` leaves gradients untouched.
    pub grad_clip: Option<f64>,
    /// Save every this many epochs (the final epoch is always saved).
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn reconstruction() -> Self {
        TrainConfig {
            task: Task::Reconstruct,
            epochs: 200,
            batch_size: 32,
            lr: 1e-4,
            alpha: AlphaSchedule::default(),
            shuffle_seed: 0,
            grad_clip: None,
            checkpoint_every: None,
        }
    }

    pub fn completion() -> Self {
        TrainConfig { task: Task::Complete, epochs: 100, batch_size: 16, lr: 1e-3, ..Self::reconstruction() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(config_err!("learning rate must be finite and nonnegative, got {}", self.lr));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(config_err!("grad_clip must be positive, got {c}"));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(config_err!("checkpoint_every must be positive"));
        }
        Ok(())
    }

    pub fn should_checkpoint(&self, completed_epochs: usize) -> bool {
        completed_epochs == self.epochs || self.checkpoint_every.is_some_and(|k| completed_epochs % k == 0)
    }
}

/// A per-item differentiable objective.
pub trait Objective: Sync {
    type Item: Sync;

    /// Loss of one item and, when `grad` is set, its parameter gradients.
    fn item_loss(&self, params: &ParamSet, item: &Self::Item, epoch: usize, grad: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)>;
}

/// Runs independent per-item jobs and returns results in item order.
pub trait Executor {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: &(dyn Fn(&T) -> R + Sync)) -> Vec<R>;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: &(dyn Fn(&T) -> R + Sync)) -> Vec<R> {
        items.iter().map(f).collect()
    }
}

/// Chamfer-L2 reconstruction of the input cloud.
pub struct ReconObjective<'a> {
    pub net: &'a ReconstructionNet,
}

impl Objective for ReconObjective<'_> {
    type Item = PointCloud;

    fn item_loss(&self, params: &ParamSet, item: &PointCloud, _epoch: usize, grad: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        item.require_nonempty("reconstruction target")?;
        let mut g = Graph::with_params(params);
        let x = g.constant(item.to_tensor());
        let out = self.net.forward(&mut g, x)?;
        let cd = g.chamfer(out.cloud, x, ChamferKind::L2)?;
        let loss = g.sum(cd);
        finish(&g, loss, params, grad)
    }
}

/// A partial observation and its complete ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionPair {
    pub partial: PointCloud,
    pub gt: PointCloud,
}

/// Two-stage completion loss; the vanilla network trains on its coarse term alone.
pub struct CompletionObjective<'a> {
    pub net: &'a AXformNet,
    pub mode: CompletionMode,
    pub alpha: AlphaSchedule,
}

impl Objective for CompletionObjective<'_> {
    type Item = CompletionPair;

    fn item_loss(&self, params: &ParamSet, item: &CompletionPair, epoch: usize, grad: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        item.gt.require_nonempty("completion target")?;
        let mut g = Graph::with_params(params);
        let out = self.net.forward(&mut g, &item.partial, self.mode)?;
        let gt = g.constant(item.gt.to_tensor());
        let loss = match self.mode {
            CompletionMode::Full => completion_loss(&mut g, out.coarse, out.final_cloud, gt, self.alpha.at(epoch as f64))?,
            CompletionMode::Vanilla => {
                let cd = g.chamfer(out.coarse, gt, ChamferKind::L1)?;
                g.sum(cd)
            }
        };
        finish(&g, loss, params, grad)
    }
}

fn finish(g: &Graph<'_>, loss: Var, params: &ParamSet, grad: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let value = g.value(loss).item().ok_or_else(|| contract_err!("loss is not a scalar"))?;
    let grads = if grad { Some(g.backward(loss)?.into_param_grads(params)) } else { None };
    Ok((value, grads))
}

/// Mean train and validation loss per completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState,
    pub history: LossHistory,
}

impl TrainState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        TrainState { epoch: 0, adam: AdamState::new(params, lr), history: LossHistory::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    /// Zero-based index of the epoch just finished.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Shuffled item order of `epoch`; a pure function of the seed and epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

fn param_norms(params: &ParamSet) -> String {
    let mut s = String::new();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        if !s.is_empty() {
            s.push_str(", ");
        }
        s.push_str(&format!("{name}={:.6e}", libm::sqrt(t.sq_norm())));
    }
    s
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Mean loss over `items` without gradients.
pub fn evaluate<O: Objective, E: Executor>(objective: &O, params: &ParamSet, items: &[O::Item], epoch: usize, exec: &E) -> Result<f64> {
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = exec.map(items, &|item| objective.item_loss(params, item, epoch, false).map(|r| r.0));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / items.len() as f64)
}

/// Trains from `state.epoch` up to `config.epochs`.
///
/// Batches are formed from a per-epoch seeded shuffle with the last partial
/// batch kept. Per-item gradients are summed in item order, so results do not
/// depend on how the executor schedules work. `on_epoch` runs after every
/// epoch with the updated state.
pub fn train<O, E, F>(
    objective: &O,
    params: &mut ParamSet,
    state: &mut TrainState,
    config: &TrainConfig,
    train_set: &[O::Item],
    val_set: &[O::Item],
    exec: &E,
    mut on_epoch: F,
) -> Result<()>
where
    O: Objective,
    E: Executor,
    F: FnMut(&EpochReport, &ParamSet, &TrainState) -> Result<()>,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(contract_err!("training set is empty"));
    }
    state.adam.check(params)?;
    state.adam.lr = config.lr;
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let order = epoch_order(train_set.len(), config.shuffle_seed, epoch);
        let mut epoch_total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&O::Item> = chunk.iter().map(|&i| &train_set[i]).collect();
            let results = exec.map(&batch, &|item: &&O::Item| objective.item_loss(params, item, epoch, true));
            let mut loss_sum = 0.0;
            let mut grads: Option<Vec<Vec<f64>>> = None;
            for r in results {
                let (l, g) = r.map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!(
                        "epoch {epoch}, batch {b}: {msg}; parameter norms: {}",
                        param_norms(params)
                    )),
                    e => e,
                })?;
                loss_sum += l;
                let g = g.expect("gradients requested");
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&g) {
                            for (u, v) in a.iter_mut().zip(x) {
                                *u += v;
                            }
                        }
                    }
                }
            }
            let n = chunk.len() as f64;
            let mut grads = grads.unwrap_or_default();
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            let finite = loss_sum.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
            if !finite {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {b}: loss {}; parameter norms: {}",
                    loss_sum / n,
                    param_norms(params)
                )));
            }
            if let Some(c) = config.grad_clip {
                clip(&mut grads, c);
            }
            adam_step(params, &grads, &mut state.adam)?;
            epoch_total += loss_sum;
        }
        let train_loss = epoch_total / train_set.len() as f64;
        let val_loss = evaluate(objective, params, val_set, epoch, exec)?;
        if !train_loss.is_finite() || !(val_set.is_empty() || val_loss.is_finite()) {
            return Err(Error::NonFinite(format!(
                "epoch {epoch}: train loss {train_loss}, val loss {val_loss}; parameter norms: {}",
                param_norms(params)
            )));
        }
        state.history.train.push(train_loss);
        state.history.val.push(val_loss);
        state.epoch += 1;
        on_epoch(&EpochReport { epoch, train_loss, val_loss }, params, state)?;
    }
    Ok(())
}
