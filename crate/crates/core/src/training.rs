//! Multi-task losses, adaptive task weights, AdamW and the training loop.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{collate, Sample};
use crate::model::{Batch, Model, ModelOutput, SdcSource};
use crate::heads::argmax_classes;
use crate::nn::{ParamGrads, ParamStore, Session};
use crate::scoring::{Predictions, TaskMetrics};
use crate::tensor::{SparseMap, Tensor, Var};
use crate::{Error, Real, Result};

pub const NUM_TASKS: usize = 7;
pub const TASK_NAMES: [&str; NUM_TASKS] = ["seg", "tl", "ss", "st", "th", "br", "wp"];

const P_MIN: f64 = 1e-7;
const DICE_EPS: f64 = 1e-6;

/// Mean binary cross-entropy plus soft Dice loss on probabilities.
pub fn seg_loss<T: Real>(s: &mut Session<'_, T>, probs: Var, gt: &Tensor<T>) -> Result<Var> {
    if s.shape(probs) != gt.shape() {
        return Err(Error::shape("seg_loss", s.shape(probs), gt.shape()));
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Data(format!("segmentation target value {v} is not 0 or 1")));
    }
    let p = s.clamp(probs, T::c(P_MIN), T::c(1.0 - P_MIN))?;
    let y = s.constant(gt.clone());
    let not_y = s.constant(Tensor::from_fn(gt.shape(), |i| T::one() - gt.data()[i]));
    let lp = s.ln(p)?;
    let q = s.scale(p, -T::one())?;
    let q = s.add_scalar(q, T::one())?;
    let lq = s.ln(q)?;
    let a = s.mul(y, lp)?;
    let b = s.mul(not_y, lq)?;
    let ce = s.add(a, b)?;
    let ce = s.mean(ce)?;
    let bce = s.scale(ce, -T::one())?;

    let inter = s.mul(p, y)?;
    let inter = s.sum(inter)?;
    let sp = s.sum(p)?;
    let sy: T = gt.data().iter().copied().sum();
    let den = s.add_scalar(sp, sy + T::c(DICE_EPS))?;
    let ratio = s.div(inter, den)?;
    let ratio = s.scale(ratio, T::c(-2.0))?;
    let dice = s.add_scalar(ratio, T::one())?;
    s.add(bce, dice)
}

/// Mean absolute error.
pub fn l1_loss<T: Real>(s: &mut Session<'_, T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    if s.shape(pred) != gt.shape() {
        return Err(Error::shape("l1_loss", s.shape(pred), gt.shape()));
    }
    let y = s.constant(gt.clone());
    let d = s.sub(pred, y)?;
    let d = s.abs(d)?;
    s.mean(d)
}

fn column<T: Real>(s: &mut Session<'_, T>, x: Var, k: usize) -> Result<Var> {
    let sh = s.shape(x).to_vec();
    let (b, c) = (sh[0], sh[1]);
    let map = SparseMap::gather(b * c, (0..b).map(|i| Some(i * c + k)));
    s.map(x, Arc::new(map), &[b, 1])
}

fn column_tensor<T: Real>(t: &Tensor<T>, k: usize) -> Tensor<T> {
    let c = t.shape()[1];
    let b = t.shape()[0];
    Tensor::from_fn(&[b, 1], |i| t.data()[i * c + k])
}

/// The seven task losses in the order seg, tl, ss, st, th, br, wp. A
/// non-finite value is reported with the task's name.
pub fn task_losses<T: Real>(s: &mut Session<'_, T>, out: &ModelOutput, batch: &Batch<T>) -> Result<[Var; NUM_TASKS]> {
    let named = |k: usize, r: Result<Var>| -> Result<Var> {
        r.map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { task: TASK_NAMES[k] },
            other => other,
        })
    };
    let probs = s.sigmoid(out.seg_logits).map_err(|_| Error::NonFiniteLoss { task: "seg" })?;
    let seg = named(0, seg_loss(s, probs, &batch.seg_gt))?;
    let tl = named(1, l1_loss(s, out.control.flags.tl, &batch.tl))?;
    let ss = named(2, l1_loss(s, out.control.flags.ss, &batch.ss))?;
    let mut ctl = [seg; 3];
    for (k, slot) in ctl.iter_mut().enumerate() {
        let pred = column(s, out.control.controls, k)?;
        *slot = named(3 + k, l1_loss(s, pred, &column_tensor(&batch.controls, k)))?;
    }
    let wp = named(6, l1_loss(s, out.control.rollout.waypoints, &batch.waypoints))?;
    let losses = [seg, tl, ss, ctl[0], ctl[1], ctl[2], wp];
    for (k, &v) in losses.iter().enumerate() {
        if !s.value(v).item().is_finite() {
            return Err(Error::NonFiniteLoss { task: TASK_NAMES[k] });
        }
    }
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskWeights(pub [f64; NUM_TASKS]);

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights([1.0; NUM_TASKS])
    }
}

impl TaskWeights {
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `Σ α_k L_k`.
pub fn total_loss<T: Real>(s: &mut Session<'_, T>, losses: &[Var; NUM_TASKS], w: &TaskWeights) -> Result<Var> {
    let mut acc = s.scale(losses[0], T::c(w.0[0]))?;
    for k in 1..NUM_TASKS {
        let t = s.scale(losses[k], T::c(w.0[k]))?;
        acc = s.add(acc, t)?;
    }
    Ok(acc)
}

/// Gradient-norm balancing: `α_k ← α_k · mean(G) / G_k`, then rescaled so
/// the weights sum to 7. Norms are floored at 1e-12. All-zero norms leave
/// the weights unchanged and return `false`.
pub fn mgn_update(w: &TaskWeights, norms: &[f64; NUM_TASKS]) -> (TaskWeights, bool) {
    if norms.iter().all(|&g| g == 0.0) || norms.iter().any(|g| !g.is_finite()) {
        return (*w, false);
    }
    let g: Vec<f64> = norms.iter().map(|&g| g.max(1e-12)).collect();
    let mean = g.iter().sum::<f64>() / NUM_TASKS as f64;
    let mut a = [0.0; NUM_TASKS];
    for k in 0..NUM_TASKS {
        a[k] = w.0[k] * mean / g[k];
    }
    let total: f64 = a.iter().sum();
    for v in &mut a {
        *v *= NUM_TASKS as f64 / total;
    }
    (TaskWeights(a), true)
}

/// Adam with decoupled weight decay, applied to every parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.ids().map(|id| alloc::vec![0.0; store.get(id).numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters without a gradient are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &ParamGrads<f32>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let g = grads.get(id);
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                p[i] = p[i] * decay - (lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience_lr: usize,
    pub patience_stop: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mgn: bool,
    pub sdc_source: SdcSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-3,
            batch_size: 8,
            patience_lr: 3,
            patience_stop: 15,
            max_epochs: 100,
            seed: 0,
            mgn: true,
            sdc_source: SdcSource::GroundTruth,
        }
    }
}

/// Learning-rate halving and early stopping on validation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val: f64,
    pub since_improvement: usize,
    /// stagnant epochs since the last halving
    pub since_halving: usize,
    pub lr: f64,
    pub stopped: bool,
}

impl TrainState {
    pub fn new(lr: f64) -> Self {
        TrainState {
            epoch: 0,
            best_val: f64::INFINITY,
            since_improvement: 0,
            since_halving: 0,
            lr,
            stopped: false,
        }
    }

    /// Records one epoch's validation loss; returns whether it improved.
    pub fn observe(&mut self, val: f64, patience_lr: usize, patience_stop: usize) -> bool {
        self.epoch += 1;
        if val < self.best_val {
            self.best_val = val;
            self.since_improvement = 0;
            self.since_halving = 0;
            return true;
        }
        self.since_improvement += 1;
        self.since_halving += 1;
        if self.since_halving >= patience_lr {
            self.lr /= 2.0;
            self.since_halving = 0;
        }
        if self.since_improvement >= patience_stop {
            self.stopped = true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// learning rate used during the epoch
    pub lr: f64,
    /// mean weighted total over training batches
    pub train_loss: f64,
    pub train_tasks: [f64; NUM_TASKS],
    /// unweighted sum of validation task losses
    pub val_loss: f64,
    pub val_tasks: [f64; NUM_TASKS],
    /// weights used during the epoch
    pub alpha: [f64; NUM_TASKS],
    pub improved: bool,
    pub stop: bool,
}

/// Task losses of one batch without building gradients for the caller.
pub fn evaluate_batch<T: Real>(model: &Model, store: &ParamStore<T>, batch: &Batch<T>, source: SdcSource) -> Result<[f64; NUM_TASKS]> {
    let mut s = Session::new(store);
    let out = model.forward(&mut s, batch, source)?;
    let l = task_losses(&mut s, &out, batch)?;
    Ok(l.map(|v| s.value(v).item().f64()))
}

/// Sample-weighted mean task losses over a set.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, samples: &[Sample], cfg: &TrainConfig) -> Result<[f64; NUM_TASKS]> {
    let mut acc = [0.0; NUM_TASKS];
    let mut count = 0usize;
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = collate::<f32>(&refs, &model.cfg.bev, model.cfg.lidar)?;
        let l = evaluate_batch(model, store, &batch, cfg.sdc_source)?;
        for k in 0..NUM_TASKS {
            acc[k] += l[k] * chunk.len() as f64;
        }
        count += chunk.len();
    }
    if count == 0 {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    Ok(acc.map(|v| v / count as f64))
}

/// Task metrics and losses over a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: TaskMetrics,
    pub task_losses: [f64; NUM_TASKS],
    /// unweighted mean of the seven task losses
    pub test_loss: f64,
    pub samples: usize,
}

/// Model predictions and the matching ground truth for every sample, in
/// order, plus the sample-weighted task losses.
pub fn predict(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Predictions, Predictions, [f64; NUM_TASKS])> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let n = samples.len();
    let mut pred = Predictions {
        seg: Vec::new(),
        waypoints: Tensor::zeros(&[n, 3, 2]),
        controls: Tensor::zeros(&[n, 3]),
        tl: Vec::with_capacity(n),
        ss: Vec::with_capacity(n),
    };
    let mut gt = pred.clone();
    let mut losses = [0.0; NUM_TASKS];
    let mut done = 0;
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = collate::<f32>(&refs, &model.cfg.bev, model.cfg.lidar)?;
        let mut s = Session::new(store);
        let out = model.forward(&mut s, &batch, cfg.sdc_source)?;
        let l = task_losses(&mut s, &out, &batch)?;
        for k in 0..NUM_TASKS {
            losses[k] += s.value(l[k]).item().f64() * chunk.len() as f64;
        }
        pred.seg.extend(argmax_classes(s.value(out.seg_logits))?);
        gt.seg.extend_from_slice(&batch.seg_classes);
        let (wp, ct) = (done * 6..(done + chunk.len()) * 6, done * 3..(done + chunk.len()) * 3);
        pred.waypoints.data_mut()[wp.clone()].copy_from_slice(s.data(out.control.rollout.waypoints));
        gt.waypoints.data_mut()[wp].copy_from_slice(batch.waypoints.data());
        pred.controls.data_mut()[ct.clone()].copy_from_slice(s.data(out.control.controls));
        gt.controls.data_mut()[ct].copy_from_slice(batch.controls.data());
        pred.tl.extend(s.data(out.control.flags.tl).iter().map(|&v| v as f64));
        pred.ss.extend(s.data(out.control.flags.ss).iter().map(|&v| v as f64));
        gt.tl.extend(batch.tl.data().iter().map(|&v| v as f64));
        gt.ss.extend(batch.ss.data().iter().map(|&v| v as f64));
        done += chunk.len();
    }
    Ok((pred, gt, losses.map(|v| v / n as f64)))
}

pub fn evaluate_report(model: &Model, store: &ParamStore<f32>, samples: &[Sample], cfg: &TrainConfig) -> Result<EvalReport> {
    let (pred, gt, task_losses) = predict(model, store, samples, cfg)?;
    Ok(EvalReport {
        metrics: TaskMetrics::compute(&pred, &gt)?,
        test_loss: task_losses.iter().sum::<f64>() / NUM_TASKS as f64,
        task_losses,
        samples: samples.len(),
    })
}

/// Per-task gradient norms `‖∇ α_k L_k‖` over all parameters on one batch.
pub fn task_gradient_norms(
    model: &Model,
    store: &ParamStore<f32>,
    batch: &Batch<f32>,
    w: &TaskWeights,
    source: SdcSource,
) -> Result<[f64; NUM_TASKS]> {
    let mut s = Session::new(store);
    let out = model.forward(&mut s, batch, source)?;
    let losses = task_losses(&mut s, &out, batch)?;
    let mut norms = [0.0; NUM_TASKS];
    for k in 0..NUM_TASKS {
        s.clear_grads();
        let g = s.backward(losses[k])?;
        norms[k] = w.0[k] * g.norm();
    }
    Ok(norms)
}

/// Training run state that survives across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub state: TrainState,
    pub weights: TaskWeights,
    /// Weights at the best validation loss so far.
    pub best: Option<ParamStore<f32>>,
}

impl Trainer {
    pub fn new(store: &ParamStore<f32>, cfg: TrainConfig) -> Self {
        Trainer {
            cfg,
            opt: AdamW::new(store, cfg.weight_decay),
            state: TrainState::new(cfg.lr),
            weights: TaskWeights::default(),
            best: None,
        }
    }

    /// One pass over `train` in a seeded shuffled order, then validation,
    /// scheduling and (optionally) a task-weight update.
    pub fn epoch(&mut self, model: &Model, store: &mut ParamStore<f32>, train: &[Sample], val: &[Sample]) -> Result<EpochReport> {
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let epoch = self.state.epoch;
        let lr = self.state.lr;
        let alpha = self.weights.0;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        let mut total = 0.0;
        let mut tasks = [0.0; NUM_TASKS];
        for chunk in order.chunks(self.cfg.batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = collate::<f32>(&refs, &model.cfg.bev, model.cfg.lidar)?;
            let grads = {
                let mut s = Session::new(store);
                let out = model.forward(&mut s, &batch, self.cfg.sdc_source)?;
                let losses = task_losses(&mut s, &out, &batch)?;
                let loss = total_loss(&mut s, &losses, &self.weights)?;
                for k in 0..NUM_TASKS {
                    let v = s.value(losses[k]).item().f64();
                    if !v.is_finite() {
                        return Err(Error::NonFiniteLoss { task: TASK_NAMES[k] });
                    }
                    tasks[k] += v * chunk.len() as f64;
                }
                let lv = s.value(loss).item().f64();
                if !lv.is_finite() {
                    return Err(Error::NonFiniteLoss { task: "total" });
                }
                total += lv * chunk.len() as f64;
                s.backward(loss)?
            };
            self.opt.step(store, &grads, lr);
        }
        let n = train.len() as f64;

        let val_set = if val.is_empty() { train } else { val };
        let val_tasks = evaluate(model, store, val_set, &self.cfg)?;
        if let Some(k) = val_tasks.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { task: TASK_NAMES[k] });
        }
        let val_loss: f64 = val_tasks.iter().sum();
        let improved = self.state.observe(val_loss, self.cfg.patience_lr, self.cfg.patience_stop);
        if improved {
            self.best = Some(store.clone());
        }

        if self.cfg.mgn {
            let k = train.len().min(self.cfg.batch_size.max(1));
            let refs: Vec<&Sample> = train[..k].iter().collect();
            let probe = collate::<f32>(&refs, &model.cfg.bev, model.cfg.lidar)?;
            let norms = task_gradient_norms(model, store, &probe, &self.weights, self.cfg.sdc_source)?;
            self.weights = mgn_update(&self.weights, &norms).0;
        }

        Ok(EpochReport {
            epoch: epoch + 1,
            lr,
            train_loss: total / n,
            train_tasks: tasks.map(|v| v / n),
            val_loss,
            val_tasks,
            alpha,
            improved,
            stop: self.state.stopped || self.state.epoch >= self.cfg.max_epochs,
        })
    }

    /// Epochs until early stopping or `max_epochs`; `on_epoch` sees each report.
    pub fn fit(
        &mut self,
        model: &Model,
        store: &mut ParamStore<f32>,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&EpochReport),
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while !self.state.stopped && self.state.epoch < self.cfg.max_epochs {
            let r = self.epoch(model, store, train, val)?;
            on_epoch(&r);
            let stop = r.stop;
            reports.push(r);
            if stop {
                break;
            }
        }
        Ok(reports)
    }
}

/// Deterministic split of `n` indices into (train, validation); the
/// validation share is `floor(n · fraction)`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let nv = (n as f64 * fraction).floor() as usize;
    let val = idx[..nv].to_vec();
    let mut train = idx[nv..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn session_loss(f: impl Fn(&mut Session<'_, f64>) -> Result<Var>) -> f64 {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store);
        let v = f(&mut s).unwrap();
        s.value(v).item()
    }

    #[test]
    fn perfect_segmentation_is_near_zero() {
        let gt = Tensor::from_fn(&[1, 23, 2, 2], |i| if i % 23 == 0 { 1.0 } else { 0.0 });
        let l = session_loss(|s| {
            let p = s.constant(gt.clone());
            seg_loss(s, p, &gt)
        });
        assert!(l.abs() < 1e-5, "{l}");
    }

    #[test]
    fn degenerate_dice_is_finite() {
        let gt = Tensor::<f64>::zeros(&[1, 23, 2, 2]);
        let l = session_loss(|s| {
            let p = s.constant(Tensor::zeros(&[1, 23, 2, 2]));
            seg_loss(s, p, &gt)
        });
        assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn seg_loss_matches_direct_formula() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let n = 2 * 2 * 3;
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let mut bce = 0.0;
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            bce -= y[i] * p[i].ln() + (1.0 - y[i]) * (1.0 - p[i]).ln();
            inter += p[i] * y[i];
            sp += p[i];
            sy += y[i];
        }
        let want = bce / n as f64 + 1.0 - 2.0 * inter / (sp + sy + 1e-6);
        let gt = Tensor::from_f64(&[2, 2, 3], &y).unwrap();
        let got = session_loss(|s| {
            let pv = s.constant(Tensor::from_f64(&[2, 2, 3], &p).unwrap());
            seg_loss(s, pv, &gt)
        });
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_rejects_non_binary_targets() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store);
        let p = s.constant(Tensor::full(&[2], 0.5));
        let gt = Tensor::from_f64(&[2], &[0.0, 0.5]).unwrap();
        assert!(matches!(seg_loss(&mut s, p, &gt), Err(Error::Data(_))));
    }

    #[test]
    fn l1_examples() {
        let gt = Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
        let l = session_loss(|s| {
            let p = s.constant(Tensor::zeros(&[1, 2]));
            l1_loss(s, p, &gt)
        });
        assert_eq!(l, 3.5);
        let l = session_loss(|s| {
            let p = s.constant(gt.clone());
            l1_loss(s, p, &gt)
        });
        assert_eq!(l, 0.0);
    }

    #[test]
    fn l1_gradient_is_sign_over_n() {
        let gt = Tensor::from_f64(&[4], &[1.0, -1.0, 2.0, 0.0]).unwrap();
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store);
        let p = s.leaf(Tensor::from_f64(&[4], &[2.0, -3.0, 2.0, 0.5]).unwrap().with_requires_grad(true));
        let l = l1_loss(&mut s, p, &gt).unwrap();
        s.backward(l).unwrap();
        assert_eq!(s.grad(p).unwrap(), &[0.25, -0.25, 0.0, 0.25]);
    }

    #[test]
    fn total_loss_examples() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store);
        let ones: [Var; 7] = core::array::from_fn(|_| s.constant(Tensor::scalar(1.0)));
        let t = total_loss(&mut s, &ones, &TaskWeights::default()).unwrap();
        assert_eq!(s.value(t).item(), 7.0);
        let l: [Var; 7] = core::array::from_fn(|k| s.constant(Tensor::scalar(k as f64 + 0.5)));
        let w = TaskWeights([0.5, 1.0, 1.5, 2.0, 0.25, 0.75, 1.0]);
        let t = total_loss(&mut s, &l, &w).unwrap();
        let want: f64 = (0..7).map(|k| w.0[k] * (k as f64 + 0.5)).sum();
        assert!((s.value(t).item() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_removes_a_task_gradient() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store);
        let xs: Vec<Var> = (0..7).map(|k| s.leaf(Tensor::scalar(k as f64 + 1.0).with_requires_grad(true))).collect();
        let l: [Var; 7] = core::array::from_fn(|k| s.mul(xs[k], xs[k]).unwrap());
        let mut w = TaskWeights::default();
        w.0[2] = 0.0;
        let t = total_loss(&mut s, &l, &w).unwrap();
        s.backward(t).unwrap();
        assert_eq!(s.grad(xs[2]).unwrap(), &[0.0]);
        assert_eq!(s.grad(xs[3]).unwrap(), &[8.0]);
    }

    #[test]
    fn mgn_rule() {
        let w = TaskWeights::default();
        assert_eq!(mgn_update(&w, &[2.0; 7]).0, w);
        let norms = [4.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0];
        // mean 2 = half of task 0's norm
        let mean = norms.iter().sum::<f64>() / 7.0;
        assert_eq!(mean, 2.0);
        let (u, ok) = mgn_update(&w, &norms);
        assert!(ok);
        let raw: Vec<f64> = norms.iter().map(|g| mean / g).collect();
        let scale = 7.0 / raw.iter().sum::<f64>();
        assert!((u.0[0] - 0.5 * scale).abs() < 1e-12);
        assert!((u.sum() - 7.0).abs() < 1e-12);
        let (same, ok) = mgn_update(&w, &[0.0; 7]);
        assert!(!ok && same == w);
    }

    #[test]
    fn adamw_decays_unused_parameters() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", Tensor::full(&[3], 2.0));
        let mut opt = AdamW::new(&store, 1e-3);
        let lr = 1e-2;
        let grads = {
            let s = Session::new(&store);
            let mut s = s;
            let c = s.constant(Tensor::scalar(1.0));
            s.backward(c).unwrap()
        };
        let mut want = 2.0f32;
        for _ in 0..5 {
            opt.step(&mut store, &grads, lr);
            want *= (1.0 - lr * 1e-3) as f32;
        }
        for &v in store.get(id).data() {
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn schedule_boundaries() {
        let mut st = TrainState::new(1e-4);
        assert!(st.observe(1.0, 3, 15));
        for _ in 0..2 {
            st.observe(1.0, 3, 15);
        }
        assert_eq!(st.lr, 1e-4);
        st.observe(1.0, 3, 15);
        assert_eq!(st.lr, 5e-5);
        for _ in 4..14 {
            st.observe(2.0, 3, 15);
        }
        assert_eq!(st.since_improvement, 13);
        st.observe(2.0, 3, 15);
        assert_eq!(st.since_improvement, 14);
        assert!(!st.stopped);
        st.observe(2.0, 3, 15);
        assert!(st.stopped);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (t, v) = split_indices(200, 0.1, 4);
        assert_eq!((t.len(), v.len()), (180, 20));
        assert_eq!(split_indices(200, 0.1, 4), (t.clone(), v.clone()));
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(split_indices(1, 0.1, 4).1.len(), 0);
    }
}
