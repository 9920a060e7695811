//! Maximum-likelihood training with Adam, gradient clipping and early
//! stopping on a held-out split, plus a finite-difference gradient check.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::made::MadeWeights;
use super::{FlowModel, Standardizer, LN_2PI};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub val_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    /// Training sets smaller than this are flagged in the history.
    pub min_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            learning_rate: 5e-4,
            grad_clip_norm: 5.0,
            val_fraction: 0.1,
            patience: 20,
            max_epochs: 500,
            adam: AdamConfig::default(),
            min_rows: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::validation("val_fraction must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::validation("batch_size, max_epochs and patience must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::validation("learning_rate and grad_clip_norm must be positive"));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::validation("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// Raw (untransformed, unstandardized) training pairs, one row per simulation.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub theta: Array2<f64>,
    pub ctx: Array2<f64>,
}

impl TrainData {
    pub fn new(theta: Array2<f64>, ctx: Array2<f64>) -> Result<Self> {
        if theta.nrows() != ctx.nrows() {
            return Err(Error::validation("parameter and context row counts differ"));
        }
        if theta.nrows() == 0 {
            return Err(Error::validation("training data is empty"));
        }
        Ok(TrainData { theta, ctx })
    }

    pub fn len(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.nrows() == 0
    }
}

/// Losses are mean negative log densities of the standardized parameters;
/// entry 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub config: TrainConfig,
    pub warnings: Vec<String>,
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    t: i32,
    m: Vec<MadeWeights>,
    v: Vec<MadeWeights>,
}

impl Adam {
    fn new(model: &FlowModel, cfg: AdamConfig, lr: f64) -> Self {
        let zeros: Vec<MadeWeights> = model
            .blocks
            .iter()
            .map(|b| MadeWeights::zeros(&b.made.arch))
            .collect();
        Adam {
            cfg,
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, model: &mut FlowModel, grads: &[MadeWeights]) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        let eps = self.cfg.eps;
        for (k, block) in model.blocks.iter_mut().enumerate() {
            let ws = block.made.weights.tensors_mut();
            let gs = grads[k].tensors();
            let ms = self.m[k].tensors_mut();
            let vs = self.v[k].tensors_mut();
            for (((w, g), m), v) in ws.into_iter().zip(gs).zip(ms).zip(vs) {
                for j in 0..w.len() {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                }
            }
            block.made.enforce_masks();
        }
    }
}

fn zero_grads(model: &FlowModel) -> Vec<MadeWeights> {
    model
        .blocks
        .iter()
        .map(|b| MadeWeights::zeros(&b.made.arch))
        .collect()
}

fn grad_norm(grads: &[MadeWeights]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.tensors())
        .flat_map(|t| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

impl FlowModel {
    /// Mean standardized-space negative log density of a batch and its
    /// gradient with respect to every weight (accumulated into `grads`).
    pub fn loss_and_grad(&self, u: ArrayView2<f64>, ctx: ArrayView2<f64>, grads: &mut [MadeWeights]) -> f64 {
        let n = u.nrows() as f64;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut v = u.to_owned();
        let mut logdet_sum = 0.0;
        for b in &self.blocks {
            let x = b.permute(v.view());
            let (z, ld, cache) = b.made.forward_cached(x.view(), ctx);
            logdet_sum += ld.sum();
            caches.push(cache);
            v = z;
        }
        let sq: f64 = v.iter().map(|x| x * x).sum();
        let loss = 0.5 * sq / n + 0.5 * self.arch.dim as f64 * LN_2PI - logdet_sum / n;

        let mut g = v / n;
        for (k, b) in self.blocks.iter().enumerate().rev() {
            let gx = b.made.backward(&caches[k], ctx, g.view(), 1.0 / n, &mut grads[k]);
            g = b.unpermute(gx.view());
        }
        loss
    }
}

fn rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(0), idx)
}

/// Trains `model` on `data`. Fits the standardizer on the training split
/// when the model has none. Returns the weights of the epoch with the
/// lowest validation loss.
pub fn train<R: Rng + ?Sized>(
    mut model: FlowModel,
    data: &TrainData,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(FlowModel, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::validation("training data is empty"));
    }
    if data.theta.ncols() != model.arch.dim || data.ctx.ncols() != model.arch.ctx_dim {
        return Err(Error::validation("training data shape does not match the flow"));
    }
    let (t_all, jac) = model.transform_rows(data.theta.view());
    if jac.iter().any(Option::is_none) {
        return Err(Error::validation("training parameters outside the transform domain"));
    }

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_val = if n >= 2 {
        ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = if val_idx.is_empty() { train_idx } else { val_idx };

    let mut warnings = Vec::new();
    if train_idx.len() < cfg.min_rows {
        warnings.push(format!(
            "insufficient data: {} training rows (recommended at least {})",
            train_idx.len(),
            cfg.min_rows
        ));
    }

    let mut u_train = rows(&t_all, train_idx);
    let c_train_raw = rows(&data.ctx, train_idx);
    if model.standardizer.is_none() {
        model.standardizer = Some(Standardizer::fit(u_train.view(), c_train_raw.view())?);
    }
    let st = model.standardizer()?.clone();
    st.standardize_theta(&mut u_train);
    let c_train = st.standardize_ctx(c_train_raw.view());
    let mut u_val = rows(&t_all, val_idx);
    st.standardize_theta(&mut u_val);
    let c_val = st.standardize_ctx(rows(&data.ctx, val_idx).view());

    let mut history = TrainHistory {
        train_loss: vec![model.standardized_nll(u_train.view(), c_train.view())],
        val_loss: vec![model.standardized_nll(u_val.view(), c_val.view())],
        best_epoch: 0,
        best_val_loss: 0.0,
        epochs_run: 0,
        stopped_early: false,
        n_train: train_idx.len(),
        n_val,
        config: *cfg,
        warnings,
    };
    history.best_val_loss = history.val_loss[0];
    if !history.best_val_loss.is_finite() {
        return Err(Error::Diverged { epoch: 0, batch: 0 });
    }
    let mut best = model.clone();
    let mut adam = Adam::new(&model, cfg.adam, cfg.learning_rate);
    let mut since_best = 0usize;
    let mut perm: Vec<usize> = (0..train_idx.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        perm.shuffle(rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in perm.chunks(cfg.batch_size).enumerate() {
            let ub = rows(&u_train, chunk);
            let cb = rows(&c_train, chunk);
            let mut grads = zero_grads(&model);
            let loss = model.loss_and_grad(ub.view(), cb.view(), &mut grads);
            let norm = grad_norm(&grads);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            if norm > cfg.grad_clip_norm {
                let scale = cfg.grad_clip_norm / norm;
                for g in &mut grads {
                    for t in g.tensors_mut() {
                        t.iter_mut().for_each(|v| *v *= scale);
                    }
                }
            }
            adam.step(&mut model, &grads);
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / perm.len() as f64;
        let val_loss = model.standardized_nll(u_val.view(), c_val.view());
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: perm.len().div_ceil(cfg.batch_size),
            });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.epochs_run = epoch;
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Masked-out weights whose analytic gradient was not exactly zero.
    pub masked_nonzero: usize,
}

/// Finite-difference step.
const GRADCHECK_H: f64 = 1e-5;
/// Relative error denominator floor.
const GRADCHECK_FLOOR: f64 = 1e-3;

/// Compares analytic weight gradients of the standardized loss on one batch
/// with central differences. `max_params` limits how many free weights are
/// checked, spread evenly over the model.
pub fn gradcheck(model: &FlowModel, u: ArrayView2<f64>, ctx: ArrayView2<f64>, max_params: Option<usize>) -> GradcheckReport {
    let mut grads = zero_grads(model);
    model.loss_and_grad(u, ctx, &mut grads);

    let mut free: Vec<(usize, usize, usize)> = Vec::new();
    let mut masked_nonzero = 0;
    for (k, b) in model.blocks.iter().enumerate() {
        let masks = b.made.tensor_masks();
        for (ti, g) in grads[k].tensors().into_iter().enumerate() {
            for j in 0..g.len() {
                match masks[ti] {
                    Some(m) if m[j] == 0.0 => {
                        if g[j] != 0.0 {
                            masked_nonzero += 1;
                        }
                    }
                    _ => free.push((k, ti, j)),
                }
            }
        }
    }
    let stride = match max_params {
        Some(m) if m > 0 && free.len() > m => free.len().div_ceil(m),
        _ => 1,
    };

    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for &(k, ti, j) in free.iter().step_by(stride) {
        let orig = model.blocks[k].made.weights.tensors()[ti][j];
        probe.blocks[k].made.weights.tensors_mut()[ti][j] = orig + GRADCHECK_H;
        let lp = probe.standardized_nll(u, ctx);
        probe.blocks[k].made.weights.tensors_mut()[ti][j] = orig - GRADCHECK_H;
        let lm = probe.standardized_nll(u, ctx);
        probe.blocks[k].made.weights.tensors_mut()[ti][j] = orig;
        let numeric = (lp - lm) / (2.0 * GRADCHECK_H);
        let analytic = grads[k].tensors()[ti][j];
        let denom = analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
        checked += 1;
    }
    GradcheckReport {
        max_rel_err: max_rel,
        checked,
        masked_nonzero,
    }
}
