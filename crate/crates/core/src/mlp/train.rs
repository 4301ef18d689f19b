//! Mini-batch Adam on binary cross-entropy, with optional fake-quantized
//! weights and straight-through gradients.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dot, sigmoid, Evaluator, MlpArch, MlpError, MlpModel, QuantScheme};
use crate::baseline::{window_slice, ReadoutWindow};
use crate::metrics::ConfusionCounts;
use crate::physics::{ShotSet, State};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// How the inference-mode batch-norm statistics are maintained.
    pub bn_stats: BnStats,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BnStats {
    /// Exponential moving average of batch statistics, seeded by the first
    /// batch.
    Running { momentum: f64 },
    /// Exact statistics over the whole training set, recomputed after every
    /// epoch. An exponential average lags badly on raw codes: the inputs sit
    /// near mid-scale, so a small weight update moves every pre-activation
    /// by many standard deviations.
    Population,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 1024,
            max_epochs: 50,
            patience: 5,
            bn_stats: BnStats::Population,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MlpError> {
        let bad = |m: &str| Err(MlpError::BadConfig(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be > 0");
        }
        if let BnStats::Running { momentum } = self.bn_stats {
            if !(0.0..=1.0).contains(&momentum) {
                return bad("batch-norm momentum must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_fidelity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_fidelity: f64,
    pub stopped_early: bool,
}

/// Typical magnitude of a raw 14-bit input code.
pub const INPUT_SCALE: f64 = 8192.0;

/// Glorot-uniform weights, zero biases, identity batch-norm.
///
/// Glorot assumes unit-scale inputs; the first layer sees raw codes, so its
/// limit is divided by [`INPUT_SCALE`]. Batch-norm makes the forward pass
/// indifferent to that scale, but Adam's fixed step size is not: large
/// random initial weights take thousands of steps to wash out.
pub fn init_model(arch: MlpArch, seed: u64) -> MlpModel {
    let mut r = rng::stream(seed, &[0x1417]);
    let mut m = MlpModel::zeros(arch);
    let l1 = (6.0 / (arch.n_in + arch.n_hidden) as f64).sqrt() / INPUT_SCALE;
    let l2 = (6.0 / (arch.n_hidden + arch.n_out) as f64).sqrt();
    m.w1.iter_mut().for_each(|w| *w = r.random_range(-l1..l1));
    m.w2.iter_mut().for_each(|w| *w = r.random_range(-l2..l2));
    m
}

/// Whether batch-norm normalizes with the batch's own statistics
/// (training) or the stored running statistics (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Frozen,
}

/// Gradients of the mean loss with respect to every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

struct Pass {
    loss: f64,
    grads: Gradients,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

fn bce_with_logit(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

fn batch_pass<T: Copy + Into<f64>>(
    m: &MlpModel,
    w1: &[f64],
    w2: &[f64],
    rows: &[&[T]],
    y: &[f64],
    mode: BnMode,
) -> Pass {
    let b = rows.len();
    let h = m.arch.n_hidden;
    let n = m.arch.n_in;
    let bf = b as f64;

    let mut z = vec![0.0; b * h];
    for (r, x) in rows.iter().enumerate() {
        for i in 0..h {
            z[r * h + i] = dot(&w1[i * n..(i + 1) * n], x) + m.b1[i];
        }
    }

    let mut batch_mean = vec![0.0; h];
    let mut batch_var = vec![0.0; h];
    for i in 0..h {
        let mu = (0..b).map(|r| z[r * h + i]).sum::<f64>() / bf;
        let var = (0..b).map(|r| (z[r * h + i] - mu).powi(2)).sum::<f64>() / bf;
        batch_mean[i] = mu;
        batch_var[i] = var;
    }
    let (mu, var) = match mode {
        BnMode::Batch => (&batch_mean, &batch_var),
        BnMode::Frozen => (&m.bn.mean, &m.bn.var),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + m.bn.epsilon).sqrt()).collect();

    let mut zhat = vec![0.0; b * h];
    let mut act = vec![0.0; b * h];
    let mut loss = 0.0;
    let mut dlogit = vec![0.0; b];
    for r in 0..b {
        let mut logit = m.b2;
        for i in 0..h {
            let k = r * h + i;
            zhat[k] = (z[k] - mu[i]) * inv_std[i];
            let mut a = m.bn.gamma[i] * zhat[k] + m.bn.beta[i];
            if m.arch.hidden_relu {
                a = a.max(0.0);
            }
            act[k] = a;
            logit += w2[i] * a;
        }
        loss += bce_with_logit(logit, y[r]);
        dlogit[r] = (sigmoid(logit) - y[r]) / bf;
    }
    loss /= bf;

    let mut g = Gradients {
        w1: vec![0.0; h * n],
        b1: vec![0.0; h],
        gamma: vec![0.0; h],
        beta: vec![0.0; h],
        w2: vec![0.0; h],
        b2: dlogit.iter().sum(),
    };
    // dL/d(normalized) per sample and unit.
    let mut dzhat = vec![0.0; b * h];
    for r in 0..b {
        for i in 0..h {
            let k = r * h + i;
            g.w2[i] += dlogit[r] * act[k];
            let mut da = dlogit[r] * w2[i];
            if m.arch.hidden_relu && act[k] <= 0.0 {
                da = 0.0;
            }
            g.gamma[i] += da * zhat[k];
            g.beta[i] += da;
            dzhat[k] = da * m.bn.gamma[i];
        }
    }
    let mut dz = vec![0.0; b * h];
    match mode {
        BnMode::Batch => {
            for i in 0..h {
                let s1: f64 = (0..b).map(|r| dzhat[r * h + i]).sum();
                let s2: f64 = (0..b).map(|r| dzhat[r * h + i] * zhat[r * h + i]).sum();
                for r in 0..b {
                    let k = r * h + i;
                    dz[k] = inv_std[i] / bf * (bf * dzhat[k] - s1 - zhat[k] * s2);
                }
            }
        }
        BnMode::Frozen => {
            for r in 0..b {
                for i in 0..h {
                    dz[r * h + i] = dzhat[r * h + i] * inv_std[i];
                }
            }
        }
    }
    for (r, x) in rows.iter().enumerate() {
        for i in 0..h {
            let d = dz[r * h + i];
            g.b1[i] += d;
            if d != 0.0 {
                for (gw, &xv) in g.w1[i * n..(i + 1) * n].iter_mut().zip(x.iter()) {
                    *gw += d * xv.into();
                }
            }
        }
    }
    Pass {
        loss,
        grads: g,
        batch_mean,
        batch_var,
    }
}

/// Mean BCE loss and its gradients on one batch, using the model's
/// fake-quantized weights.
pub fn loss_and_gradients<T: Copy + Into<f64>>(
    model: &MlpModel,
    rows: &[&[T]],
    labels: &[State],
    mode: BnMode,
) -> Result<(f64, Gradients), MlpError> {
    model.validate()?;
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(MlpError::ShapeMismatch(format!(
            "{} rows and {} labels",
            rows.len(),
            labels.len()
        )));
    }
    check_rows(rows, model.arch.n_in)?;
    let y: Vec<f64> = labels.iter().map(|l| f64::from(l.bit())).collect();
    let p = batch_pass(model, &model.effective_w1(), &model.effective_w2(), rows, &y, mode);
    Ok((p.loss, p.grads))
}

fn check_rows<T>(rows: &[&[T]], n_in: usize) -> Result<(), MlpError> {
    match rows.iter().position(|r| r.len() != n_in) {
        Some(k) => Err(MlpError::ShapeMismatch(format!(
            "row {k} has {} features, expected {n_in}",
            rows[k].len()
        ))),
        None => Ok(()),
    }
}

/// Set the inference-mode batch-norm statistics to the exact mean and
/// variance of the pre-activations over `rows`.
fn population_stats<T: Copy + Into<f64>>(m: &mut MlpModel, rows: &[&[T]]) {
    if rows.is_empty() {
        return;
    }
    let h = m.arch.n_hidden;
    let n = m.arch.n_in;
    let w1 = m.effective_w1();
    let count = rows.len() as f64;
    for i in 0..h {
        let w = &w1[i * n..(i + 1) * n];
        let z: Vec<f64> = rows.iter().map(|x| dot(w, x) + m.b1[i]).collect();
        let mean = z.iter().sum::<f64>() / count;
        m.bn.mean[i] = mean;
        m.bn.var[i] = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig, t: i32) {
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
        }
    }
}

struct Adam {
    w1: Moments,
    b1: Moments,
    gamma: Moments,
    beta: Moments,
    w2: Moments,
    b2: Moments,
    t: i32,
}

impl Adam {
    fn new(arch: &MlpArch) -> Self {
        let h = arch.n_hidden;
        Adam {
            w1: Moments::new(h * arch.n_in),
            b1: Moments::new(h),
            gamma: Moments::new(h),
            beta: Moments::new(h),
            w2: Moments::new(h),
            b2: Moments::new(1),
            t: 0,
        }
    }

    fn step(&mut self, m: &mut MlpModel, g: &Gradients, cfg: &TrainConfig) {
        self.t = self.t.saturating_add(1);
        let t = self.t;
        self.w1.step(&mut m.w1, &g.w1, cfg, t);
        self.b1.step(&mut m.b1, &g.b1, cfg, t);
        self.gamma.step(&mut m.bn.gamma, &g.gamma, cfg, t);
        self.beta.step(&mut m.bn.beta, &g.beta, cfg, t);
        self.w2.step(&mut m.w2, &g.w2, cfg, t);
        let mut b2 = [m.b2];
        self.b2.step(&mut b2, &[g.b2], cfg, t);
        m.b2 = b2[0];
    }
}

/// Fidelity of the model's hard decisions (logit >= 0 reads excited).
pub fn rows_fidelity<T: Copy + Into<f64>>(
    model: &MlpModel,
    rows: &[&[T]],
    labels: &[State],
) -> Result<f64, MlpError> {
    let ev = Evaluator::new(model);
    let preds: Vec<State> = rows
        .iter()
        .map(|x| decide(ev.logit(x)))
        .collect();
    ConfusionCounts::from_predictions(labels, &preds)
        .map(|c| c.report().fidelity)
        .map_err(|e| MlpError::ShapeMismatch(e.to_string()))
}

pub fn decide(logit: f64) -> State {
    if logit >= 0.0 {
        State::Excited
    } else {
        State::Ground
    }
}

fn check_balance(labels: &[State]) -> Result<(), MlpError> {
    let excited = labels.iter().filter(|&&l| l == State::Excited).count();
    let ground = labels.len() - excited;
    let hi = ground.max(excited) as f64;
    let lo = ground.min(excited) as f64;
    if lo == 0.0 || hi - lo > 0.1 * hi {
        return Err(MlpError::Unbalanced { ground, excited });
    }
    Ok(())
}

/// Train on explicit feature rows. The model's `quant` scheme decides
/// whether the forward pass sees fake-quantized weights.
pub fn train_rows<T: Copy + Into<f64>>(
    model: &MlpModel,
    train_x: &[&[T]],
    train_y: &[State],
    val_x: &[&[T]],
    val_y: &[State],
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainHistory), MlpError> {
    cfg.validate()?;
    model.validate()?;
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(MlpError::ShapeMismatch("rows and labels differ in length".into()));
    }
    check_rows(train_x, model.arch.n_in)?;
    check_rows(val_x, model.arch.n_in)?;
    check_balance(train_y)?;
    check_balance(val_y)?;

    let ternary = matches!(model.quant, QuantScheme::Ternary { .. });
    let y: Vec<f64> = train_y.iter().map(|l| f64::from(l.bit())).collect();
    let mut m = model.clone();
    let mut adam = Adam::new(&m.arch);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut shuffler = rng::stream(cfg.seed, &[0x5_4AFF]);

    let mut history = TrainHistory {
        best_val_fidelity: f64::NEG_INFINITY,
        ..TrainHistory::default()
    };
    let mut best = m.clone();
    let mut stale = 0;
    let mut rows: Vec<&[T]> = Vec::with_capacity(cfg.batch_size);
    let mut ys: Vec<f64> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffler);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            rows.clear();
            ys.clear();
            rows.extend(chunk.iter().map(|&k| train_x[k]));
            ys.extend(chunk.iter().map(|&k| y[k]));
            let w1 = m.effective_w1();
            let w2 = m.effective_w2();
            let mut pass = batch_pass(&m, &w1, &w2, &rows, &ys, BnMode::Batch);
            if !pass.loss.is_finite() {
                return Err(MlpError::Diverged {
                    epoch,
                    batch: bi,
                    loss: pass.loss,
                });
            }
            loss_sum += pass.loss;
            batches += 1;

            if let BnStats::Running { momentum } = cfg.bn_stats {
                if batches == 1 && epoch == 0 {
                    m.bn.mean.clone_from(&pass.batch_mean);
                    m.bn.var.clone_from(&pass.batch_var);
                } else {
                    for i in 0..m.arch.n_hidden {
                        m.bn.mean[i] = momentum * m.bn.mean[i] + (1.0 - momentum) * pass.batch_mean[i];
                        m.bn.var[i] = momentum * m.bn.var[i] + (1.0 - momentum) * pass.batch_var[i];
                    }
                }
            }

            if ternary {
                // Straight-through estimator, cancelled outside [-1, 1].
                for (g, w) in pass.grads.w1.iter_mut().zip(&m.w1) {
                    if w.abs() > 1.0 {
                        *g = 0.0;
                    }
                }
                for (g, w) in pass.grads.w2.iter_mut().zip(&m.w2) {
                    if w.abs() > 1.0 {
                        *g = 0.0;
                    }
                }
            }
            adam.step(&mut m, &pass.grads, cfg);
            if ternary {
                m.w1.iter_mut().for_each(|w| *w = w.clamp(-1.0, 1.0));
                m.w2.iter_mut().for_each(|w| *w = w.clamp(-1.0, 1.0));
            }
        }

        if cfg.bn_stats == BnStats::Population {
            population_stats(&mut m, train_x);
        }
        let val_fidelity = rows_fidelity(&m, val_x, val_y)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_fidelity,
        });
        if val_fidelity > history.best_val_fidelity {
            history.best_val_fidelity = val_fidelity;
            history.best_epoch = epoch;
            best = m.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if history.epochs.is_empty() {
        if cfg.bn_stats == BnStats::Population {
            population_stats(&mut m, train_x);
        }
        best = m;
        history.best_val_fidelity = rows_fidelity(&best, val_x, val_y)?;
    }
    if best.quant.is_quantized() {
        best.snap_to_grid();
    }
    Ok((best, history))
}

fn windowed<'a>(set: &'a ShotSet, w: ReadoutWindow) -> Result<(Vec<&'a [u16]>, Vec<State>), MlpError> {
    let rows = set
        .shots
        .iter()
        .map(|s| window_slice(s, w))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((rows, set.labels()))
}

/// Train with the model's own quantization scheme.
pub fn train(
    model: &MlpModel,
    train: &ShotSet,
    val: &ShotSet,
    w: ReadoutWindow,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainHistory), MlpError> {
    if w.n_features() != model.arch.n_in {
        return Err(MlpError::ShapeMismatch(format!(
            "window {w} gives {} features, network takes {}",
            w.n_features(),
            model.arch.n_in
        )));
    }
    let (tx, ty) = windowed(train, w)?;
    let (vx, vy) = windowed(val, w)?;
    let (mut m, h) = train_rows(model, &tx, &ty, &vx, &vy, cfg)?;
    m.window = Some(w);
    Ok((m, h))
}

/// Quantization-aware training under `scheme`.
pub fn train_qat(
    model: &MlpModel,
    train_set: &ShotSet,
    val: &ShotSet,
    w: ReadoutWindow,
    cfg: &TrainConfig,
    scheme: QuantScheme,
) -> Result<(MlpModel, TrainHistory), MlpError> {
    scheme.validate()?;
    let mut m = model.clone();
    m.quant = scheme;
    train(&m, train_set, val, w, cfg)
}

/// Fidelity of `model` on `set` over its training window.
pub fn evaluate(model: &MlpModel, set: &ShotSet, w: ReadoutWindow) -> Result<crate::metrics::FidelityReport, MlpError> {
    let (rows, labels) = windowed(set, w)?;
    check_rows(&rows, model.arch.n_in)?;
    let ev = Evaluator::new(model);
    let preds: Vec<State> = rows.iter().map(|x| decide(ev.logit(x))).collect();
    ConfusionCounts::from_predictions(&labels, &preds)
        .map(|c| c.report())
        .map_err(|e| MlpError::ShapeMismatch(e.to_string()))
}
