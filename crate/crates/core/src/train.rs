//! Mini-batch SGD with Nesterov momentum, weight decay, step or cosine
//! learning-rate schedules, optional mixup and SAM, and per-epoch optimum
//! shifting applied before the epoch's SGD steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::hessian::{exact_last_layer_trace, hutchinson_trace, HessianError, ModelHessian, Scope, DEFAULT_EPS};
use crate::linalg::{dot, format_real, Matrix};
use crate::net::{accuracy, loss_from_logits, LossKind, MlpModel, NetError, Targets};
use crate::shift::{apply_os, sample_os_batch, OsConfig, OsError, OsReport};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("OS changed the OS-batch loss by {delta:e} at epoch {epoch}")]
    LossDrift { epoch: usize, delta: f64 },
    #[error(transparent)]
    Os(#[from] OsError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Hessian(#[from] HessianError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Largest tolerated OS-batch loss change once half the schedule has run.
pub const OS_LOSS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Schedule {
    /// Multiply by `factor` at each milestone, given as a fraction of the
    /// total epochs.
    Step { milestones: Vec<f64>, factor: f64 },
    Cosine,
}

impl Schedule {
    /// Divide by 10 at 50% and 75% of training.
    pub fn halves() -> Self {
        Schedule::Step {
            milestones: vec![0.5, 0.75],
            factor: 0.1,
        }
    }

    /// Divide by 10 at 25%, 50% and 75% (epochs 50/100/150 of 200).
    pub fn quarters() -> Self {
        Schedule::Step {
            milestones: vec![0.25, 0.5, 0.75],
            factor: 0.1,
        }
    }

    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Step { milestones, factor } => {
                let passed = milestones
                    .iter()
                    .filter(|&&m| epoch >= (m * epochs as f64).round() as usize)
                    .count();
                base * factor.powi(passed as i32)
            }
            Schedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SosSchedule {
    pub os: OsConfig,
    /// Apply OS at the start of every `every`-th epoch (0, every, 2·every, ...).
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianTracking {
    pub every: usize,
    pub probes: usize,
    /// Leading training samples the estimate is taken over.
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub loss: LossKind,
    pub mixup_alpha: Option<f64>,
    pub sam_rho: Option<f64>,
    pub sos: Option<SosSchedule>,
    pub hessian: Option<HessianTracking>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            schedule: Schedule::halves(),
            seed: 0,
            loss: LossKind::CrossEntropy,
            mixup_alpha: None,
            sam_rho: None,
            sos: None,
            hessian: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be ≥ 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if let Some(a) = self.mixup_alpha {
            if !(a > 0.0) {
                return bad(format!("mixup alpha must be > 0, got {a}"));
            }
        }
        if let Some(r) = self.sam_rho {
            if !(r >= 0.0) {
                return bad(format!("sam rho must be ≥ 0, got {r}"));
            }
        }
        if let Some(s) = &self.sos {
            if s.every == 0 {
                return bad("sos every must be ≥ 1".into());
            }
            s.os.validate()?;
        }
        if let Some(h) = &self.hessian {
            if h.every == 0 || h.probes < 2 || h.samples == 0 {
                return bad("hessian tracking needs every ≥ 1, probes ≥ 2, samples ≥ 1".into());
            }
        }
        Ok(())
    }
}

/// SGD with optional (Nesterov) momentum; weight decay is added to the
/// gradient before the momentum update.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
    buffer: Option<Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Self {
            momentum,
            nesterov,
            weight_decay,
            buffer: None,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.momentum, cfg.nesterov, cfg.weight_decay)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let mut d: Vec<f64> = grad
            .iter()
            .zip(params.iter())
            .map(|(g, p)| g + self.weight_decay * p)
            .collect();
        if self.momentum != 0.0 {
            let buf = self.buffer.get_or_insert_with(|| vec![0.0; d.len()]);
            for (b, g) in buf.iter_mut().zip(&d) {
                *b = self.momentum * *b + g;
            }
            if self.nesterov {
                for (g, b) in d.iter_mut().zip(buf.iter()) {
                    *g += self.momentum * b;
                }
            } else {
                d.copy_from_slice(buf);
            }
        }
        for (p, g) in params.iter_mut().zip(&d) {
            *p -= lr * g;
        }
    }
}

/// Gradient at the SAM ascent point `w + ρ g/‖g‖`, falling back to `g` when
/// `ρ = 0` or the gradient vanishes. Returns `(loss at w, gradient)`.
pub fn sam_gradient<F>(grad_at: F, w: &[f64], rho: f64) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (loss, g) = grad_at(w)?;
    let norm = dot(&g, &g).sqrt();
    if rho == 0.0 || norm == 0.0 {
        return Ok((loss, g));
    }
    let ascent: Vec<f64> = w.iter().zip(&g).map(|(p, gi)| p + rho * gi / norm).collect();
    let (_, g_sam) = grad_at(&ascent)?;
    Ok((loss, g_sam))
}

fn model_grad(model: &MlpModel, inputs: &Matrix, targets: &Targets, kind: LossKind) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = model.loss_and_grad(inputs, targets, kind)?;
    Ok((loss, grads.flatten()))
}

/// One optimizer step on a batch. Returns the batch loss before the step.
pub fn sgd_step(
    model: &mut MlpModel,
    opt: &mut SgdOptimizer,
    inputs: &Matrix,
    targets: &Targets,
    kind: LossKind,
    lr: f64,
) -> Result<f64> {
    let (loss, grad) = model_grad(model, inputs, targets, kind)?;
    let mut params = model.params_flat();
    opt.step(&mut params, &grad, lr);
    model.set_params_flat(&params)?;
    Ok(loss)
}

/// SAM step: the gradient is taken at the global-norm ascent point and
/// applied at the original parameters.
pub fn sam_step(
    model: &mut MlpModel,
    opt: &mut SgdOptimizer,
    inputs: &Matrix,
    targets: &Targets,
    kind: LossKind,
    lr: f64,
    rho: f64,
) -> Result<f64> {
    let mut params = model.params_flat();
    let probe = model.clone();
    let (loss, grad) = sam_gradient(
        |w| {
            let mut m = probe.clone();
            m.set_params_flat(w)?;
            model_grad(&m, inputs, targets, kind)
        },
        &params,
        rho,
    )?;
    opt.step(&mut params, &grad, lr);
    model.set_params_flat(&params)?;
    Ok(loss)
}

/// `x̃ = λ x + (1 − λ) x[perm]`, and the same for the dense targets.
pub fn mixup_batch(inputs: &Matrix, targets: &Matrix, lambda: f64, perm: &[usize]) -> (Matrix, Matrix) {
    let mix = |m: &Matrix| {
        Matrix::from_fn(m.rows(), m.cols(), |i, j| lambda * m.get(i, j) + (1.0 - lambda) * m.get(perm[i], j))
    };
    (mix(inputs), mix(targets))
}

/// Draws `λ ~ Beta(α, α)` and a pairing permutation of `n` rows.
pub fn sample_mixup(rng: &mut ChaCha8Rng, alpha: f64, n: usize) -> Result<(f64, Vec<usize>)> {
    let beta = Beta::new(alpha, alpha).map_err(|e| TrainError::Config(format!("mixup alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok((lambda, perm))
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub v_frob_norm: f64,
    pub lr: f64,
    pub sos_applied: bool,
    pub hessian_trace: Option<f64>,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "epoch,train_loss,train_acc,test_loss,test_acc,v_frob_norm,lr,sos_applied,hessian_trace";

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(format_real).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            format_real(self.train_loss),
            format_real(self.train_acc),
            opt(self.test_loss),
            opt(self.test_acc),
            format_real(self.v_frob_norm),
            format_real(self.lr),
            u8::from(self.sos_applied),
            opt(self.hessian_trace)
        )
    }
}

/// One OS application inside training.
#[derive(Debug, Clone, PartialEq)]
pub struct OsEvent {
    pub epoch: usize,
    /// `loss_before`/`loss_after` hold the full training-set loss.
    pub report: OsReport,
    pub batch_loss_before: f64,
    pub batch_loss_after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub epoch: usize,
    pub trace_estimate: f64,
    pub stderr: f64,
    pub exact_last_layer_trace: f64,
}

/// Observers of a training run. All methods default to doing nothing.
pub trait TrainHooks {
    fn on_os(&mut self, _event: &OsEvent) {}
    fn on_step(&mut self, _epoch: usize, _step: usize, _loss: f64) {}
    fn on_trace(&mut self, _point: &TracePoint) {}
    fn on_epoch_end(&mut self, _row: &MetricsRow, _model: &MlpModel) {}
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub os_events: Vec<OsEvent>,
    pub trace_points: Vec<TracePoint>,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(MetricsRow::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }
}

fn evaluate(model: &MlpModel, data: &Dataset, kind: LossKind) -> Result<(f64, f64)> {
    let logits = model.logits(&data.inputs)?;
    let targets = match kind {
        LossKind::CrossEntropy => data.targets(),
        LossKind::MeanSquaredError => Targets::Dense(data.targets().to_dense(data.class_count)?),
    };
    Ok((loss_from_logits(&logits, &targets, kind)?, accuracy(&logits, &data.labels)))
}

fn batch_targets(data: &Dataset, idx: &[usize], kind: LossKind) -> Result<Targets> {
    let labels = Targets::Labels(idx.iter().map(|&i| data.labels[i]).collect());
    Ok(match kind {
        LossKind::CrossEntropy => labels,
        LossKind::MeanSquaredError => Targets::Dense(labels.to_dense(data.class_count)?),
    })
}

/// Random streams, one per consumer, so enabling one feature does not
/// perturb the draws of another.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_OS: u64 = 2;
const STREAM_MIXUP: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains `model` in place. With SOS enabled, OS runs at the start of each
/// scheduled epoch on a freshly sampled batch, then `⌈n / b₁⌉` SGD steps
/// cover one shuffled pass of the training set.
pub fn train(
    model: &mut MlpModel,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if model.input_dim() != train_set.features() || model.output_dim() != train_set.class_count {
        return Err(TrainError::Config(format!(
            "model {:?} does not fit {} features / {} classes",
            model.dims(),
            train_set.features(),
            train_set.class_count
        )));
    }
    let kind = cfg.loss;
    let all_targets = batch_targets(train_set, &(0..train_set.len()).collect::<Vec<_>>(), kind)?;
    let mut opt = SgdOptimizer::from_config(cfg);
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut os_rng = stream(cfg.seed, STREAM_OS);
    let mut mixup_rng = stream(cfg.seed, STREAM_MIXUP);
    let mut outcome = TrainOutcome::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs);

        let mut sos_applied = false;
        if let Some(sos) = cfg.sos.as_ref().filter(|s| epoch % s.every == 0) {
            let idx = sample_os_batch(&train_set.labels, train_set.class_count, &sos.os, &mut os_rng)?;
            let xb = train_set.inputs.select_rows(&idx);
            let yb = batch_targets(train_set, &idx, kind)?;
            let batch_before = model.loss(&xb, &yb, kind)?;
            let full_before = model.loss(&train_set.inputs, &all_targets, kind)?;
            let mut report = apply_os(model, &xb, &sos.os)?;
            let batch_after = model.loss(&xb, &yb, kind)?;
            report.loss_before = Some(full_before);
            report.loss_after = Some(model.loss(&train_set.inputs, &all_targets, kind)?);
            let delta = (batch_after - batch_before).abs();
            if delta > OS_LOSS_TOLERANCE {
                log::warn!("epoch {epoch}: OS moved the OS-batch loss by {delta:e}");
                if 2 * epoch >= cfg.epochs {
                    return Err(TrainError::LossDrift { epoch, delta });
                }
            }
            let event = OsEvent {
                epoch,
                report,
                batch_loss_before: batch_before,
                batch_loss_after: batch_after,
            };
            hooks.on_os(&event);
            outcome.os_events.push(event);
            sos_applied = true;
        }

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut xb = train_set.inputs.select_rows(idx);
            let mut yb = batch_targets(train_set, idx, kind)?;
            if let Some(alpha) = cfg.mixup_alpha {
                let (lambda, perm) = sample_mixup(&mut mixup_rng, alpha, idx.len())?;
                let dense = yb.to_dense(train_set.class_count)?;
                let (mx, my) = mixup_batch(&xb, &dense, lambda, &perm);
                xb = mx;
                yb = Targets::Dense(my);
            }
            let loss = match cfg.sam_rho {
                Some(rho) => sam_step(model, &mut opt, &xb, &yb, kind, lr, rho)?,
                None => sgd_step(model, &mut opt, &xb, &yb, kind, lr)?,
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            hooks.on_step(epoch, step, loss);
        }

        let (train_loss, train_acc) = evaluate(model, train_set, kind)?;
        if !train_loss.is_finite() || model.params_flat().iter().any(|p| !p.is_finite()) {
            return Err(TrainError::Diverged { epoch, loss: train_loss });
        }
        let test = test_set.map(|t| evaluate(model, t, kind)).transpose()?;

        let mut hessian_trace = None;
        if let Some(h) = cfg.hessian.as_ref().filter(|h| epoch % h.every == 0) {
            let idx: Vec<usize> = (0..h.samples.min(train_set.len())).collect();
            let xs = train_set.inputs.select_rows(&idx);
            let ys = batch_targets(train_set, &idx, kind)?;
            let op = ModelHessian::new(model, &xs, &ys, kind, Scope::AllParameters, DEFAULT_EPS)?;
            let (estimate, stderr) = hutchinson_trace(&op, h.probes, h.seed)?;
            let point = TracePoint {
                epoch,
                trace_estimate: estimate,
                stderr,
                exact_last_layer_trace: exact_last_layer_trace(model, &xs, &ys, kind)?,
            };
            hooks.on_trace(&point);
            outcome.trace_points.push(point);
            hessian_trace = Some(estimate);
        }

        let row = MetricsRow {
            epoch,
            train_loss,
            train_acc,
            test_loss: test.map(|t| t.0),
            test_acc: test.map(|t| t.1),
            v_frob_norm: model.final_weight().frobenius_norm(),
            lr,
            sos_applied,
            hessian_trace,
        };
        log::debug!("epoch {epoch}: loss {train_loss:.6} acc {train_acc:.4}");
        hooks.on_epoch_end(&row, model);
        outcome.rows.push(row);
    }
    Ok(outcome)
}
