//! Curvature diagnostics: exact last-layer Hessian trace, finite-difference
//! Hessian-vector products, Hutchinson trace estimates, power iteration and
//! the NC1 feature-variability ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Matrix};
use crate::net::{loss_second_derivative_diag, LossKind, MlpModel, NetError, Targets};

#[derive(Debug, thiserror::Error)]
pub enum HessianError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite gradient at step {eps:e}; try a larger epsilon")]
    StepSize { eps: f64 },
    #[error("between-class scatter is zero; NC1 ratio undefined")]
    DegenerateClasses,
}

pub type Result<T> = std::result::Result<T, HessianError>;

pub const DEFAULT_PROBES: usize = 100;
pub const DEFAULT_EPS: f64 = 1e-4;

/// Which parameters the Hessian is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// The final weight `V` only (bias excluded).
    LastLayer,
    /// Everything except `V`.
    Remaining,
    AllParameters,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "last-layer" => Ok(Scope::LastLayer),
            "remaining" => Ok(Scope::Remaining),
            "all-parameters" | "all" => Ok(Scope::AllParameters),
            other => Err(format!("unknown scope {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub exact_last_layer_trace: f64,
    pub hutchinson_trace: f64,
    pub hutchinson_stderr: f64,
    pub probes: usize,
    pub top_eigenvalue: f64,
    pub power_iters: usize,
    pub power_converged: bool,
    pub scope: Scope,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NcReport {
    pub within_class_scatter: f64,
    pub between_class_scatter: f64,
    pub nc1_ratio: f64,
}

/// A symmetric linear map available only through products.
pub trait HessianOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// An explicit symmetric matrix, used for surrogates and oracles.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: Matrix,
}

impl DenseOperator {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(HessianError::InvalidArgument(format!(
                "operator must be square, got {:?}",
                matrix.shape()
            )));
        }
        Ok(Self { matrix })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        Self {
            matrix: Matrix::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 }),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.matrix.rows()).map(|i| self.matrix.get(i, i)).sum()
    }
}

impl HessianOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.rows()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(v, self.dim())?;
        Ok((0..self.dim()).map(|i| dot(self.matrix.row(i), v)).collect())
    }
}

/// Central-difference Hessian-vector product of a gradient map:
/// `(g(w + ε v̂) − g(w − ε v̂)) / (2ε) · ‖v‖` with `v̂ = v / ‖v‖`.
pub fn fd_hvp<G>(grad: G, w: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    check_len(v, w.len())?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(HessianError::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    let norm = dot(v, v).sqrt();
    if !(norm >= f64::MIN_POSITIVE) || !norm.is_finite() {
        return Err(HessianError::InvalidArgument(format!(
            "direction norm {norm:e} is zero, subnormal or non-finite"
        )));
    }
    let shifted = |sign: f64| -> Vec<f64> {
        w.iter().zip(v).map(|(wi, vi)| wi + sign * eps * vi / norm).collect()
    };
    let plus = grad(&shifted(1.0))?;
    let minus = grad(&shifted(-1.0))?;
    let out: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * eps) * norm)
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(HessianError::StepSize { eps });
    }
    Ok(out)
}

/// Hessian of the mean training loss of a model, restricted to a parameter
/// scope, applied by finite differences of the analytic gradient.
pub struct ModelHessian<'a> {
    model: &'a MlpModel,
    inputs: &'a Matrix,
    targets: &'a Targets,
    kind: LossKind,
    indices: Vec<usize>,
    base: Vec<f64>,
    eps: f64,
}

impl<'a> ModelHessian<'a> {
    /// `eps_base` is scaled by `1 + ‖w‖∞` to give the actual step.
    pub fn new(
        model: &'a MlpModel,
        inputs: &'a Matrix,
        targets: &'a Targets,
        kind: LossKind,
        scope: Scope,
        eps_base: f64,
    ) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(HessianError::InvalidArgument("empty dataset".into()));
        }
        let base = model.params_flat();
        let v_range = model.final_weight_range();
        let indices: Vec<usize> = match scope {
            Scope::LastLayer => v_range.collect(),
            Scope::Remaining => (0..base.len()).filter(|i| !v_range.contains(i)).collect(),
            Scope::AllParameters => (0..base.len()).collect(),
        };
        let w_inf = base.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        Ok(Self {
            model,
            inputs,
            targets,
            kind,
            indices,
            base,
            eps: eps_base * (1.0 + w_inf),
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Gradient of the loss restricted to the scope, at scoped parameters `w`.
    pub fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_len(w, self.indices.len())?;
        let mut params = self.base.clone();
        for (&i, &x) in self.indices.iter().zip(w) {
            params[i] = x;
        }
        let mut model = self.model.clone();
        model.set_params_flat(&params)?;
        let (_, grads) = model.loss_and_grad(self.inputs, self.targets, self.kind)?;
        let flat = grads.flatten();
        Ok(self.indices.iter().map(|&i| flat[i]).collect())
    }

    pub fn scoped_params(&self) -> Vec<f64> {
        self.indices.iter().map(|&i| self.base[i]).collect()
    }
}

impl HessianOperator for ModelHessian<'_> {
    fn dim(&self) -> usize {
        self.indices.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        fd_hvp(|w| self.gradient(w), &self.scoped_params(), v, self.eps)
    }
}

/// Trace of the mean-loss Hessian with respect to `V`:
/// `(1/n) Σᵢ Σ_p (∂²ℓ/∂f_p²)ᵢ ‖xᵢ‖²` with `xᵢ` the penultimate features.
pub fn exact_last_layer_trace(
    model: &MlpModel,
    inputs: &Matrix,
    targets: &Targets,
    kind: LossKind,
) -> Result<f64> {
    let n = inputs.rows();
    if n == 0 {
        return Err(HessianError::InvalidArgument("empty dataset".into()));
    }
    let features = model.features(inputs)?;
    let logits = model.logits(inputs)?;
    let curvature = loss_second_derivative_diag(&logits, targets, kind)?;
    let mut total = 0.0;
    for i in 0..n {
        let sq = dot(features.row(i), features.row(i));
        total += curvature.row(i).iter().sum::<f64>() * sq;
    }
    Ok(total / n as f64)
}

/// Hutchinson estimate `mean zᵀHz` over Rademacher probes.
///
/// Probe `p` draws from ChaCha8 seeded with `seed` on stream `p`, so each
/// probe is reproducible on its own and the result does not depend on
/// evaluation order. Returns the estimate and `sample std / √probes`.
pub fn hutchinson_trace(op: &dyn HessianOperator, probes: usize, seed: u64) -> Result<(f64, f64)> {
    if probes < 2 {
        return Err(HessianError::InvalidArgument(format!("need at least 2 probes, got {probes}")));
    }
    let samples = (0..probes)
        .map(|p| {
            let z = rademacher(op.dim(), seed, p as u64);
            Ok(dot(&z, &op.apply(&z)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = samples.iter().sum::<f64>() / probes as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (probes - 1) as f64;
    Ok((mean, (var / probes as f64).sqrt()))
}

pub fn rademacher(dim: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..dim)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration for the eigenvalue of largest magnitude.
///
/// Stops when the Rayleigh quotient moves by at most `tol` relative, or the
/// eigen-residual `‖Hv − λv‖` falls to `tol·|λ|`. Past `iters` the last
/// quotient is returned with `converged = false`.
pub fn top_eigenvalue(op: &dyn HessianOperator, iters: usize, tol: f64, seed: u64) -> Result<EigenEstimate> {
    if iters == 0 {
        return Err(HessianError::InvalidArgument("iters must be at least 1".into()));
    }
    let dim = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut prev: Option<f64> = None;
    let mut value = 0.0;
    for it in 1..=iters {
        let hv = op.apply(&v)?;
        value = dot(&v, &hv);
        let residual = hv
            .iter()
            .zip(&v)
            .map(|(h, x)| (h - value * x).powi(2))
            .sum::<f64>()
            .sqrt();
        let settled = prev.is_some_and(|p| (value - p).abs() <= tol * value.abs());
        if residual <= tol * value.abs() || settled {
            return Ok(EigenEstimate { value, iterations: it, converged: true });
        }
        let norm = dot(&hv, &hv).sqrt();
        if norm == 0.0 {
            return Ok(EigenEstimate { value: 0.0, iterations: it, converged: true });
        }
        v = hv.iter().map(|x| x / norm).collect();
        prev = Some(value);
    }
    Ok(EigenEstimate { value, iterations: iters, converged: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianConfig {
    pub probes: usize,
    pub seed: u64,
    pub eps: f64,
    pub power_iters: usize,
    pub power_tol: f64,
    pub scope: Scope,
}

impl Default for HessianConfig {
    fn default() -> Self {
        Self {
            probes: DEFAULT_PROBES,
            seed: 0,
            eps: DEFAULT_EPS,
            power_iters: 100,
            power_tol: 1e-4,
            scope: Scope::AllParameters,
        }
    }
}

pub fn hessian_report(
    model: &MlpModel,
    inputs: &Matrix,
    targets: &Targets,
    kind: LossKind,
    cfg: &HessianConfig,
) -> Result<HessianReport> {
    let op = ModelHessian::new(model, inputs, targets, kind, cfg.scope, cfg.eps)?;
    let (hutchinson_trace, hutchinson_stderr) = hutchinson_trace(&op, cfg.probes, cfg.seed)?;
    let eig = top_eigenvalue(&op, cfg.power_iters, cfg.power_tol, cfg.seed)?;
    let report = HessianReport {
        exact_last_layer_trace: exact_last_layer_trace(model, inputs, targets, kind)?,
        hutchinson_trace,
        hutchinson_stderr,
        probes: cfg.probes,
        top_eigenvalue: eig.value,
        power_iters: eig.iterations,
        power_converged: eig.converged,
        scope: cfg.scope,
    };
    let values = [
        report.exact_last_layer_trace,
        report.hutchinson_trace,
        report.hutchinson_stderr,
        report.top_eigenvalue,
    ];
    if values.iter().any(|x| !x.is_finite()) {
        return Err(HessianError::StepSize { eps: op.eps() });
    }
    Ok(report)
}

/// Within-class and between-class feature scatter.
///
/// `within` is the mean over samples of `‖x − μ_c‖²`; `between` the mean
/// over present classes of `‖μ_c − μ̄‖²` with `μ̄` the global mean.
pub fn nc1_metric(features: &Matrix, labels: &[usize]) -> Result<NcReport> {
    if features.rows() != labels.len() {
        return Err(HessianError::InvalidArgument(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let d = features.cols();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    let mut global = vec![0.0; d];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (j, x) in features.row(i).iter().enumerate() {
            sums[l][j] += x;
            global[j] += x;
        }
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(HessianError::InvalidArgument(format!(
            "need at least 2 classes, found {}",
            present.len()
        )));
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|x| x / c.max(1) as f64).collect())
        .collect();
    global.iter_mut().for_each(|x| *x /= labels.len() as f64);

    let sq_dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let within = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(features.row(i), &means[l]))
        .sum::<f64>()
        / labels.len() as f64;
    let between =
        present.iter().map(|&c| sq_dist(&means[c], &global)).sum::<f64>() / present.len() as f64;
    if between == 0.0 {
        return Err(HessianError::DegenerateClasses);
    }
    Ok(NcReport {
        within_class_scatter: within,
        between_class_scatter: between,
        nc1_ratio: within / between,
    })
}

fn check_len(v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(HessianError::InvalidArgument(format!(
            "vector of length {} for operator of dimension {dim}",
            v.len()
        )));
    }
    Ok(())
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
