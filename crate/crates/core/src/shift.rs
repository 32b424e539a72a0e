//! Optimum shifting of the final linear layer.
//!
//! For a reference batch with penultimate activations `A` (`b x m`) and
//! final-layer weight `V` (`m x n`), the products `Z = A V` are held fixed and
//! `V` is replaced by the minimum-Frobenius-norm solution of `A V = Z`:
//!
//! ```text
//! [A*, Z*] = eliminate([A, Z])          (drop dependent rows)
//! V*       = A*ᵀ (A* A*ᵀ)⁻¹ Z*
//! ```
//!
//! The bias is not part of the system and stays frozen, so the batch logits
//! `A V + c` are preserved and any loss computed from them is unchanged.
//! Hidden layers are never touched.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{
    cholesky, gaussian_eliminate, matmul, matmul_nt, matmul_tn, Cholesky, LinalgError, Matrix,
    DEFAULT_PIVOT_TOL,
};
use crate::net::{MlpModel, NetError};

#[derive(Debug, thiserror::Error)]
pub enum OsError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("Gram matrix of the reduced system is not positive definite ({0}); increase pivot_tol")]
    Solver(LinalgError),
    #[error("optimum-shift contract violated: {0}")]
    Contract(String),
    #[error("invalid OS configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, OsError>;

/// How the OS batch is drawn from the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Uniform without replacement.
    Uniform,
    /// Round-robin over classes, uniform within each class.
    ClassStratified,
}

impl std::str::FromStr for Sampling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Sampling::Uniform),
            "stratified" | "class-stratified" => Ok(Sampling::ClassStratified),
            other => Err(format!("unknown sampling {other:?} (expected uniform or stratified)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsConfig {
    /// Rows `b₂` in the OS batch.
    pub batch_size: usize,
    pub pivot_tol: f64,
    pub sampling: Sampling,
    pub seed: u64,
    /// Largest tolerated change of any batch logit.
    pub max_logit_drift: f64,
}

impl Default for OsConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            pivot_tol: DEFAULT_PIVOT_TOL,
            sampling: Sampling::Uniform,
            seed: 0,
            max_logit_drift: 1e-6,
        }
    }
}

impl OsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(OsError::Config("batch_size must be at least 1".into()));
        }
        if !(self.pivot_tol > 0.0) {
            return Err(OsError::Config(format!("pivot_tol must be positive, got {}", self.pivot_tol)));
        }
        if !(self.max_logit_drift > 0.0) {
            return Err(OsError::Config(format!(
                "max_logit_drift must be positive, got {}",
                self.max_logit_drift
            )));
        }
        Ok(())
    }

    /// True when `b₂ ≥ m`: the system is square or over-determined and a
    /// consistent full-column-rank system leaves `V` where it is.
    pub fn identity_regime(&self, feature_dim: usize) -> bool {
        self.batch_size >= feature_dim
    }
}

/// Before/after record of one OS application.
#[derive(Debug, Clone, PartialEq)]
pub struct OsReport {
    pub norm_before: f64,
    pub norm_after: f64,
    pub rank: usize,
    pub batch_rows: usize,
    /// `max |A V* − A V|` over the OS batch.
    pub logit_drift: f64,
    /// Loss before/after, filled in by callers that evaluate it (full
    /// training set when available).
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub elapsed: Duration,
}

#[derive(Serialize, Deserialize)]
struct OsReportRecord {
    norm_before: f64,
    norm_after: f64,
    rank: usize,
    batch_rows: usize,
    logit_drift: f64,
    loss_before: Option<f64>,
    loss_after: Option<f64>,
    elapsed_ms: f64,
}

impl OsReport {
    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> String {
        let record = OsReportRecord {
            norm_before: self.norm_before,
            norm_after: self.norm_after,
            rank: self.rank,
            batch_rows: self.batch_rows,
            logit_drift: self.logit_drift,
            loss_before: self.loss_before,
            loss_after: self.loss_after,
            elapsed_ms: self.elapsed.as_secs_f64() * 1e3,
        };
        serde_json::to_string(&record).expect("report fields serialize")
    }

    pub fn from_json_line(line: &str) -> serde_json::Result<Self> {
        let r: OsReportRecord = serde_json::from_str(line)?;
        Ok(Self {
            norm_before: r.norm_before,
            norm_after: r.norm_after,
            rank: r.rank,
            batch_rows: r.batch_rows,
            logit_drift: r.logit_drift,
            loss_before: r.loss_before,
            loss_after: r.loss_after,
            elapsed: Duration::from_secs_f64(r.elapsed_ms.max(0.0) / 1e3),
        })
    }
}

/// Penultimate activations `A` for the batch and `Z = A V` (pre-bias).
pub fn extract_system(model: &MlpModel, batch_inputs: &Matrix) -> Result<(Matrix, Matrix)> {
    let a = model.features(batch_inputs)?;
    let z = matmul(&a, model.final_weight())?;
    Ok((a, z))
}

/// Minimum-Frobenius-norm `V` with `a V = z`.
///
/// Dependent rows are removed by [`gaussian_eliminate`] first, so `a` need not
/// have independent rows. The closed form is followed by up to three rounds
/// of iterative refinement on the reduced system.
pub fn solve_min_norm(a: &Matrix, z: &Matrix, pivot_tol: f64) -> Result<Matrix> {
    Ok(solve_min_norm_with_rank(a, z, pivot_tol)?.0)
}

/// Column-by-column variant: every column `z_i` is eliminated and solved on
/// its own. Produces the same `V` as [`solve_min_norm`].
pub fn solve_min_norm_per_column(a: &Matrix, z: &Matrix, pivot_tol: f64) -> Result<Matrix> {
    let mut v = Matrix::zeros(a.cols(), z.cols());
    for c in 0..z.cols() {
        let zc = z.select_cols(&[c]);
        let (vc, _) = solve_min_norm_with_rank(a, &zc, pivot_tol)?;
        for r in 0..a.cols() {
            v.set(r, c, vc.get(r, 0));
        }
    }
    Ok(v)
}

fn solve_min_norm_with_rank(a: &Matrix, z: &Matrix, pivot_tol: f64) -> Result<(Matrix, usize)> {
    let reduced = gaussian_eliminate(a, z, pivot_tol)?;
    let (lhs, rhs) = (&reduced.reduced_lhs, &reduced.reduced_rhs);
    if reduced.rank == 0 {
        return Ok((Matrix::zeros(a.cols(), z.cols()), 0));
    }

    let gram = matmul_nt(lhs, lhs)?;
    let chol = factor_gram(&gram)?;
    let mut v = matmul_tn(lhs, &chol.solve(rhs)?)?;

    let mut residual = rhs.sub(&matmul(lhs, &v)?)?;
    let floor = 1e-15 * (1.0 + rhs.max_abs());
    for _ in 0..3 {
        let size = residual.max_abs();
        if size <= floor {
            break;
        }
        let candidate = v.add(&matmul_tn(lhs, &chol.solve(&residual)?)?)?;
        let next = rhs.sub(&matmul(lhs, &candidate)?)?;
        if next.max_abs() >= size {
            break;
        }
        v = candidate;
        residual = next;
    }
    Ok((v, reduced.rank))
}

/// Cholesky of the Gram matrix, retrying once with a tiny diagonal jitter.
/// Refinement against the unjittered system absorbs the perturbation.
fn factor_gram(gram: &Matrix) -> Result<Cholesky> {
    match cholesky(gram) {
        Ok(c) => Ok(c),
        Err(first @ LinalgError::NotPositiveDefinite { .. }) => {
            let max_diag = (0..gram.rows()).map(|i| gram.get(i, i)).fold(0.0, f64::max);
            let mut jittered = gram.clone();
            for i in 0..gram.rows() {
                jittered.set(i, i, gram.get(i, i) + 1e-12 * max_diag);
            }
            cholesky(&jittered).map_err(|_| OsError::Solver(first))
        }
        Err(e) => Err(e.into()),
    }
}

/// Replaces the final-layer weight of `model` by the minimum-norm solution
/// that preserves the batch products `A V`.
///
/// The model is only modified if the result satisfies both report
/// invariants (logit drift within `cfg.max_logit_drift`, norm not
/// increased); otherwise [`OsError::Contract`] is returned and the model is
/// left as it was.
pub fn apply_os(model: &mut MlpModel, batch_inputs: &Matrix, cfg: &OsConfig) -> Result<OsReport> {
    cfg.validate()?;
    let start = Instant::now();
    let m = model.feature_dim();
    let rows = batch_inputs.rows();
    if rows >= m {
        log::warn!("OS batch of {rows} rows is not smaller than feature width {m}; V is expected to stay put");
    }
    if rows < model.output_dim() {
        log::warn!(
            "OS batch of {rows} rows is smaller than the {} classes",
            model.output_dim()
        );
    }

    let (a, z) = extract_system(model, batch_inputs)?;
    let (v_star, rank) = solve_min_norm_with_rank(&a, &z, cfg.pivot_tol)?;
    let logit_drift = matmul(&a, &v_star)?.max_abs_diff(&z)?;
    let norm_before = model.final_weight().frobenius_norm();
    let norm_after = v_star.frobenius_norm();

    if logit_drift > cfg.max_logit_drift {
        return Err(OsError::Contract(format!(
            "logit drift {logit_drift:e} exceeds {:e} (rank {rank} of {rows} rows)",
            cfg.max_logit_drift
        )));
    }
    if norm_after > norm_before + 1e-9 * (1.0 + norm_before) {
        return Err(OsError::Contract(format!(
            "norm increased from {norm_before} to {norm_after}"
        )));
    }
    model.set_final_weight(v_star)?;

    Ok(OsReport {
        norm_before,
        norm_after,
        rank,
        batch_rows: rows,
        logit_drift,
        loss_before: None,
        loss_after: None,
        elapsed: start.elapsed(),
    })
}

/// Draws OS batch indices from a labelled set.
pub fn sample_os_batch<R: Rng + ?Sized>(
    labels: &[usize],
    classes: usize,
    cfg: &OsConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = labels.len();
    let b = cfg.batch_size;
    if b > n {
        return Err(OsError::Config(format!("OS batch of {b} exceeds the {n} available samples")));
    }
    let mut picked = match cfg.sampling {
        Sampling::Uniform => rand::seq::index::sample(rng, n, b).into_vec(),
        Sampling::ClassStratified => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for (i, &l) in labels.iter().enumerate() {
                if l >= classes {
                    return Err(OsError::Config(format!("label {l} at {i} is outside 0..{classes}")));
                }
                by_class[l].push(i);
            }
            for members in &mut by_class {
                members.shuffle(rng);
            }
            let mut out = Vec::with_capacity(b);
            let mut depth = 0;
            while out.len() < b {
                for members in &by_class {
                    if out.len() == b {
                        break;
                    }
                    if let Some(&i) = members.get(depth) {
                        out.push(i);
                    }
                }
                depth += 1;
            }
            out
        }
    };
    picked.sort_unstable();
    Ok(picked)
}
