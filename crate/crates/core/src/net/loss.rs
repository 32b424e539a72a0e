use serde::{Deserialize, Serialize};

use super::{NetError, Result};
use crate::linalg::Matrix;

/// Training objective applied to the final-layer logits. Both are averaged
/// over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Softmax followed by cross-entropy, `mean_i -Σ_p y_ip log softmax(f_i)_p`.
    CrossEntropy,
    /// `mean_i ‖f_i − y_i‖²`.
    MeanSquaredError,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ce" | "cross-entropy" => Ok(LossKind::CrossEntropy),
            "mse" | "mean-squared-error" => Ok(LossKind::MeanSquaredError),
            other => Err(format!("unknown loss {other:?} (expected ce or mse)")),
        }
    }
}

/// Supervision for a batch: integer class labels or a dense target matrix
/// (one-hot, mixed soft labels, or regression targets).
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Dense(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Dense(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dense `len x classes` view; labels become one-hot rows.
    pub fn to_dense(&self, classes: usize) -> Result<Matrix> {
        match self {
            Targets::Dense(m) => Ok(m.clone()),
            Targets::Labels(labels) => {
                let mut m = Matrix::zeros(labels.len(), classes);
                for (i, &l) in labels.iter().enumerate() {
                    if l >= classes {
                        return Err(NetError::InvalidLabel { index: i, label: l, classes });
                    }
                    m.set(i, l, 1.0);
                }
                Ok(m)
            }
        }
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
            Targets::Dense(m) => Targets::Dense(m.select_rows(indices)),
        }
    }
}

fn validate(logits: &Matrix, targets: &Targets, kind: LossKind) -> Result<()> {
    let (n, k) = logits.shape();
    if targets.len() != n {
        return Err(NetError::InvalidTargets(format!(
            "{} targets for {n} samples",
            targets.len()
        )));
    }
    match (targets, kind) {
        (Targets::Labels(labels), LossKind::CrossEntropy) => {
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
                return Err(NetError::InvalidLabel { index: i, label: l, classes: k });
            }
        }
        (Targets::Labels(_), LossKind::MeanSquaredError) => {
            return Err(NetError::InvalidTargets(
                "mean squared error needs real-valued targets".into(),
            ));
        }
        (Targets::Dense(t), _) => {
            if t.cols() != k {
                return Err(NetError::InvalidTargets(format!(
                    "target width {} does not match {k} outputs",
                    t.cols()
                )));
            }
            if kind == LossKind::CrossEntropy {
                for i in 0..n {
                    let row = t.row(i);
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                        return Err(NetError::InvalidTargets(format!(
                            "cross-entropy target row {i} is not a probability vector"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Batch-mean loss and its gradient with respect to the logits.
pub fn loss_and_logit_grad(logits: &Matrix, targets: &Targets, kind: LossKind) -> Result<(f64, Matrix)> {
    validate(logits, targets, kind)?;
    let (n, k) = logits.shape();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, k);
    match kind {
        LossKind::CrossEntropy => {
            let probs = softmax(logits);
            for i in 0..n {
                let z = logits.row(i);
                let lse = log_sum_exp(z);
                let g = grad.row_mut(i);
                g.copy_from_slice(probs.row(i));
                match targets {
                    Targets::Labels(labels) => {
                        total += lse - z[labels[i]];
                        g[labels[i]] -= 1.0;
                    }
                    Targets::Dense(t) => {
                        for (p, &y) in t.row(i).iter().enumerate() {
                            total += y * (lse - z[p]);
                            g[p] -= y;
                        }
                    }
                }
                for x in g.iter_mut() {
                    *x *= inv_n;
                }
            }
        }
        LossKind::MeanSquaredError => {
            let Targets::Dense(t) = targets else { unreachable!() };
            for i in 0..n {
                let g = grad.row_mut(i);
                for ((gp, &f), &y) in g.iter_mut().zip(logits.row(i)).zip(t.row(i)) {
                    let r = f - y;
                    total += r * r;
                    *gp = 2.0 * r * inv_n;
                }
            }
        }
    }
    grad.check_finite()?;
    Ok((total * inv_n, grad))
}

/// Batch-mean loss for the given logits.
pub fn loss_from_logits(logits: &Matrix, targets: &Targets, kind: LossKind) -> Result<f64> {
    loss_and_logit_grad(logits, targets, kind).map(|(l, _)| l)
}

/// Per-sample diagonal curvature `∂²ℓ_i / ∂f_ip²` of the per-sample loss.
///
/// Cross-entropy gives `σ_p (1 − σ_p)`; squared error gives the constant `2`.
/// The Hessian of the batch-mean loss carries an extra `1/n`, so the
/// squared-error entry of that Hessian is `2/n`.
pub fn loss_second_derivative_diag(logits: &Matrix, targets: &Targets, kind: LossKind) -> Result<Matrix> {
    validate(logits, targets, kind)?;
    Ok(match kind {
        LossKind::CrossEntropy => {
            let mut s = softmax(logits);
            for x in s.as_mut_slice() {
                *x *= 1.0 - *x;
            }
            s
        }
        LossKind::MeanSquaredError => {
            let (n, k) = logits.shape();
            Matrix::from_fn(n, k, |_, _| 2.0)
        }
    })
}

/// Fraction of rows whose arg-max logit matches the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    hits as f64 / labels.len() as f64
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}
