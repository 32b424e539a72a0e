//! Wall-time scaling of the OS solve in the batch size `b`.
//!
//! The operation count is dominated by elimination and the Gram product,
//! `O(b²(m + n))`, plus the `O(b³)` Cholesky factorization, so at fixed `m`
//! and `n` the timings are fitted to `t = c₁b² + c₂b³`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use optshift_core::linalg::{matmul, Matrix, DEFAULT_PIVOT_TOL};
use optshift_core::shift::solve_min_norm;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    pub batch: usize,
    /// Median over repeats.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub features: usize,
    pub outputs: usize,
    pub points: Vec<TimingPoint>,
    pub c1: f64,
    pub c2: f64,
    pub r_squared: f64,
    pub note: String,
}

/// Least-squares `t ≈ c₁b² + c₂b³` without intercept; returns
/// `(c₁, c₂, R²)` with `R² = 1 − SS_res / SS_tot` about the mean.
pub fn fit_quadratic_cubic(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let (mut s22, mut s23, mut s33, mut s2t, mut s3t) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(b, t) in points {
        let (x2, x3) = (b * b, b * b * b);
        s22 += x2 * x2;
        s23 += x2 * x3;
        s33 += x3 * x3;
        s2t += x2 * t;
        s3t += x3 * t;
    }
    let det = s22 * s33 - s23 * s23;
    if det.abs() <= f64::EPSILON * s22 * s33 {
        return None;
    }
    let c1 = (s2t * s33 - s3t * s23) / det;
    let c2 = (s22 * s3t - s23 * s2t) / det;
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|&(b, t)| (t - c1 * b * b - c2 * b * b * b).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Some((c1, c2, r2))
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Times `solve_min_norm` on random full-rank `b x m` systems with `n`
/// right-hand sides.
pub fn measure(sizes: &[usize], features: usize, outputs: usize, repeats: usize, seed: u64) -> Result<ScalingReport, CliError> {
    if sizes.len() < 2 || repeats == 0 || outputs == 0 {
        return Err(CliError::Config("need at least two sizes, one repeat and one output".into()));
    }
    if let Some(&b) = sizes.iter().find(|&&b| b == 0 || b >= features) {
        return Err(CliError::Config(format!(
            "batch {b} must be in 1..{features} so the system stays under-determined"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(sizes.len());
    for &b in sizes {
        let a = random_matrix(b, features, &mut rng);
        let z = matmul(&a, &random_matrix(features, outputs, &mut rng)).expect("shapes agree");
        // One untimed warm-up.
        solve_min_norm(&a, &z, DEFAULT_PIVOT_TOL).map_err(|e| CliError::Numeric(e.to_string()))?;
        let mut times: Vec<f64> = (0..repeats)
            .map(|_| {
                let start = Instant::now();
                let v = solve_min_norm(&a, &z, DEFAULT_PIVOT_TOL);
                let t = start.elapsed().as_secs_f64();
                v.map(|_| t).map_err(|e| CliError::Numeric(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        times.sort_by(f64::total_cmp);
        points.push(TimingPoint {
            batch: b,
            seconds: times[times.len() / 2],
        });
    }
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.batch as f64, p.seconds)).collect();
    let (c1, c2, r_squared) =
        fit_quadratic_cubic(&xy).ok_or_else(|| CliError::Numeric("degenerate timing fit".into()))?;
    let note = format!(
        "Stated cost O(b²(m+n) + n³). Measured at m = {features}, n = {outputs}: \
         the b² term carries the elimination and Gram work, the b³ term the Cholesky \
         factorization of the b x b Gram matrix, which the stated cost omits."
    );
    Ok(ScalingReport {
        features,
        outputs,
        points,
        c1,
        c2,
        r_squared,
        note,
    })
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("batch,seconds,fitted\n");
        for p in &self.points {
            let b = p.batch as f64;
            s.push_str(&format!("{},{:e},{:e}\n", p.batch, p.seconds, self.c1 * b * b + self.c2 * b * b * b));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_model_is_recovered() {
        let pts: Vec<(f64, f64)> = [32.0, 64.0, 128.0, 256.0]
            .iter()
            .map(|&b: &f64| (b, 3e-9 * b * b + 2e-11 * b * b * b))
            .collect();
        let (c1, c2, r2) = fit_quadratic_cubic(&pts).unwrap();
        assert!((c1 - 3e-9).abs() <= 1e-18);
        assert!((c2 - 2e-11).abs() <= 1e-20);
        assert!((r2 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn flat_data_fits_poorly() {
        let pts = [(32.0, 1.0), (64.0, 1.0), (128.0, 1.0), (256.0, 1.1)];
        let (_, _, r2) = fit_quadratic_cubic(&pts).unwrap();
        assert!(r2 < 0.95);
        assert!(fit_quadratic_cubic(&pts[..1]).is_none());
    }

    #[test]
    fn measurement_smoke() {
        let r = measure(&[4, 8], 16, 2, 1, 0).unwrap();
        assert_eq!(r.points.len(), 2);
        assert!(r.points.iter().all(|p| p.seconds >= 0.0));
        assert!(measure(&[4, 16], 16, 2, 1, 0).is_err());
    }
}
