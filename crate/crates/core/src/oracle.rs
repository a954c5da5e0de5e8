//! Statistical checks shared by the verify_* suites: martingale tests,
//! cross-path regression, convergence slopes and an independent summation
//! oracle for aggregates.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::series::PathSeries;
use crate::{Error, Result};

/// Minimum number of unflagged paths for any cross-path statistic.
pub const MIN_PATHS: usize = 100;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Confidence {
    /// Width of the band in standard errors.
    pub z: f64,
    /// Share of steps that must pass.
    pub required_fraction: f64,
    /// Absolute allowance for rounding, added to the band.
    pub floor: f64,
}

impl Default for Confidence {
    fn default() -> Self {
        Self {
            z: 3.0,
            required_fraction: 0.95,
            floor: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StatTestReport {
    pub name: String,
    pub confidence: Confidence,
    pub statistic: Vec<f64>,
    pub std_error: Vec<f64>,
    pub pass: Vec<bool>,
    pub pass_fraction: f64,
    pub verdict: bool,
}

impl StatTestReport {
    /// Judge per-step statistics against their standard errors.
    pub fn from_steps(name: &str, statistic: Vec<f64>, std_error: Vec<f64>, confidence: Confidence) -> Self {
        let pass: Vec<bool> = statistic
            .iter()
            .zip(&std_error)
            .map(|(s, e)| s.abs() <= confidence.z * e + confidence.floor)
            .collect();
        let pass_fraction = if pass.is_empty() {
            0.0
        } else {
            pass.iter().filter(|p| **p).count() as f64 / pass.len() as f64
        };
        Self {
            name: name.to_string(),
            confidence,
            statistic,
            std_error,
            pass,
            pass_fraction,
            verdict: pass_fraction >= confidence.required_fraction,
        }
    }
}

/// Per-step cross-path mean of `increments` (len N per path) tested against 0.
pub fn martingale_test(name: &str, increments: &PathSeries, confidence: Confidence) -> Result<StatTestReport> {
    let m = increments.active_count();
    if m < MIN_PATHS {
        return Err(Error::Estimation(format!("martingale test needs {MIN_PATHS} paths, got {m}")));
    }
    let mut stat = Vec::with_capacity(increments.len());
    let mut se = Vec::with_capacity(increments.len());
    for j in 0..increments.len() {
        let vals: Vec<f64> = increments.active_paths().map(|p| increments.get(p, j)).collect();
        let (mean, var) = mean_var(&vals);
        stat.push(mean);
        se.push((var / m as f64).sqrt());
    }
    Ok(StatTestReport::from_steps(name, stat, se, confidence))
}

/// Sample mean and unbiased variance.
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

#[derive(Clone, Debug)]
pub struct Regression {
    /// Intercept followed by one slope per regressor.
    pub coef: Vec<f64>,
    /// Heteroskedasticity-robust standard errors.
    pub se: Vec<f64>,
}

/// OLS of `y` on [1, x₁, …, x_n] with HC1 sandwich standard errors.
/// `x` is row-major, one row of n regressors per observation.
pub fn regress(y: &[f64], x: &[f64], n: usize) -> Result<Regression> {
    let m = y.len();
    let p = n + 1;
    if x.len() != m * n {
        return Err(Error::Estimation("regressor matrix size mismatch".into()));
    }
    if m <= p {
        return Err(Error::Estimation(format!("{m} observations for {p} coefficients")));
    }
    let design = DMatrix::from_fn(m, p, |i, c| if c == 0 { 1.0 } else { x[i * n + c - 1] });
    let xtx = design.tr_mul(&design);
    let inv = xtx
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Estimation("singular design matrix".into()))?;
    let yv = DVector::from_column_slice(y);
    let beta = &inv * design.tr_mul(&yv);
    let resid = &yv - &design * &beta;
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in 0..m {
        let e2 = resid[i] * resid[i];
        for a in 0..p {
            let xa = design[(i, a)];
            for b in 0..p {
                meat[(a, b)] += e2 * xa * design[(i, b)];
            }
        }
    }
    let cov = &inv * meat * &inv * (m as f64 / (m - p) as f64);
    Ok(Regression {
        coef: beta.iter().copied().collect(),
        se: (0..p).map(|a| cov[(a, a)].max(0.0).sqrt()).collect(),
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SlopeEstimate {
    pub slope: f64,
    pub intercept: f64,
    pub std_error: f64,
}

/// Least-squares slope of log(error) against log(mesh).
pub fn convergence_order(points: &[(f64, f64)]) -> Result<SlopeEstimate> {
    if points.len() < 3 {
        return Err(Error::Estimation("convergence order needs at least 3 meshes".into()));
    }
    if points.iter().any(|(h, e)| !(*h > 0.0 && *e > 0.0)) {
        return Err(Error::Estimation("meshes and errors must be positive".into()));
    }
    let xs: Vec<f64> = points.iter().map(|(h, _)| h.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e)| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let std_error = if points.len() > 2 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(SlopeEstimate {
        slope,
        intercept,
        std_error,
    })
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Σ wᵢ e^{gᵢ} fᵢ with compensated summation; `growth_integrals` are the
/// log-weights ∫h along each atom's path.
pub fn brute_force_aggregate(weights: &[f64], field_values: &[f64], growth_integrals: &[f64]) -> Result<f64> {
    if weights.len() != field_values.len() || weights.len() != growth_integrals.len() {
        return Err(Error::Measure("atom arrays have different lengths".into()));
    }
    Ok(compensated_sum(
        weights
            .iter()
            .zip(field_values)
            .zip(growth_integrals)
            .map(|((w, f), g)| w * g.exp() * f),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::path_increments;

    fn series(rows: Vec<Vec<f64>>) -> PathSeries {
        let n = rows.len();
        PathSeries::from_rows(rows, vec![true; n])
    }

    #[test]
    fn brownian_increments_are_a_martingale() {
        let rows: Vec<Vec<f64>> = (0..2000).map(|p| path_increments(5, p, 100, 1, 0.01)).collect();
        let r = martingale_test("dw", &series(rows), Confidence::default()).unwrap();
        assert!(r.verdict, "{}", r.pass_fraction);
    }

    #[test]
    fn zero_increments_pass_with_zero_band() {
        let r = martingale_test("zero", &series(vec![vec![0.0; 10]; 200]), Confidence::default()).unwrap();
        assert!(r.verdict);
        assert!(r.std_error.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn known_drift_is_detected() {
        let dt = 0.01;
        let rows: Vec<Vec<f64>> = (0..50_000)
            .map(|p| {
                path_increments(8, p, 20, 1, dt)
                    .into_iter()
                    .map(|w| 0.01 * dt + 0.001 * w)
                    .collect()
            })
            .collect();
        let r = martingale_test("drift", &series(rows), Confidence::default()).unwrap();
        assert!(r.pass_fraction < 0.1);
        assert!(!r.verdict);
    }

    #[test]
    fn too_few_paths() {
        assert!(martingale_test("x", &series(vec![vec![0.0]; 10]), Confidence::default()).is_err());
    }

    #[test]
    fn slopes() {
        let lin = convergence_order(&[(0.1, 0.3), (0.05, 0.15), (0.025, 0.075)]).unwrap();
        assert!((lin.slope - 1.0).abs() < 1e-12);
        let quad = convergence_order(&[(0.1, 0.01), (0.05, 0.0025), (0.025, 0.000625)]).unwrap();
        assert!((quad.slope - 2.0).abs() < 1e-12);
        assert!(convergence_order(&[(0.1, 1.0), (0.05, 0.5)]).is_err());
    }

    #[test]
    fn brute_force_hand_values() {
        let v = brute_force_aggregate(&[0.2, 0.3, 0.5], &[1.0, 2.0, 4.0], &[0.0, 0.0, 2f64.ln()]).unwrap();
        assert!((v - (0.2 + 0.6 + 4.0)).abs() < 1e-15);
        let single = brute_force_aggregate(&[0.7], &[3.0], &[0.1]).unwrap();
        assert!((single - 0.7 * 3.0 * 0.1f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn regression_recovers_coefficients() {
        let m = 5000;
        let xs = path_increments(3, 0, m, 2, 1.0);
        let noise = path_increments(4, 0, m, 1, 1.0);
        let y: Vec<f64> = (0..m).map(|i| 0.5 + 2.0 * xs[2 * i] - 1.0 * xs[2 * i + 1] + 0.1 * noise[i]).collect();
        let r = regress(&y, &xs, 2).unwrap();
        for (got, want) in r.coef.iter().zip([0.5, 2.0, -1.0]) {
            assert!((got - want).abs() < 0.01);
        }
        assert!(r.se.iter().all(|s| *s > 0.0 && *s < 0.01));
    }
}
