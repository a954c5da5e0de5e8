//! Per-step Itô coefficients of positive path ensembles, estimated by
//! cross-path regression of log increments on the Brownian increments.

use rayon::prelude::*;
use serde::Serialize;

use crate::flow::Ensemble;
use crate::oracle::{regress, MIN_PATHS};
use crate::series::PathSeries;
use crate::{Error, Result};

/// dX/X = drift dt + diffusionᵀ dW, one entry per step j → j+1.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogCoefficients {
    pub drift: Vec<f64>,
    pub drift_se: Vec<f64>,
    /// n components per step.
    pub diffusion: Vec<Vec<f64>>,
    pub diffusion_se: Vec<Vec<f64>>,
}

impl LogCoefficients {
    pub fn steps(&self) -> usize {
        self.drift.len()
    }
}

/// Regress Δlog X on [1, ΔW] across unflagged paths at every step; the
/// relative drift is intercept/Δt + ½|diffusion|².
pub fn estimate_coefficients(series: &PathSeries, ensemble: &Ensemble) -> Result<LogCoefficients> {
    let steps = ensemble.grid().steps();
    if series.paths() != ensemble.paths() || series.len() != steps + 1 {
        return Err(Error::Estimation("series does not match the ensemble".into()));
    }
    let active: Vec<usize> = series
        .active_paths()
        .filter(|&p| !ensemble.is_flagged(p))
        .collect();
    if active.len() < MIN_PATHS {
        return Err(Error::Estimation(format!(
            "coefficient estimation needs {MIN_PATHS} unflagged paths, got {}",
            active.len()
        )));
    }
    for &p in &active {
        if series.row(p).iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Estimation(format!("series is not strictly positive on path {p}")));
        }
    }
    let n = ensemble.noise_dim();
    let dt = ensemble.grid().dt();
    let per_step: Vec<(f64, f64, Vec<f64>, Vec<f64>)> = (0..steps)
        .into_par_iter()
        .map(|j| {
            let y: Vec<f64> = active
                .iter()
                .map(|&p| series.get(p, j + 1).ln() - series.get(p, j).ln())
                .collect();
            let x: Vec<f64> = active
                .iter()
                .flat_map(|&p| ensemble.increment(p, j).iter().copied())
                .collect();
            regress(&y, &x, n).map(|r| {
                let beta = r.coef[1..].to_vec();
                let half_sq = 0.5 * beta.iter().map(|b| b * b).sum::<f64>();
                (r.coef[0] / dt + half_sq, r.se[0] / dt, beta, r.se[1..].to_vec())
            })
        })
        .collect::<Result<_>>()?;
    let mut out = LogCoefficients {
        drift: Vec::with_capacity(steps),
        drift_se: Vec::with_capacity(steps),
        diffusion: Vec::with_capacity(steps),
        diffusion_se: Vec::with_capacity(steps),
    };
    for (d, dse, s, sse) in per_step {
        out.drift.push(d);
        out.drift_se.push(dse);
        out.diffusion.push(s);
        out.diffusion_se.push(sse);
    }
    Ok(out)
}

/// Coefficients of the market's positive series.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarketCoefficients {
    pub state_price: LogCoefficients,
    pub price: LogCoefficients,
    pub total_wealth: LogCoefficients,
    pub consumption: LogCoefficients,
    pub loading: LogCoefficients,
    /// Short rate r = −drift of H; kept separately so faults can shift it.
    pub rate: Vec<f64>,
}

impl MarketCoefficients {
    pub fn estimate(
        ensemble: &Ensemble,
        state_price: &PathSeries,
        price: &PathSeries,
        total_wealth: &PathSeries,
        consumption: &PathSeries,
        loading: &PathSeries,
    ) -> Result<Self> {
        let h = estimate_coefficients(state_price, ensemble)?;
        let rate = h.drift.iter().map(|d| -d).collect();
        Ok(Self {
            state_price: h,
            price: estimate_coefficients(price, ensemble)?,
            total_wealth: estimate_coefficients(total_wealth, ensemble)?,
            consumption: estimate_coefficients(consumption, ensemble)?,
            loading: estimate_coefficients(loading, ensemble)?,
            rate,
        })
    }

    /// Market price of risk ϑ = −diffusion of H.
    pub fn theta(&self, j: usize) -> Vec<f64> {
        self.state_price.diffusion[j].iter().map(|v| -v).collect()
    }

    pub fn sigma(&self, j: usize) -> &[f64] {
        &self.price.diffusion[j]
    }

    pub fn sigma_w(&self, j: usize) -> &[f64] {
        &self.total_wealth.diffusion[j]
    }

    /// Price drift b.
    pub fn b(&self, j: usize) -> f64 {
        self.price.drift[j]
    }

    pub fn steps(&self) -> usize {
        self.rate.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{simulate_flow, FlowModel, TimeGrid};

    fn bm(paths: usize, n: usize) -> Ensemble {
        let m = FlowModel::new(1, n).unwrap();
        simulate_flow(&m, TimeGrid::new(0.0, 1.0, 20).unwrap(), &[vec![0.0]], paths, 17).unwrap()
    }

    #[test]
    fn geometric_series_recovered() {
        let e = bm(20_000, 2);
        let dt = e.grid().dt();
        let rows: Vec<Vec<f64>> = (0..e.paths())
            .map(|p| {
                let mut v = vec![1.0];
                let mut l = 0.0;
                for j in 0..20 {
                    let dw = e.increment(p, j);
                    l += (0.05 - 0.5 * 0.04) * dt + 0.2 * dw[0];
                    v.push(f64::exp(l));
                }
                v
            })
            .collect();
        let s = PathSeries::from_rows(rows, vec![true; e.paths()]);
        let c = estimate_coefficients(&s, &e).unwrap();
        for j in 0..20 {
            assert!((c.drift[j] - 0.05).abs() <= 3.0 * c.drift_se[j] + 1e-12, "{j}");
            assert!((c.diffusion[j][0] - 0.2).abs() <= 3.0 * c.diffusion_se[j][0] + 1e-12);
            assert!(c.diffusion[j][1].abs() <= 3.0 * c.diffusion_se[j][1] + 1e-12);
        }
    }

    #[test]
    fn deterministic_series() {
        let e = bm(200, 1);
        let rows = vec![(0..=20).map(|j| (-0.02 * j as f64 * 0.05).exp()).collect::<Vec<f64>>(); 200];
        let s = PathSeries::from_rows(rows, vec![true; 200]);
        let c = estimate_coefficients(&s, &e).unwrap();
        for j in 0..20 {
            assert!((c.drift[j] + 0.02).abs() < 1e-10);
            assert!(c.diffusion[j][0].abs() < 1e-10);
        }
    }

    #[test]
    fn needs_positive_series_and_enough_paths() {
        let e = bm(50, 1);
        assert!(estimate_coefficients(&PathSeries::filled(50, 21, 1.0), &e).is_err());
        let e = bm(150, 1);
        assert!(estimate_coefficients(&PathSeries::filled(150, 21, -1.0), &e).is_err());
    }
}
