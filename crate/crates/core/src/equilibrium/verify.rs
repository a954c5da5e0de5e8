//! Verification suites for a constructed market: clearing, no-arbitrage,
//! σ^W = ϑ and the relative-wealth (Joneses) identity.

use rayon::prelude::*;
use serde::Serialize;

use crate::oracle::{martingale_test, mean_var, regress, Confidence, StatTestReport, MIN_PATHS};
use crate::policy::{AggregatedPolicy, PolicyPath};
use crate::series::PathSeries;
use crate::{Error, Result};

use super::{estimate_coefficients, MarketPath};

/// Tolerance for identities that hold by construction.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, Serialize)]
pub struct ClearingReport {
    /// max |ξ^μ − π^μ| / P^μ.
    pub money_market: f64,
    /// max |c^μ − (Q^μ + D^μ)| / (Q^μ + D^μ).
    pub commodity: f64,
    /// max |π^μ − P^μ| / P^μ.
    pub stock: f64,
    pub consumption_positive: bool,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn verify_clearing(market: &MarketPath, policy: &AggregatedPolicy) -> ClearingReport {
    let mut money = 0.0f64;
    let mut commodity = 0.0f64;
    let mut stock = 0.0f64;
    let mut positive = true;
    let price = &market.price;
    for p in price.active_paths() {
        for j in 0..price.len() {
            let pm = price.get(p, j);
            let xi = policy.wealth.get(p, j);
            let pi = policy.portfolio.get(p, j);
            let c = policy.consumption.get(p, j);
            let qd = market.endowment.get(p, j) + market.dividend.get(p, j);
            money = money.max((xi - pi).abs() / pm.abs());
            commodity = commodity.max((c - qd).abs() / qd.abs());
            stock = stock.max((pi - pm).abs() / pm.abs());
            positive &= c > 0.0;
        }
    }
    let tolerance = IDENTITY_TOLERANCE;
    ClearingReport {
        money_market: money,
        commodity,
        stock,
        consumption_positive: positive,
        tolerance,
        pass: positive && money <= tolerance && commodity <= tolerance && stock <= tolerance,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NoArbitrageReport {
    /// Increments of H P + ∫H D.
    pub martingale: StatTestReport,
    /// b + δ − r − σᵀϑ.
    pub identity: StatTestReport,
    pub pass: bool,
}

/// Rounding allowance for processes that are constant in exact arithmetic.
const ROUNDING: f64 = 1e-12;

pub fn verify_no_arbitrage(market: &MarketPath, confidence: Confidence) -> Result<NoArbitrageReport> {
    let coef = market
        .coefficients
        .as_ref()
        .ok_or_else(|| Error::Estimation("market has no coefficient estimates".into()))?;
    let ens = &market.ensemble;
    let steps = ens.grid().steps();
    let dt = ens.grid().dt();
    let h = &market.state_price;
    let price = &market.price;
    let hp = h.zip_map(price, |a, b| a * b);
    let scale = hp.max_abs();
    let rows: Vec<Vec<f64>> = (0..hp.paths())
        .map(|p| {
            (0..steps)
                .map(|j| hp.get(p, j + 1) - hp.get(p, j) + market.step_hd.get(p, j))
                .collect()
        })
        .collect();
    let incr = PathSeries::from_rows(rows, hp.activity().to_vec());
    let martingale = martingale_test(
        "H·P + ∫H·D martingale",
        &incr,
        Confidence {
            floor: confidence.floor.max(ROUNDING * scale),
            ..confidence
        },
    )?;

    let active: Vec<usize> = hp.active_paths().collect();
    if active.len() < MIN_PATHS {
        return Err(Error::Estimation("too few paths for the coefficient identity".into()));
    }
    let n = ens.noise_dim();
    // Re-derive r from H with the market's estimator; a faulty recorded r shows
    // up as the difference.
    let r_hat = estimate_coefficients(h, ens)?.drift;
    let per_step: Vec<(f64, f64, f64)> = (0..steps)
        .into_par_iter()
        .map(|j| {
            let y: Vec<f64> = active.iter().map(|&p| incr.get(p, j) / hp.get(p, j)).collect();
            let x: Vec<f64> = active.iter().flat_map(|&p| ens.increment(p, j).iter().copied()).collect();
            let min_hp = active.iter().map(|&p| hp.get(p, j)).fold(f64::INFINITY, f64::min);
            regress(&y, &x, n).map(|r| {
                let stat = r.coef[0] / dt + (-r_hat[j] - coef.rate[j]);
                (stat, r.se[0] / dt, ROUNDING * scale / (min_hp * dt))
            })
        })
        .collect::<Result<_>>()?;
    // The per-step floor varies with H P, so judge each step on its own.
    let floor = per_step.iter().map(|s| s.2).fold(0.0f64, f64::max);
    let identity = StatTestReport::from_steps(
        "b + δ − r − σᵀϑ",
        per_step.iter().map(|s| s.0).collect(),
        per_step.iter().map(|s| s.1).collect(),
        Confidence {
            floor: confidence.floor.max(floor),
            ..confidence
        },
    );
    let pass = martingale.verdict && identity.verdict;
    Ok(NoArbitrageReport {
        martingale,
        identity,
        pass,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SigmaWReport {
    /// Estimated diffusion of P^W minus the reference ϑ, per (step, component).
    pub test: StatTestReport,
    /// "analytic" when gradient fields are available, else "estimated".
    pub reference: String,
    /// max |c/P^W − ℓ/η| / (ℓ/η).
    pub ratio_residual: f64,
    pub ratio_pass: bool,
    pub pass: bool,
}

pub fn verify_sigma_w_equals_theta(market: &MarketPath, confidence: Confidence) -> Result<SigmaWReport> {
    let coef = market
        .coefficients
        .as_ref()
        .ok_or_else(|| Error::Estimation("market has no coefficient estimates".into()))?;
    let steps = coef.steps();
    let n = market.ensemble.noise_dim();
    let mut stat = Vec::with_capacity(steps * n);
    let mut se = Vec::with_capacity(steps * n);
    let reference = if let Some(theta) = &market.analytic_theta {
        for j in 0..steps {
            for (c, th) in theta.iter().enumerate() {
                // The step regression recovers the time average of σ^W over the step.
                let vals: Vec<f64> = th.active_paths().map(|p| 0.5 * (th.get(p, j) + th.get(p, j + 1))).collect();
                let (mean, var) = mean_var(&vals);
                stat.push(coef.sigma_w(j)[c] - mean);
                let s = coef.total_wealth.diffusion_se[j][c];
                se.push((s * s + var / vals.len() as f64).sqrt());
            }
        }
        "analytic"
    } else {
        for j in 0..steps {
            let th = coef.theta(j);
            for c in 0..n {
                stat.push(coef.sigma_w(j)[c] - th[c]);
                let a = coef.total_wealth.diffusion_se[j][c];
                let b = coef.state_price.diffusion_se[j][c];
                se.push((a * a + b * b).sqrt());
            }
        }
        "estimated"
    };
    let test = StatTestReport::from_steps(
        "σ^W = ϑ",
        stat,
        se,
        Confidence {
            floor: confidence.floor.max(IDENTITY_TOLERANCE),
            ..confidence
        },
    );
    let mut ratio = 0.0f64;
    for p in market.price.active_paths() {
        for j in 0..market.price.len() {
            let want = market.loading.get(p, j) / market.eta.get(p, j);
            let got = market.consumption.get(p, j) / market.total_wealth.get(p, j);
            ratio = ratio.max((got - want).abs() / want);
        }
    }
    let ratio_pass = ratio <= IDENTITY_TOLERANCE;
    Ok(SigmaWReport {
        pass: test.verdict && ratio_pass,
        test,
        reference: reference.into(),
        ratio_residual: ratio,
        ratio_pass,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PathwiseReport {
    /// False for tabulated endowments, whose L is a Monte Carlo estimate.
    pub applicable: bool,
    /// max over paths and types of |H L − ∫H Q − (H L)₀| / max|H L|.
    pub type_identity: f64,
    /// max over paths of |H P + ∫H D − P₀| / P₀.
    pub price_identity: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// H L(x) − ∫H Q(x) and H P + ∫H D are constant along each path for the
/// closed-form endowments.
pub fn verify_pathwise_identities(market: &MarketPath) -> PathwiseReport {
    let tolerance = IDENTITY_TOLERANCE;
    if market.nested.is_some() {
        return PathwiseReport {
            applicable: false,
            type_identity: f64::NAN,
            price_identity: f64::NAN,
            tolerance,
            pass: true,
        };
    }
    let h = &market.state_price;
    let kn = market.ensemble.types();
    let mut ti = 0.0f64;
    let mut pi = 0.0f64;
    for p in h.active_paths() {
        for k in 0..kn {
            let hl = |j: usize| h.get(p, j) * market.type_liability.get(p, k, j);
            let scale = (0..h.len()).map(|j| hl(j).abs()).fold(0.0, f64::max);
            if scale == 0.0 {
                continue;
            }
            let c0 = hl(0);
            for j in 0..h.len() {
                ti = ti.max((hl(j) - market.type_hq.get(p, k, j) - c0).abs() / scale);
            }
        }
        let p0 = h.get(p, 0) * market.price.get(p, 0);
        let mut acc = 0.0;
        for j in 0..h.len() {
            if j > 0 {
                acc += market.step_hd.get(p, j - 1);
            }
            pi = pi.max((h.get(p, j) * market.price.get(p, j) + acc - p0).abs() / p0);
        }
    }
    PathwiseReport {
        applicable: true,
        type_identity: ti,
        price_identity: pi,
        tolerance,
        pass: ti <= tolerance && pi <= tolerance,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct JonesesReport {
    pub reference_type: usize,
    /// max |H − e^{−∫γ_ref}/G_ref| / H with G the relative net-wealth gain.
    pub kernel_residual: f64,
    /// max |η/(ξ^μ − L^μ) − H| / H.
    pub aggregate_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `gain_shock` multiplies the relative gain (1 for none).
pub fn joneses_identity(
    market: &MarketPath,
    policy: &PolicyPath,
    aggregate: &AggregatedPolicy,
    reference_type: usize,
    gain_shock: f64,
) -> Result<JonesesReport> {
    if reference_type >= market.ensemble.types() {
        return Err(Error::Market(format!("reference type {reference_type} out of range")));
    }
    let h = &market.state_price;
    let mut kernel = 0.0f64;
    let mut agg = 0.0f64;
    for p in h.active_paths() {
        let base = policy.net_wealth.get(p, reference_type, 0);
        for j in 0..h.len() {
            let hj = h.get(p, j);
            let gain = gain_shock * policy.net_wealth.get(p, reference_type, j) / base;
            let implied = (-market.gamma_integral.get(p, reference_type, j)).exp() / gain;
            kernel = kernel.max((implied - hj).abs() / hj);
            let net = aggregate.wealth.get(p, j) - market.liability.get(p, j);
            agg = agg.max((market.eta.get(p, j) / net - hj).abs() / hj);
        }
    }
    let tolerance = IDENTITY_TOLERANCE;
    Ok(JonesesReport {
        reference_type,
        kernel_residual: kernel,
        aggregate_residual: agg,
        tolerance,
        pass: kernel <= tolerance && agg <= tolerance,
    })
}
