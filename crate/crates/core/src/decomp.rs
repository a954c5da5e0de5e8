//! Equity-premium and short-rate decompositions, the long-run equity
//! premium comparison under the proxy σ^W ≈ σ^Σ, and the same
//! decomposition read off a simulated market.

use serde::Serialize;

use crate::equilibrium::{MarketPath, IDENTITY_TOLERANCE};
use crate::oracle::{Confidence, StatTestReport};
use crate::{Error, Result};

/// Bundled long-run estimates; see `data/table1.csv`.
pub const TABLE1_CSV: &str = include_str!("../data/table1.csv");

fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// σ^Wᵀσ^Σ.
pub fn equity_premium(sigma_w: &[f64], sigma_price: &[f64]) -> Result<f64> {
    dot(sigma_w, sigma_price)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PremiumDecomposition {
    /// (σ^c)ᵀσ^Σ.
    pub consumption: f64,
    /// (σ^{−∂η})ᵀσ^Σ.
    pub impatience: f64,
    /// consumption − impatience.
    pub total: f64,
    /// The impatience loading raises the premium when its term is negative.
    pub amplifies: bool,
}

pub fn decomposed_premium(sigma_c: &[f64], sigma_loading: &[f64], sigma_price: &[f64]) -> Result<PremiumDecomposition> {
    if sigma_c.len() != sigma_loading.len() {
        return Err(Error::Data(format!(
            "dimension mismatch: {} vs {}",
            sigma_c.len(),
            sigma_loading.len()
        )));
    }
    let consumption = dot(sigma_c, sigma_price)?;
    let impatience = dot(sigma_loading, sigma_price)?;
    Ok(PremiumDecomposition {
        consumption,
        impatience,
        total: consumption - impatience,
        amplifies: impatience < 0.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Table1Derived {
    /// (σ^Σ)².
    pub predicted_ep: f64,
    /// EP/σ^Σ.
    pub implied_theta: f64,
    pub ep_exceeds_prediction: bool,
}

pub fn table1_row(sigma: f64, ep: f64) -> Result<Table1Derived> {
    if !(sigma > 0.0) || !sigma.is_finite() || !ep.is_finite() {
        return Err(Error::Data(format!("need σ^Σ > 0 and finite EP, got ({sigma}, {ep})")));
    }
    let predicted_ep = sigma * sigma;
    Ok(Table1Derived {
        predicted_ep,
        implied_theta: ep / sigma,
        ep_exceeds_prediction: ep > predicted_ep,
    })
}

/// r = (μ^c − μ^{−∂η}) − (σ^c)ᵀϑ.
pub fn short_rate(mu_c: f64, mu_loading: f64, consumption_risk_premium: f64) -> f64 {
    (mu_c - mu_loading) - consumption_risk_premium
}

/// r = μ^c + γ − |σ^c|².
pub fn short_rate_constant(mu_c: f64, gamma: f64, sigma_c_norm: f64) -> f64 {
    mu_c + gamma - sigma_c_norm * sigma_c_norm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table1Entry {
    pub source: String,
    pub period: String,
    pub sigma: f64,
    pub ep: f64,
    /// Printed (σ^Σ)² in percent.
    pub printed_ep_hat: f64,
    pub printed_theta: f64,
}

pub fn parse_table1(text: &str) -> Result<Vec<Table1Entry>> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Data("empty table".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Data(format!("missing column {name}")))
    };
    let (cs, cp, csig, cep) = (col("source")?, col("period")?, col("sigma")?, col("ep")?);
    let printed = (col("printed_ep_hat").ok(), col("printed_theta").ok());
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != header.len() {
                return Err(Error::Data(format!("row {} has {} fields, expected {}", i + 1, f.len(), header.len())));
            }
            let num = |c: usize| {
                f[c].parse::<f64>()
                    .map_err(|e| Error::Data(format!("row {}: bad number {:?}: {e}", i + 1, f[c])))
            };
            Ok(Table1Entry {
                source: f[cs].to_string(),
                period: f[cp].to_string(),
                sigma: num(csig)?,
                ep: num(cep)?,
                printed_ep_hat: printed.0.map(num).transpose()?.unwrap_or(f64::NAN),
                printed_theta: printed.1.map(num).transpose()?.unwrap_or(f64::NAN),
            })
        })
        .collect()
}

pub fn bundled_table1() -> Vec<Table1Entry> {
    parse_table1(TABLE1_CSV).expect("bundled table parses")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table1Comparison {
    pub entry: Table1Entry,
    pub derived: Table1Derived,
    /// |100·predicted − printed| in percentage points.
    pub ep_hat_gap_pp: f64,
    pub theta_gap: f64,
    pub pass: bool,
}

/// Recompute the derived columns and diff them against the printed ones
/// (0.1 percentage point for EP̂, 0.01 for ϑ).
pub fn compare_table1(entries: &[Table1Entry]) -> Result<Vec<Table1Comparison>> {
    entries
        .iter()
        .map(|e| {
            let derived = table1_row(e.sigma, e.ep)?;
            let ep_hat_gap_pp = (100.0 * derived.predicted_ep - e.printed_ep_hat).abs();
            let theta_gap = (derived.implied_theta - e.printed_theta).abs();
            Ok(Table1Comparison {
                entry: e.clone(),
                derived,
                ep_hat_gap_pp,
                theta_gap,
                pass: ep_hat_gap_pp <= 0.1 + 1e-9 && theta_gap <= 0.01 + 1e-9,
            })
        })
        .collect()
}

/// Observable inputs for the short-rate calculation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObservableInputs {
    pub sigma_sigma: f64,
    pub ep: f64,
    pub mu_c: f64,
    pub sigma_c: f64,
    pub gamma: f64,
    /// (σ^c)ᵀϑ.
    pub consumption_risk_premium: f64,
    /// μ^{−∂η}; −γ when absent.
    pub mu_loading: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub predicted_ep: f64,
    pub implied_theta: f64,
    /// Under σ^W = σ^Σ with σ^c and σ^Σ collinear: σ^c·σ^Σ.
    pub consumption_premium: f64,
    /// consumption premium − total premium.
    pub impatience_premium: f64,
    pub total_premium: f64,
    pub short_rate_constant: f64,
    pub short_rate_heterogeneous: f64,
}

pub fn decompose_observables(o: &ObservableInputs) -> Result<DecompositionReport> {
    let row = table1_row(o.sigma_sigma, o.ep)?;
    let consumption = o.sigma_c * o.sigma_sigma;
    let total = row.predicted_ep;
    Ok(DecompositionReport {
        predicted_ep: row.predicted_ep,
        implied_theta: row.implied_theta,
        consumption_premium: consumption,
        impatience_premium: consumption - total,
        total_premium: total,
        short_rate_constant: short_rate_constant(o.mu_c, o.gamma, o.sigma_c),
        short_rate_heterogeneous: short_rate(o.mu_c, o.mu_loading.unwrap_or(-o.gamma), o.consumption_risk_premium),
    })
}

/// Post-war nominal inputs: μ^c 5.55%, γ 1.2%, |σ^c| 1.24%, (σ^c)ᵀϑ 2.38%.
pub fn nominal_observables() -> ObservableInputs {
    ObservableInputs {
        sigma_sigma: 0.155,
        ep: 0.0678,
        mu_c: 0.0555,
        sigma_c: 0.0124,
        gamma: 0.012,
        consumption_risk_premium: 0.0238,
        mu_loading: None,
    }
}

/// Real counterpart: μ^c 2%, (σ^c)ᵀϑ 2.2%.
pub fn real_observables() -> ObservableInputs {
    ObservableInputs {
        mu_c: 0.02,
        consumption_risk_premium: 0.022,
        ..nominal_observables()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MarketDecompositionStep {
    pub step: usize,
    pub sigma_c: Vec<f64>,
    pub sigma_loading: Vec<f64>,
    pub sigma_price: Vec<f64>,
    pub theta: Vec<f64>,
    pub premium: PremiumDecomposition,
    /// μ^c − μ^ℓ − (σ^c)ᵀϑ.
    pub short_rate: f64,
    pub short_rate_se: f64,
    /// Short rate recorded by the market.
    pub market_rate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MarketDecomposition {
    pub steps: Vec<MarketDecompositionStep>,
    /// ϑ − (σ^c − σ^{−∂η}) per (step, component).
    pub consistency: StatTestReport,
}

/// Per-step decomposition from the market's estimated coefficients:
/// σ^c from c^μ, σ^{−∂η} from the loading ℓ, σ from the price.
pub fn decompose_from_market(market: &MarketPath, confidence: Confidence) -> Result<MarketDecomposition> {
    let coef = market
        .coefficients()
        .ok_or_else(|| Error::Estimation("market has no coefficient estimates".into()))?;
    let n = market.ensemble().noise_dim();
    let mut steps = Vec::with_capacity(coef.steps());
    let mut stat = Vec::new();
    let mut se = Vec::new();
    for j in 0..coef.steps() {
        let sc = coef.consumption.diffusion[j].clone();
        let sl = coef.loading.diffusion[j].clone();
        let sp = coef.sigma(j).to_vec();
        let th = coef.theta(j);
        let premium = decomposed_premium(&sc, &sl, &sp)?;
        let crp = dot(&sc, &th)?;
        let r = short_rate(coef.consumption.drift[j], coef.loading.drift[j], crp);
        let r_se = coef.consumption.drift_se[j].hypot(coef.loading.drift_se[j]);
        for c in 0..n {
            stat.push(th[c] - (sc[c] - sl[c]));
            let a = coef.state_price.diffusion_se[j][c];
            let b = coef.consumption.diffusion_se[j][c];
            let d = coef.loading.diffusion_se[j][c];
            se.push((a * a + b * b + d * d).sqrt());
        }
        steps.push(MarketDecompositionStep {
            step: j,
            sigma_c: sc,
            sigma_loading: sl,
            sigma_price: sp,
            theta: th,
            premium,
            short_rate: r,
            short_rate_se: r_se,
            market_rate: coef.rate[j],
        });
    }
    let consistency = StatTestReport::from_steps(
        "ϑ = σ^c − σ^{−∂η}",
        stat,
        se,
        Confidence {
            floor: confidence.floor.max(IDENTITY_TOLERANCE),
            ..confidence
        },
    );
    Ok(MarketDecomposition { steps, consistency })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proxy_premium_mehra() {
        let p = equity_premium(&[0.186], &[0.186]).unwrap();
        assert!((p - 0.034596).abs() < 1e-12);
        assert_eq!(format!("{:.1}", 100.0 * p), "3.5");
    }

    #[test]
    fn homogeneous_collapses_to_consumption_term() {
        let d = decomposed_premium(&[0.02, 0.01], &[0.0, 0.0], &[0.15, 0.05]).unwrap();
        assert_eq!(d.total, d.consumption);
        assert_eq!(d.impatience, 0.0);
    }

    #[test]
    fn hand_computed_inner_products() {
        let d = decomposed_premium(&[0.0124, 0.0], &[-0.05, 0.1], &[0.15, 0.05]).unwrap();
        // 0.0124·0.15 = 0.00186; −0.05·0.15 + 0.1·0.05 = −0.0025.
        assert!((d.consumption - 0.00186).abs() < 1e-15);
        assert!((d.impatience + 0.0025).abs() < 1e-15);
        assert!((d.total - 0.00436).abs() < 1e-15);
        assert!(d.amplifies);
        assert!(decomposed_premium(&[0.1], &[0.1, 0.0], &[0.1, 0.0]).is_err());
    }

    #[test]
    fn table_rows_reproduce() {
        let rows = compare_table1(&bundled_table1()).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert!(r.pass, "{r:?}");
            assert!(r.derived.ep_exceeds_prediction);
            assert!(r.derived.implied_theta > r.entry.sigma);
        }
        let m = table1_row(0.186, 0.069).unwrap();
        assert_eq!(format!("{:.2}", m.implied_theta), "0.37");
        assert!(table1_row(0.0, 0.05).is_err());
    }

    #[test]
    fn short_rates() {
        let n = decompose_observables(&nominal_observables()).unwrap();
        assert_eq!(format!("{:.2}", 100.0 * n.short_rate_constant), "6.73");
        assert_eq!(format!("{:.2}", 100.0 * n.short_rate_heterogeneous), "4.37");
        let r = decompose_observables(&real_observables()).unwrap();
        assert_eq!(format!("{:.1}", 100.0 * r.short_rate_heterogeneous), "1.0");
        assert_eq!(short_rate_constant(0.02, 0.01, 0.0), 0.03);
    }

    #[test]
    fn malformed_table_rejected() {
        assert!(parse_table1("").is_err());
        assert!(parse_table1("source,period,sigma\nA,1,0.1").is_err());
        assert!(parse_table1("source,period,sigma,ep\nA,1,x,0.1").is_err());
        assert!(parse_table1("source,period,sigma,ep\nA,1,0.1").is_err());
    }
}
