use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::RunConfig;
use crate::equilibrium::MarketPath;
use crate::scenarios::{build_scenario_market, AnalyticReferences};
use crate::series::PathSeries;
use crate::Result;

use super::{num, to_json, OutputDir};

#[derive(Clone, Debug)]
pub struct SimulateSummary {
    pub files: Vec<PathBuf>,
    pub flagged_fraction: f64,
    pub config_hash: String,
}

pub(crate) fn build(cfg: &RunConfig) -> Result<(MarketPath, AnalyticReferences)> {
    cfg.validate()?;
    build_scenario_market(
        &cfg.scenario_spec(),
        cfg.time_grid()?,
        cfg.ensemble.paths,
        cfg.ensemble.seed,
        &cfg.market_options(),
    )
}

fn summary_columns(name: &str) -> Vec<String> {
    ["mean", "q05", "q50", "q95"].iter().map(|s| format!("{name}_{s}")).collect()
}

fn summary_cells(s: &PathSeries, j: usize) -> Vec<String> {
    let m = s.summary_at(j);
    vec![num(m.mean), num(m.q05), num(m.q50), num(m.q95)]
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<SimulateSummary> {
    let (market, refs) = build(cfg)?;
    let hash = cfg.config_hash();
    let dir = OutputDir::create(out, hash.clone(), Some(cfg.ensemble.seed))?;
    let grid = *market.ensemble().grid();
    let mut files = Vec::new();

    let series: [(&str, &PathSeries); 6] = [
        ("H", market.state_price()),
        ("P", market.price()),
        ("PW", market.total_wealth()),
        ("c", market.consumption()),
        ("eta", market.eta()),
        ("loading", market.loading()),
    ];
    let analytic_price = refs.price(&market);
    let mut header = vec!["step".to_string(), "time".to_string()];
    for (name, _) in &series {
        header.extend(summary_columns(name));
    }
    if analytic_price.is_some() {
        header.push("P_analytic_mean".into());
    }
    let rows: Vec<Vec<String>> = (0..=grid.steps())
        .map(|j| {
            let mut r = vec![j.to_string(), num(grid.time(j))];
            for (_, s) in &series {
                r.extend(summary_cells(s, j));
            }
            if let Some(p) = &analytic_price {
                r.push(num(p.mean_at(j)));
            }
            r
        })
        .collect();
    files.push(dir.csv("paths.csv", &header, &rows)?);

    let n = market.ensemble().noise_dim();
    let mut header: Vec<String> = ["step", "time", "r", "r_se"].iter().map(|s| s.to_string()).collect();
    let analytic = market.analytic_theta();
    for c in 0..n {
        for s in ["theta", "theta_se", "sigma", "sigma_se", "sigma_w", "sigma_w_se"] {
            header.push(format!("{s}_{c}"));
        }
        if analytic.is_some() {
            header.push(format!("theta_analytic_{c}"));
            header.push(format!("sigma_w_minus_analytic_{c}"));
        }
    }
    let rows: Vec<Vec<String>> = match market.coefficients() {
        None => Vec::new(),
        Some(coef) => (0..coef.steps())
            .map(|j| {
                let mut r = vec![
                    j.to_string(),
                    num(grid.time(j)),
                    num(coef.rate[j]),
                    num(coef.state_price.drift_se[j]),
                ];
                let th = coef.theta(j);
                for c in 0..n {
                    r.push(num(th[c]));
                    r.push(num(coef.state_price.diffusion_se[j][c]));
                    r.push(num(coef.sigma(j)[c]));
                    r.push(num(coef.price.diffusion_se[j][c]));
                    r.push(num(coef.sigma_w(j)[c]));
                    r.push(num(coef.total_wealth.diffusion_se[j][c]));
                    if let Some(a) = analytic {
                        let s = &a[c];
                        let vals: Vec<f64> = s.active_paths().map(|p| 0.5 * (s.get(p, j) + s.get(p, j + 1))).collect();
                        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
                        r.push(num(mean));
                        r.push(num(coef.sigma_w(j)[c] - mean));
                    }
                }
                r
            })
            .collect(),
    };
    files.push(dir.csv("coefficients.csv", &header, &rows)?);

    let flagged = market.ensemble().flagged_fraction();
    let run = json!({
        "config": cfg.canonical_json(),
        "scenario": cfg.scenario.kind.name(),
        "paths": cfg.ensemble.paths,
        "steps": cfg.grid.steps,
        "flagged_fraction": flagged,
        "truncation_horizon": market.truncation_horizon(),
        "kappa_rule": to_json(&market.kappa_rule()),
        "degenerate_steps": market.degenerate_steps().iter().filter(|d| **d).count(),
        "budget_scale": market.inputs().budget_scale(),
        "total_initial_wealth": market.inputs().total_wealth(),
        "coefficients_available": market.coefficients().is_some(),
        "nested": market.nested_report().map(to_json),
        "analytic_references": to_json(&refs),
    });
    files.push(dir.json("run.json", run)?);
    Ok(SimulateSummary {
        files,
        flagged_fraction: flagged,
        config_hash: hash,
    })
}
