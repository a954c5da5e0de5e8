use std::path::{Path, PathBuf};

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::decomp::{compare_table1, decompose_observables, nominal_observables, parse_table1, real_observables, TABLE1_CSV};
use crate::Result;

use super::{num, to_json, OutputDir};

#[derive(Clone, Debug)]
pub struct CalibrateSummary {
    pub pass: bool,
    pub files: Vec<PathBuf>,
}

/// Table rows from `data` (bundled file when `None`) plus the short-rate
/// calculations. The hash stamped on the outputs is that of the table text.
pub fn cmd_calibrate(out: &Path, data: Option<&str>) -> Result<CalibrateSummary> {
    let text = data.unwrap_or(TABLE1_CSV);
    let rows = compare_table1(&parse_table1(text)?)?;
    let hash = hex::encode(Sha256::digest(text.as_bytes()));
    let dir = OutputDir::create(out, hash, None)?;
    let header: Vec<String> = [
        "source",
        "period",
        "sigma",
        "ep",
        "predicted_ep",
        "predicted_ep_pct",
        "printed_ep_hat_pct",
        "ep_hat_gap_pp",
        "implied_theta",
        "implied_theta_2dp",
        "printed_theta",
        "theta_gap",
        "ep_exceeds_prediction",
        "pass",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.entry.source.clone(),
                r.entry.period.clone(),
                num(r.entry.sigma),
                num(r.entry.ep),
                num(r.derived.predicted_ep),
                format!("{:.1}", 100.0 * r.derived.predicted_ep),
                num(r.entry.printed_ep_hat),
                num(r.ep_hat_gap_pp),
                num(r.derived.implied_theta),
                format!("{:.2}", r.derived.implied_theta),
                num(r.entry.printed_theta),
                num(r.theta_gap),
                r.derived.ep_exceeds_prediction.to_string(),
                r.pass.to_string(),
            ]
        })
        .collect();
    let mut files = vec![dir.csv("table1_comparison.csv", &header, &cells)?];

    let nominal = decompose_observables(&nominal_observables())?;
    let real = decompose_observables(&real_observables())?;
    let checks = [
        ("constant_impatience_nominal", nominal.short_rate_constant, 0.0673, 0.0002),
        ("heterogeneous_nominal", nominal.short_rate_heterogeneous, 0.0437, 0.0002),
        ("heterogeneous_real", real.short_rate_heterogeneous, 0.010, 0.0005),
    ];
    let rates: Vec<serde_json::Value> = checks
        .iter()
        .map(|(name, value, target, tol)| {
            json!({
                "name": name,
                "rate": value,
                "rate_pct_2dp": format!("{:.2}", 100.0 * value),
                "target": target,
                "tolerance": tol,
                "pass": (value - target).abs() <= tol + 1e-12,
            })
        })
        .collect();
    let rates_pass = checks.iter().all(|(_, v, t, tol)| (v - t).abs() <= tol + 1e-12);
    let table_pass = rows.iter().all(|r| r.pass);
    files.push(dir.json(
        "puzzle.json",
        json!({
            "nominal_inputs": to_json(&nominal_observables()),
            "real_inputs": to_json(&real_observables()),
            "nominal": to_json(&nominal),
            "real": to_json(&real),
            "short_rates": rates,
            "table_pass": table_pass,
            "pass": rates_pass && table_pass,
        }),
    )?);
    Ok(CalibrateSummary {
        pass: rates_pass && table_pass,
        files,
    })
}
