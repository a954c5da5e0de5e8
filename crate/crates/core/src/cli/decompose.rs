use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::RunConfig;
use crate::decomp::decompose_from_market;
use crate::{Error, Result};

use super::simulate::build;
use super::{num, to_json, OutputDir};

pub fn cmd_decompose(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (market, _) = build(cfg)?;
    if market.coefficients().is_none() {
        return Err(Error::Estimation("decompose needs at least 100 paths".into()));
    }
    let d = decompose_from_market(&market, cfg.verification.confidence())?;
    let grid = *market.ensemble().grid();
    let dir = OutputDir::create(out, cfg.config_hash(), Some(cfg.ensemble.seed))?;
    let header: Vec<String> = [
        "step",
        "time",
        "consumption_term",
        "impatience_term",
        "total_premium",
        "amplifies",
        "short_rate",
        "short_rate_se",
        "market_rate",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = d
        .steps
        .iter()
        .map(|s| {
            vec![
                s.step.to_string(),
                num(grid.time(s.step)),
                num(s.premium.consumption),
                num(s.premium.impatience),
                num(s.premium.total),
                s.premium.amplifies.to_string(),
                num(s.short_rate),
                num(s.short_rate_se),
                num(s.market_rate),
            ]
        })
        .collect();
    let csv = dir.csv("decomposition.csv", &header, &rows)?;
    let json = dir.json(
        "decomposition.json",
        json!({
            "config": cfg.canonical_json(),
            "consistency": to_json(&d.consistency),
            "pass": d.consistency.verdict,
        }),
    )?;
    Ok(vec![csv, json])
}
