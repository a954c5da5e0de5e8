use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::equilibrium::{
    joneses_identity, verify_clearing, verify_no_arbitrage, verify_pathwise_identities, verify_sigma_w_equals_theta,
};
use crate::flow::verify_cocycle;
use crate::oracle::convergence_order;
use crate::population::{verify_ito_aggregation, TestFunction};
use crate::preferences::{check_duality, time_consistency_residual, Component, IsoelasticPreference, SearchGrid};
use crate::scenarios::smooth_market_diagnostic;
use crate::Result;

use super::simulate::build;
use super::{to_json, OutputDir};

/// Faults that each verification suite must detect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// +1% on the recorded short rate (no-arbitrage).
    RateShift,
    /// H × 1.01 from mid-horizon on (clearing).
    KernelScale,
    /// Restarted population weights × 1.1 (cocycle).
    WeightPerturb,
    /// Flow drift × 1.1 in the Itô expansion (Itô aggregation).
    DriftShift,
    /// Relative wealth gain × 1.1 (Joneses identity).
    GainShock,
    /// Terminal utility scale × 1.1 (time consistency).
    TerminalScale,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub applicable: bool,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct VerifySummary {
    pub pass: bool,
    pub suites: Vec<SuiteOutcome>,
    pub file: PathBuf,
}

pub const DUALITY_TOLERANCE: f64 = 1e-6;
pub const TIME_CONSISTENCY_TOLERANCE: f64 = 1e-8;
pub const TIME_CONSISTENCY_BREAK: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct DualitySuite {
    pub cases: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Random (c, α, γ, t, z) cases; both utility components.
pub fn duality_suite(seed: u64, cases: usize) -> Result<DualitySuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1b5_4a32_d192_ed03);
    let grid = SearchGrid::default();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let c = rng.random_range(0.5..2.0);
        let alpha = rng.random_range(0.1..0.9);
        let gamma = rng.random_range(0.01..0.08);
        let t = rng.random_range(0.0..10.0);
        let z = rng.random_range(0.2f64.ln()..5.0f64.ln()).exp();
        let p = IsoelasticPreference::new(c, alpha, gamma * (1.0 - alpha))?;
        for which in [Component::Running, Component::Terminal] {
            worst = worst.max(check_duality(&p, which, t, z, &grid));
        }
    }
    Ok(DualitySuite {
        cases,
        max_residual: worst,
        tolerance: DUALITY_TOLERANCE,
        pass: worst <= DUALITY_TOLERANCE,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TimeConsistencySuite {
    /// Largest residual of the consistent preferences.
    pub max_residual: f64,
    /// Smallest residual after scaling d by 1.1; must exceed the break level.
    pub min_perturbed_residual: f64,
    pub tolerance: f64,
    pub break_level: f64,
    pub pass: bool,
}

/// 𝓘₂(T′) − 𝓘₂(T) = ∫_{T′}^T 𝓘₁ for each preference, and its failure when d
/// is perturbed. `terminal_factor` ≠ 1 perturbs the preferences under test.
pub fn time_consistency_suite(
    prefs: &[IsoelasticPreference],
    horizon: f64,
    terminal_factor: f64,
) -> TimeConsistencySuite {
    let mut worst = 0.0f64;
    let mut perturbed = f64::INFINITY;
    for p in prefs {
        let tested = p.with_terminal_scale(terminal_factor * p.d());
        let bad = p.with_terminal_scale(1.1 * p.d());
        for z in [0.5, 1.0, 2.0] {
            for (a, b) in [(0.0, horizon), (0.25 * horizon, 0.75 * horizon)] {
                worst = worst.max(time_consistency_residual(&tested, a, b, z));
                perturbed = perturbed.min(time_consistency_residual(&bad, a, b, z));
            }
        }
    }
    TimeConsistencySuite {
        max_residual: worst,
        min_perturbed_residual: perturbed,
        tolerance: TIME_CONSISTENCY_TOLERANCE,
        break_level: TIME_CONSISTENCY_BREAK,
        pass: worst <= TIME_CONSISTENCY_TOLERANCE && perturbed > TIME_CONSISTENCY_BREAK,
    }
}

#[derive(Clone, Debug, Serialize)]
struct ItoSuite {
    meshes: Vec<f64>,
    horizon_residuals: Vec<f64>,
    max_step_residuals: Vec<f64>,
    slope: f64,
    slope_se: f64,
    band: [f64; 2],
    pass: bool,
}

const ITO_FACTORS: [usize; 3] = [4, 2, 1];

fn ito_suite(market: &crate::equilibrium::MarketPath, drift_error: f64) -> Result<Option<ItoSuite>> {
    let ens = market.ensemble();
    if ens.grid().steps() % ITO_FACTORS[0] != 0 {
        return Ok(None);
    }
    // f(t, x) = e^{−t/10}|x|².
    let value = |t: f64, x: &[f64]| (-0.1 * t).exp() * x.iter().map(|v| v * v).sum::<f64>();
    let dt_f = |t: f64, x: &[f64]| -0.1 * (-0.1 * t).exp() * x.iter().map(|v| v * v).sum::<f64>();
    let grad = |t: f64, x: &[f64], g: &mut [f64]| {
        let e = (-0.1 * t).exp();
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi = 2.0 * e * xi;
        }
    };
    let hess = |t: f64, x: &[f64], h: &mut [f64]| {
        let d = x.len();
        h.fill(0.0);
        for a in 0..d {
            h[a * d + a] = 2.0 * (-0.1 * t).exp();
        }
    };
    let f = TestFunction {
        value: &value,
        time_derivative: &dt_f,
        gradient: &grad,
        hessian: &hess,
    };
    let measure = market.inputs().measure();
    let mut meshes = Vec::new();
    let mut horizon = Vec::new();
    let mut step = Vec::new();
    for factor in ITO_FACTORS {
        let e = if factor == 1 { (**ens).clone() } else { ens.coarsen(factor)? };
        let r = verify_ito_aggregation(&e, measure, &f, drift_error)?;
        meshes.push(r.dt);
        horizon.push(r.horizon_mean_second_order.abs());
        step.push(r.max_step_mean);
    }
    let pts: Vec<(f64, f64)> = meshes.iter().copied().zip(horizon.iter().copied()).collect();
    let (slope, slope_se) = match convergence_order(&pts) {
        Ok(s) => (s.slope, s.std_error),
        Err(_) => (f64::NAN, f64::NAN),
    };
    let band = [0.8, 1.2];
    Ok(Some(ItoSuite {
        meshes,
        horizon_residuals: horizon,
        max_step_residuals: step,
        slope,
        slope_se,
        band,
        pass: slope >= band[0] && slope <= band[1],
    }))
}

pub fn cmd_verify(cfg: &RunConfig, out: &Path, fault: Option<Fault>) -> Result<VerifySummary> {
    let (base, _) = build(cfg)?;
    let v = cfg.verification;
    let conf = v.confidence();
    let steps = cfg.grid.steps;
    let market = match fault {
        Some(Fault::RateShift) => base.clone().with_rate_shift(0.01),
        Some(Fault::KernelScale) => base.clone().with_kernel_scale(1.01, steps / 2),
        _ => base.clone(),
    };
    let mut suites = Vec::new();
    let mut details = Map::new();
    let mut record = |name: &str, applicable: bool, pass: bool, detail: Value| {
        suites.push(SuiteOutcome {
            name: name.into(),
            applicable,
            pass,
        });
        details.insert(name.into(), detail);
    };

    if v.cocycle {
        let restarts: Vec<usize> = [0, steps / 4, steps / 2, 3 * steps / 4].into_iter().collect();
        let factor = if fault == Some(Fault::WeightPerturb) { 1.1 } else { 1.0 };
        let r = verify_cocycle(market.ensemble(), &restarts, factor)?;
        record("cocycle", true, r.pass, to_json(&r));
    }
    if v.ito {
        let shift = if fault == Some(Fault::DriftShift) { 0.1 } else { 0.0 };
        match ito_suite(&market, shift)? {
            Some(r) => record("ito_aggregation", true, r.pass, to_json(&r)),
            None => record(
                "ito_aggregation",
                false,
                true,
                json!({"skipped": "grid steps must be divisible by 4"}),
            ),
        }
    }
    let policy = market.optimal_policy()?;
    let aggregate = policy.aggregate(market.inputs().measure())?;
    if v.clearing {
        let r = verify_clearing(&market, &aggregate);
        record("clearing", true, r.pass, to_json(&r));
    }
    if v.joneses {
        let shock = if fault == Some(Fault::GainShock) { 1.1 } else { 1.0 };
        let r = joneses_identity(&market, &policy, &aggregate, 0, shock)?;
        record("joneses", true, r.pass, to_json(&r));
    }
    if v.martingale {
        let r = verify_pathwise_identities(&market);
        record("martingale", r.applicable, r.pass, to_json(&r));
    }
    let have_coef = market.coefficients().is_some();
    if v.no_arbitrage {
        if have_coef {
            let r = verify_no_arbitrage(&market, conf)?;
            record("no_arbitrage", true, r.pass, to_json(&r));
        } else {
            record("no_arbitrage", false, true, json!({"skipped": "fewer than 100 paths"}));
        }
    }
    if v.sigma_w {
        if have_coef {
            let r = verify_sigma_w_equals_theta(&market, conf)?;
            record("sigma_w", true, r.pass, to_json(&r));
        } else {
            record("sigma_w", false, true, json!({"skipped": "fewer than 100 paths"}));
        }
    }
    if v.duality {
        let r = duality_suite(cfg.ensemble.seed, v.duality_cases)?;
        record("duality", true, r.pass, to_json(&r));
    }
    let spec = cfg.scenario_spec();
    if v.time_consistency {
        let prefs = spec
            .population
            .points
            .iter()
            .map(|x| spec.preference_at(x))
            .collect::<Result<Vec<_>>>()?;
        let factor = if fault == Some(Fault::TerminalScale) { 1.1 } else { 1.0 };
        let r = time_consistency_suite(&prefs, cfg.grid.horizon - cfg.grid.t0, factor);
        record("time_consistency", true, r.pass, to_json(&r));
    }
    // Report only: feasibility of the smooth-market construction.
    let smooth = if v.smooth_market && market.ensemble().noise_dim() >= 2 {
        smooth_market_diagnostic(&market).ok().map(|r| to_json(&r))
    } else {
        None
    };
    let pass = suites.iter().all(|s| s.pass);
    let outcome: Vec<Value> = suites.iter().map(to_json).collect();
    let doc = json!({
        "config": cfg.canonical_json(),
        "scenario": cfg.scenario.kind.name(),
        "fault": fault.map(|f| to_json(&f)),
        "pass": pass,
        "suites": outcome,
        "details": Value::Object(details),
        "smooth_market": smooth,
        "flagged_fraction": market.ensemble().flagged_fraction(),
    });
    let dir = OutputDir::create(out, cfg.config_hash(), Some(cfg.ensemble.seed))?;
    let file = dir.json("verification.json", doc)?;
    Ok(VerifySummary { pass, suites, file })
}
