//! C ABI over the simulator.
//!
//! Configs and runs are opaque handles owned by the caller and released with
//! the matching `_free`. Every function returns a [`DsbStatus`] code unless it
//! is a pure formula; the message of the last failure on the calling thread
//! is available through [`dsb_last_error_message`]. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use duesenberry::cli::cmd_verify;
use duesenberry::config::RunConfig;
use duesenberry::decomp::{short_rate, short_rate_constant, table1_row};
use duesenberry::equilibrium::{verify_clearing, MarketPath};
use duesenberry::scenarios::{build_scenario_market, ScenarioKind};
use duesenberry::series::PathSeries;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    SimulationFailed = 4,
    OutOfRange = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Path series selectors for [`dsb_run_copy_series`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsbSeries {
    StatePrice = 0,
    Price = 1,
    TotalWealth = 2,
    Eta = 3,
    Loading = 4,
    Consumption = 5,
}

/// Scenario selectors for [`dsb_config_desk`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsbScenario {
    Rentier = 0,
    Example51 = 1,
    Example53 = 2,
    Tabulated = 3,
}

/// Opaque run configuration.
pub struct DsbConfig {
    inner: RunConfig,
}

/// Opaque simulated market.
pub struct DsbRun {
    market: MarketPath,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: DsbStatus, msg: impl Into<String>) -> DsbStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> DsbStatus) -> DsbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(DsbStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, DsbStatus> {
    if p.is_null() {
        return Err(fail(DsbStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(DsbStatus::InvalidUtf8, format!("string is not UTF-8: {e}")))
}

fn select(market: &MarketPath, series: u32) -> Result<&PathSeries, DsbStatus> {
    Ok(match series {
        0 => market.state_price(),
        1 => market.price(),
        2 => market.total_wealth(),
        3 => market.eta(),
        4 => market.loading(),
        5 => market.consumption(),
        s => return Err(fail(DsbStatus::OutOfRange, format!("unknown series {s}"))),
    })
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dsb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Bytes needed for the last error message including the NUL; 0 if none.
#[no_mangle]
pub extern "C" fn dsb_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |s| s.as_bytes_with_nul().len()))
}

/// Copy the last error message of this thread into `buf` (NUL-terminated).
/// An empty string is written when there is no error.
///
/// # Safety
/// `buf` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dsb_last_error_message(buf: *mut c_char, len: usize) -> DsbStatus {
    if buf.is_null() {
        return DsbStatus::NullPointer;
    }
    let msg = LAST_ERROR.with(|e| e.borrow().clone()).unwrap_or_default();
    let bytes = msg.as_bytes_with_nul();
    if bytes.len() > len {
        return DsbStatus::BufferTooSmall;
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
    DsbStatus::Ok
}

/// Parse and validate a TOML config.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsb_config_from_toml(toml: *const c_char, out: *mut *mut DsbConfig) -> DsbStatus {
    guard(|| {
        if out.is_null() {
            return fail(DsbStatus::NullPointer, "null output pointer");
        }
        *out = std::ptr::null_mut();
        let text = match read_str(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match RunConfig::from_toml_str(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DsbConfig { inner }));
                DsbStatus::Ok
            }
            Err(e) => fail(DsbStatus::InvalidConfig, e.to_string()),
        }
    })
}

/// Desk config for a scenario (see [`DsbScenario`]).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsb_config_desk(scenario: u32, out: *mut *mut DsbConfig) -> DsbStatus {
    guard(|| {
        if out.is_null() {
            return fail(DsbStatus::NullPointer, "null output pointer");
        }
        *out = std::ptr::null_mut();
        let kind = match scenario {
            0 => ScenarioKind::Rentier,
            1 => ScenarioKind::Example51,
            2 => ScenarioKind::Example53,
            3 => ScenarioKind::Tabulated,
            s => return fail(DsbStatus::OutOfRange, format!("unknown scenario {s}")),
        };
        *out = Box::into_raw(Box::new(DsbConfig {
            inner: RunConfig::desk(kind),
        }));
        DsbStatus::Ok
    })
}

/// Override the ensemble size and seed.
///
/// # Safety
/// `config` must come from this library and not be freed.
#[no_mangle]
pub unsafe extern "C" fn dsb_config_set_ensemble(config: *mut DsbConfig, paths: usize, seed: u64) -> DsbStatus {
    guard(|| {
        let Some(c) = config.as_mut() else {
            return fail(DsbStatus::NullPointer, "null config");
        };
        let mut next = c.inner.clone();
        next.ensemble.paths = paths;
        next.ensemble.seed = seed;
        if let Err(e) = next.validate() {
            return fail(DsbStatus::InvalidConfig, e.to_string());
        }
        c.inner = next;
        DsbStatus::Ok
    })
}

/// Write the 64-character config hash plus NUL into `buf`.
///
/// # Safety
/// `config` must be live; `buf` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dsb_config_hash(config: *const DsbConfig, buf: *mut c_char, len: usize) -> DsbStatus {
    guard(|| {
        let (Some(c), false) = (config.as_ref(), buf.is_null()) else {
            return fail(DsbStatus::NullPointer, "null config or buffer");
        };
        let hash = c.inner.config_hash();
        if len < hash.len() + 1 {
            return fail(DsbStatus::BufferTooSmall, format!("need {} bytes", hash.len() + 1));
        }
        std::ptr::copy_nonoverlapping(hash.as_ptr().cast(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        DsbStatus::Ok
    })
}

/// # Safety
/// `config` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsb_config_free(config: *mut DsbConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Simulate the configured market.
///
/// # Safety
/// `config` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsb_run_new(config: *const DsbConfig, out: *mut *mut DsbRun) -> DsbStatus {
    guard(|| {
        let (Some(c), false) = (config.as_ref(), out.is_null()) else {
            return fail(DsbStatus::NullPointer, "null config or output pointer");
        };
        *out = std::ptr::null_mut();
        let cfg = &c.inner;
        if let Err(e) = cfg.validate() {
            return fail(DsbStatus::InvalidConfig, e.to_string());
        }
        let grid = match cfg.time_grid() {
            Ok(g) => g,
            Err(e) => return fail(DsbStatus::InvalidConfig, e.to_string()),
        };
        match build_scenario_market(
            &cfg.scenario_spec(),
            grid,
            cfg.ensemble.paths,
            cfg.ensemble.seed,
            &cfg.market_options(),
        ) {
            Ok((market, _)) => {
                *out = Box::into_raw(Box::new(DsbRun { market }));
                DsbStatus::Ok
            }
            Err(e) => fail(DsbStatus::SimulationFailed, e.to_string()),
        }
    })
}

/// # Safety
/// `run` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsb_run_free(run: *mut DsbRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of time steps N; series have N + 1 points.
///
/// # Safety
/// `run` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsb_run_steps(run: *const DsbRun, out: *mut usize) -> DsbStatus {
    let (Some(r), false) = (run.as_ref(), out.is_null()) else {
        return fail(DsbStatus::NullPointer, "null run or output pointer");
    };
    *out = r.market.ensemble().grid().steps();
    DsbStatus::Ok
}

/// Number of simulated paths M.
///
/// # Safety
/// `run` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsb_run_paths(run: *const DsbRun, out: *mut usize) -> DsbStatus {
    let (Some(r), false) = (run.as_ref(), out.is_null()) else {
        return fail(DsbStatus::NullPointer, "null run or output pointer");
    };
    *out = r.market.ensemble().paths();
    DsbStatus::Ok
}

/// Copy path `path` of a [`DsbSeries`] into `buf` (N + 1 values). Flagged
/// paths hold NaN.
///
/// # Safety
/// `run` must be live; `buf` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dsb_run_copy_series(
    run: *const DsbRun,
    series: u32,
    path: usize,
    buf: *mut f64,
    len: usize,
) -> DsbStatus {
    guard(|| {
        let (Some(r), false) = (run.as_ref(), buf.is_null()) else {
            return fail(DsbStatus::NullPointer, "null run or buffer");
        };
        let s = match select(&r.market, series) {
            Ok(s) => s,
            Err(st) => return st,
        };
        if path >= s.paths() {
            return fail(DsbStatus::OutOfRange, format!("path {path} of {}", s.paths()));
        }
        let row = s.row(path);
        if len < row.len() {
            return fail(DsbStatus::BufferTooSmall, format!("need {} values", row.len()));
        }
        std::ptr::copy_nonoverlapping(row.as_ptr(), buf, row.len());
        DsbStatus::Ok
    })
}

/// Cross-path mean of a [`DsbSeries`] at every grid point.
///
/// # Safety
/// `run` must be live; `buf` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dsb_run_mean_series(run: *const DsbRun, series: u32, buf: *mut f64, len: usize) -> DsbStatus {
    guard(|| {
        let (Some(r), false) = (run.as_ref(), buf.is_null()) else {
            return fail(DsbStatus::NullPointer, "null run or buffer");
        };
        let s = match select(&r.market, series) {
            Ok(s) => s,
            Err(st) => return st,
        };
        if len < s.len() {
            return fail(DsbStatus::BufferTooSmall, format!("need {} values", s.len()));
        }
        for j in 0..s.len() {
            *buf.add(j) = s.mean_at(j);
        }
        DsbStatus::Ok
    })
}

/// Largest clearing residual of the optimal policy and whether it is within
/// tolerance.
///
/// # Safety
/// `run` must be live; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsb_run_clearing(run: *const DsbRun, residual: *mut f64, pass: *mut bool) -> DsbStatus {
    guard(|| {
        let (Some(r), false, false) = (run.as_ref(), residual.is_null(), pass.is_null()) else {
            return fail(DsbStatus::NullPointer, "null run or output pointer");
        };
        let policy = match r.market.optimal_policy().and_then(|p| p.aggregate(r.market.inputs().measure())) {
            Ok(p) => p,
            Err(e) => return fail(DsbStatus::SimulationFailed, e.to_string()),
        };
        let rep = verify_clearing(&r.market, &policy);
        *residual = rep.money_market.max(rep.commodity).max(rep.stock);
        *pass = rep.pass;
        DsbStatus::Ok
    })
}

/// Run every verification suite and write `verification.json` under `dir`.
/// `pass` receives the overall verdict.
///
/// # Safety
/// `config` must be live; `dir` NUL-terminated; `pass` writable.
#[no_mangle]
pub unsafe extern "C" fn dsb_verify(config: *const DsbConfig, dir: *const c_char, pass: *mut bool) -> DsbStatus {
    guard(|| {
        let (Some(c), false) = (config.as_ref(), pass.is_null()) else {
            return fail(DsbStatus::NullPointer, "null config or output pointer");
        };
        let dir = match read_str(dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match cmd_verify(&c.inner, std::path::Path::new(dir), None) {
            Ok(s) => {
                *pass = s.pass;
                DsbStatus::Ok
            }
            Err(e) => fail(DsbStatus::SimulationFailed, e.to_string()),
        }
    })
}

/// Predicted equity premium (σ^Σ)² and implied ϑ = EP/σ^Σ.
///
/// # Safety
/// Outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsb_table1_row(sigma: f64, ep: f64, predicted_ep: *mut f64, implied_theta: *mut f64) -> DsbStatus {
    if predicted_ep.is_null() || implied_theta.is_null() {
        return fail(DsbStatus::NullPointer, "null output pointer");
    }
    match table1_row(sigma, ep) {
        Ok(r) => {
            *predicted_ep = r.predicted_ep;
            *implied_theta = r.implied_theta;
            DsbStatus::Ok
        }
        Err(e) => fail(DsbStatus::OutOfRange, e.to_string()),
    }
}

/// r = μ^c − μ^{−∂η} − (σ^c)ᵀϑ.
#[no_mangle]
pub extern "C" fn dsb_short_rate(mu_c: f64, mu_loading: f64, consumption_risk_premium: f64) -> f64 {
    short_rate(mu_c, mu_loading, consumption_risk_premium)
}

/// r = μ^c + γ − |σ^c|².
#[no_mangle]
pub extern "C" fn dsb_short_rate_constant(mu_c: f64, gamma: f64, sigma_c_norm: f64) -> f64 {
    short_rate_constant(mu_c, gamma, sigma_c_norm)
}
