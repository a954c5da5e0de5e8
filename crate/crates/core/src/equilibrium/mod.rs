//! Short-horizon equilibrium built from primitives: effective aggregate
//! process η, loading −∂η, state price H = −∂η/I, prices and endowment
//! values, together with the verification suites of the characterization.
//!
//! Per-type quantities are per unit of type mass; aggregates are Σ wᵢ(·)ᵢ,
//! with the population weight already inside the type income Λ·I(φ).

mod coefficients;
mod nested;
mod verify;

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::flow::{Ensemble, FlowModel, ScalarField, VectorField};
use crate::oracle::MIN_PATHS;
use crate::policy::{limit_policy, PolicyInputs, PolicyPath};
use crate::population::PopulationMeasure;
use crate::quad::gauss_legendre_unit;
use crate::series::{PathSeries, TypeSeries};
use crate::{Error, Result};

pub use coefficients::{estimate_coefficients, LogCoefficients, MarketCoefficients};
pub use nested::{NestedMcOptions, NestedReport};
pub use verify::{
    joneses_identity, verify_clearing, verify_no_arbitrage, verify_pathwise_identities, PathwiseReport, verify_sigma_w_equals_theta, ClearingReport,
    JonesesReport, NoArbitrageReport, SigmaWReport, IDENTITY_TOLERANCE,
};

/// Default truncation tolerance relative to η.
pub const TRUNCATION_TOLERANCE: f64 = 1e-8;

/// Threshold below which a price volatility counts as degenerate.
pub const DEGENERATE_SIGMA: f64 = 1e-12;

/// Positive income function I(x), optionally with its gradient.
#[derive(Clone)]
pub struct IncomeField {
    value: ScalarField,
    gradient: Option<VectorField>,
}

impl std::fmt::Debug for IncomeField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IncomeField")
            .field("has_gradient", &self.gradient.is_some())
            .finish()
    }
}

impl IncomeField {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(f),
            gradient: None,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_| c).with_gradient(|_, g| g.fill(0.0))
    }

    pub fn with_gradient(mut self, g: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn value_at(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self) -> Option<&VectorField> {
        self.gradient.as_ref()
    }

    /// The same field multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let v = self.value.clone();
        let g = self.gradient.clone();
        Self {
            value: Arc::new(move |x| k * v(x)),
            gradient: g.map(|g| -> VectorField {
                Arc::new(move |x, out| {
                    g(x, out);
                    out.iter_mut().for_each(|o| *o *= k);
                })
            }),
        }
    }
}

/// Endowment structure Q and its value L.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndowmentSpec {
    /// Q ≡ 0.
    Rentier,
    /// B_t(x) = B₀(x)e^{−λ(x)t}; L = (ηB I/∂η)(y/∫y).
    BField { b0: Vec<f64>, lambda: Vec<f64> },
    /// χ_t(x) = (s₀(x)/∫y) e^{−λ(x)t}; L = (η/∂η) I y χ.
    ChiDecay { chi0_share: Vec<f64>, lambda: Vec<f64> },
    /// u_t(x) = (u_∞ − (u_∞ − u₀)e^{−νt})/∫y and f/∫y; χ from the integral
    /// relation χη = η₀f + ∫(∂η)u.
    UField {
        f_share: Vec<f64>,
        u0_share: Vec<f64>,
        u_inf_share: Vec<f64>,
        nu: Vec<f64>,
    },
    /// Q = ℓ(x_axis)·Λ·I(φ) with ℓ piecewise linear; L by nested Monte Carlo.
    Tabulated {
        axis: usize,
        knots: Vec<f64>,
        shares: Vec<f64>,
        nested: NestedMcOptions,
    },
}

impl EndowmentSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Rentier => "rentier",
            Self::BField { .. } => "example51",
            Self::ChiDecay { .. } | Self::UField { .. } => "example53",
            Self::Tabulated { .. } => "tabulated",
        }
    }

    fn is_closed_form(&self) -> bool {
        !matches!(self, Self::Tabulated { .. })
    }

    fn validate(&self, types: usize, dim: usize) -> Result<()> {
        let len_ok = |v: &[f64], name: &str| {
            if v.len() != types {
                Err(Error::Scenario(format!("{name} needs {types} entries, got {}", v.len())))
            } else if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                Err(Error::Scenario(format!("{name} must be finite and non-negative")))
            } else {
                Ok(())
            }
        };
        match self {
            Self::Rentier => Ok(()),
            Self::BField { b0, lambda } => {
                len_ok(b0, "b0")?;
                len_ok(lambda, "lambda")
            }
            Self::ChiDecay { chi0_share, lambda } => {
                len_ok(chi0_share, "chi0_share")?;
                len_ok(lambda, "lambda")
            }
            Self::UField {
                f_share,
                u0_share,
                u_inf_share,
                nu,
            } => {
                len_ok(f_share, "f_share")?;
                len_ok(u0_share, "u0_share")?;
                len_ok(u_inf_share, "u_inf_share")?;
                len_ok(nu, "nu")
            }
            Self::Tabulated {
                axis,
                knots,
                shares,
                nested,
            } => {
                if *axis >= dim {
                    return Err(Error::Scenario(format!("share axis {axis} outside dimension {dim}")));
                }
                if knots.len() < 2 || knots.len() != shares.len() {
                    return Err(Error::Scenario("share table needs ≥ 2 knots and one share per knot".into()));
                }
                if knots.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Scenario("share knots must increase".into()));
                }
                if shares.iter().any(|s| !(*s >= 0.0 && *s < 1.0)) {
                    return Err(Error::Scenario("shares must lie in [0, 1)".into()));
                }
                nested.validate()
            }
        }
    }
}

/// Piecewise-linear interpolation, flat outside the knots.
pub(crate) fn interp(knots: &[f64], values: &[f64], x: f64) -> f64 {
    if x <= knots[0] {
        return values[0];
    }
    let last = knots.len() - 1;
    if x >= knots[last] {
        return values[last];
    }
    let i = knots.partition_point(|k| *k <= x) - 1;
    let t = (x - knots[i]) / (knots[i + 1] - knots[i]);
    values[i] + t * (values[i + 1] - values[i])
}

#[derive(Clone, Debug)]
pub struct EquilibriumInputs {
    measure: PopulationMeasure,
    income: IncomeField,
    endowment: EndowmentSpec,
    initial_wealth: Vec<f64>,
    budget_scale: f64,
}

impl EquilibriumInputs {
    /// Validates the primitives and rescales y so that ∫yγ dμ = ∫I dμ.
    pub fn new(
        model: &FlowModel,
        measure: PopulationMeasure,
        income: IncomeField,
        endowment: EndowmentSpec,
        initial_wealth: Vec<f64>,
    ) -> Result<Self> {
        let gamma = model
            .impatience()
            .ok_or_else(|| Error::Market("model has no impatience field".into()))?;
        let (lo, _) = model.gamma_bounds();
        if !(lo > 0.0) {
            return Err(Error::Market(format!("γ_lower must be positive, got {lo}")));
        }
        if initial_wealth.len() != measure.len() {
            return Err(Error::Market("initial wealth needs one entry per atom".into()));
        }
        if initial_wealth.iter().any(|y| !(*y > 0.0 && y.is_finite())) {
            return Err(Error::Market("initial net wealth must be positive".into()));
        }
        endowment.validate(measure.len(), model.dim())?;
        let w = measure.weights();
        let pts = measure.points();
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for ((wk, x), y) in w.iter().zip(&pts).zip(&initial_wealth) {
            let i = income.value_at(x);
            if !(i > 0.0 && i.is_finite()) {
                return Err(Error::Market(format!("income must be positive, got {i} at {x:?}")));
            }
            lhs += wk * y * gamma(x);
            rhs += wk * i;
        }
        let budget_scale = rhs / lhs;
        let initial_wealth: Vec<f64> = initial_wealth.iter().map(|y| y * budget_scale).collect();
        let check: f64 = w
            .iter()
            .zip(&pts)
            .zip(&initial_wealth)
            .map(|((wk, x), y)| wk * y * gamma(x))
            .sum();
        if ((check - rhs) / rhs).abs() > 1e-10 {
            return Err(Error::Market(format!("budget identity off by {}", (check - rhs) / rhs)));
        }
        let inputs = Self {
            measure,
            income,
            endowment,
            initial_wealth,
            budget_scale,
        };
        inputs.check_static_invariants()?;
        Ok(inputs)
    }

    fn check_static_invariants(&self) -> Result<()> {
        let w = self.measure.weights();
        let y = &self.initial_wealth;
        let total: f64 = w.iter().zip(y).map(|(a, b)| a * b).sum();
        match &self.endowment {
            EndowmentSpec::BField { b0, .. } => {
                let by: f64 = w.iter().zip(y).zip(b0).map(|((a, b), c)| a * b * c).sum();
                if by >= total {
                    return Err(Error::Scenario(format!("∫B₀y dμ = {by} is not below ∫y dμ = {total}")));
                }
            }
            EndowmentSpec::ChiDecay { chi0_share, .. } => {
                let s: f64 = w.iter().zip(y).zip(chi0_share).map(|((a, b), c)| a * b * c).sum::<f64>() / total;
                if s >= 1.0 {
                    return Err(Error::Scenario(format!("∫yχ₀ dμ = {s} is not below 1")));
                }
            }
            EndowmentSpec::UField {
                f_share,
                u0_share,
                u_inf_share,
                ..
            } => {
                if f_share.iter().zip(u0_share).any(|(f, u)| u < f) {
                    return Err(Error::Scenario("u₀ must be at least f for every type".into()));
                }
                // u_t lies between u₀ and u_∞, so this bounds ∫y u_t dμ for all t.
                let s: f64 = w
                    .iter()
                    .zip(y)
                    .zip(u0_share.iter().zip(u_inf_share))
                    .map(|((a, b), (u0, ui))| a * b * u0.max(*ui))
                    .sum::<f64>()
                    / total;
                if s >= 1.0 {
                    return Err(Error::Scenario(format!("∫y u dμ can reach {s}, not below 1")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn measure(&self) -> &PopulationMeasure {
        &self.measure
    }

    pub fn income(&self) -> &IncomeField {
        &self.income
    }

    pub fn endowment(&self) -> &EndowmentSpec {
        &self.endowment
    }

    /// Rescaled initial net wealth y(x).
    pub fn initial_wealth(&self) -> &[f64] {
        &self.initial_wealth
    }

    pub fn budget_scale(&self) -> f64 {
        self.budget_scale
    }

    /// ∫ y dμ.
    pub fn total_wealth(&self) -> f64 {
        self.measure
            .weights()
            .iter()
            .zip(&self.initial_wealth)
            .map(|(w, y)| w * y)
            .sum()
    }
}

/// η_t = Σ wᵢ e^{−∫γ} yᵢ and the loading Σ wᵢ γ(φ_t) e^{−∫γ} yᵢ.
pub fn compute_eta(ensemble: &Ensemble, measure: &PopulationMeasure, y: &[f64]) -> Result<(PathSeries, PathSeries)> {
    if y.len() != ensemble.types() || measure.len() != ensemble.types() {
        return Err(Error::Market("initial wealth, measure and ensemble disagree on types".into()));
    }
    if y.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Market("initial net wealth must be positive".into()));
    }
    let gamma = ensemble
        .model()
        .impatience()
        .ok_or_else(|| Error::Market("model has no impatience field".into()))?;
    let w = measure.weights();
    let len = ensemble.grid().steps() + 1;
    let dt = ensemble.grid().dt();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..ensemble.paths())
        .into_par_iter()
        .map(|p| {
            let mut eta = vec![0.0; len];
            let mut ell = vec![0.0; len];
            for (k, (wk, yk)) in w.iter().zip(y).enumerate() {
                let mut g_int = 0.0;
                let mut prev = gamma(ensemble.state(p, k, 0));
                for j in 0..len {
                    let g = gamma(ensemble.state(p, k, j));
                    if j > 0 {
                        g_int += 0.5 * dt * (prev + g);
                    }
                    prev = g;
                    let z = wk * yk * (-g_int).exp();
                    eta[j] += z;
                    ell[j] += z * g;
                }
            }
            (eta, ell)
        })
        .collect();
    let active = ensemble.active_mask();
    let (eta, ell): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok((PathSeries::from_rows(eta, active.clone()), PathSeries::from_rows(ell, active)))
}

/// How the smooth-market multiplier κ is selected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaRule {
    /// κ ≡ 1: prices of finite-variation endowment structures share H's risk.
    Structural,
    /// κ = |ϑ|/|σ| with the sign of σᵀϑ; κ = 0 where σ is degenerate.
    Estimated,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MarketOptions {
    /// Tail tolerance relative to η for the truncation horizon.
    pub truncation_tolerance: f64,
    /// None selects by scenario: structural for closed forms.
    pub kappa: Option<KappaRule>,
    /// Seed for nested Monte Carlo streams.
    pub nested_seed: u64,
}

impl Default for MarketOptions {
    fn default() -> Self {
        Self {
            truncation_tolerance: TRUNCATION_TOLERANCE,
            kappa: None,
            nested_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MarketPath {
    pub(crate) ensemble: Arc<Ensemble>,
    pub(crate) inputs: Arc<EquilibriumInputs>,
    pub(crate) eta: PathSeries,
    pub(crate) loading: PathSeries,
    pub(crate) state_price: PathSeries,
    pub(crate) income: PathSeries,
    pub(crate) endowment: PathSeries,
    pub(crate) dividend: PathSeries,
    pub(crate) price: PathSeries,
    pub(crate) liability: PathSeries,
    pub(crate) total_wealth: PathSeries,
    pub(crate) consumption: PathSeries,
    /// ∫ H D over each step (len N).
    pub(crate) step_hd: PathSeries,
    pub(crate) gamma_integral: TypeSeries,
    pub(crate) type_liability: TypeSeries,
    pub(crate) type_endowment: TypeSeries,
    /// ∫₀^t H Q(x) ds.
    pub(crate) type_hq: TypeSeries,
    pub(crate) hedge: TypeSeries,
    pub(crate) kappa: PathSeries,
    pub(crate) kappa_rule: KappaRule,
    pub(crate) degenerate: Vec<bool>,
    pub(crate) coefficients: Option<MarketCoefficients>,
    /// One series per noise component.
    pub(crate) analytic_theta: Option<Vec<PathSeries>>,
    pub(crate) truncation_horizon: f64,
    pub(crate) nested: Option<NestedReport>,
    pub(crate) faults: Vec<String>,
}

/// Per-path pieces assembled into a [`MarketPath`].
struct PathCalc {
    eta: Vec<f64>,
    ell: Vec<f64>,
    inc: Vec<f64>,
    step_hq: Vec<f64>,
    step_ell: Vec<f64>,
    g_int: Vec<f64>,
    lk: Vec<f64>,
    qk: Vec<f64>,
    hqk: Vec<f64>,
    violation: Option<String>,
}

/// Sub-grid interpolant: γ linear, ∫γ quadratic within step j.
struct StepInterp<'a> {
    w: &'a [f64],
    y: &'a [f64],
    g0: Vec<f64>,
    g1: Vec<f64>,
    gi0: Vec<f64>,
    dt: f64,
}

impl StepInterp<'_> {
    /// (η, ℓ) at fraction τ of the step.
    fn at(&self, tau: f64) -> (f64, f64) {
        let mut eta = 0.0;
        let mut ell = 0.0;
        for k in 0..self.w.len() {
            let dg = self.g1[k] - self.g0[k];
            let g = self.g0[k] + tau * dg;
            let gi = self.gi0[k] + self.dt * tau * (self.g0[k] + 0.5 * tau * dg);
            let z = self.w[k] * self.y[k] * (-gi).exp();
            eta += z;
            ell += z * g;
        }
        (eta, ell)
    }
}

fn path_calc(ensemble: &Ensemble, inputs: &EquilibriumInputs, p: usize) -> PathCalc {
    let grid = ensemble.grid();
    let len = grid.steps() + 1;
    let dt = grid.dt();
    let kn = ensemble.types();
    let gamma = ensemble.model().impatience().expect("validated");
    let w = inputs.measure.weights();
    let y = &inputs.initial_wealth;
    let big_y = inputs.total_wealth();
    let mut g_vals = vec![0.0; kn * len];
    let mut g_int = vec![0.0; kn * len];
    let mut type_inc = vec![0.0; kn * len];
    for k in 0..kn {
        let mut acc = 0.0;
        let mut prev = 0.0;
        for j in 0..len {
            let x = ensemble.state(p, k, j);
            let g = gamma(x);
            if j > 0 {
                acc += 0.5 * dt * (prev + g);
            }
            prev = g;
            g_vals[k * len + j] = g;
            g_int[k * len + j] = acc;
            type_inc[k * len + j] = ensemble.log_weight(p, k, j).exp() * inputs.income.value_at(x);
        }
    }
    let mut eta = vec![0.0; len];
    let mut ell = vec![0.0; len];
    let mut inc = vec![0.0; len];
    for j in 0..len {
        for k in 0..kn {
            let z = w[k] * y[k] * (-g_int[k * len + j]).exp();
            eta[j] += z;
            ell[j] += z * g_vals[k * len + j];
            inc[j] += w[k] * type_inc[k * len + j];
        }
    }
    let interp_at = |j: usize| StepInterp {
        w: &w,
        y,
        g0: (0..kn).map(|k| g_vals[k * len + j]).collect(),
        g1: (0..kn).map(|k| g_vals[k * len + j + 1]).collect(),
        gi0: (0..kn).map(|k| g_int[k * len + j]).collect(),
        dt,
    };
    let mut step_ell = vec![0.0; len - 1];
    let mut step_hq = vec![0.0; len - 1];
    let mut lk = vec![0.0; kn * len];
    let mut qk = vec![0.0; kn * len];
    let mut hqk = vec![0.0; kn * len];
    let mut violation = None;
    // Per type: coefficient a(t) and rate λ for the decay families.
    let decay: Option<(Vec<f64>, &Vec<f64>)> = match &inputs.endowment {
        EndowmentSpec::BField { b0, lambda } => Some(((0..kn).map(|k| y[k] * b0[k] / big_y).collect(), lambda)),
        EndowmentSpec::ChiDecay { chi0_share, lambda } => {
            Some(((0..kn).map(|k| y[k] * chi0_share[k] / big_y).collect(), lambda))
        }
        _ => None,
    };
    let eta0 = eta[0];
    for j in 0..len - 1 {
        let si = interp_at(j);
        let t0 = grid.elapsed(j);
        let mut sl = 0.0;
        let mut hq_types = vec![0.0; kn];
        for (tau, wq) in gauss_legendre_unit() {
            let (e, l) = si.at(tau);
            sl += wq * l;
            let t = t0 + tau * dt;
            match (&inputs.endowment, &decay) {
                (_, Some((a, lambda))) => {
                    for k in 0..kn {
                        hq_types[k] += wq * a[k] * (-lambda[k] * t).exp() * (l + lambda[k] * e);
                    }
                }
                (
                    EndowmentSpec::UField {
                        u0_share,
                        u_inf_share,
                        nu,
                        ..
                    },
                    None,
                ) => {
                    for k in 0..kn {
                        let u = (u_inf_share[k] - (u_inf_share[k] - u0_share[k]) * (-nu[k] * t).exp()) / big_y;
                        hq_types[k] += wq * l * u;
                    }
                }
                _ => {}
            }
        }
        step_ell[j] = sl * dt;
        for k in 0..kn {
            let s = match &inputs.endowment {
                EndowmentSpec::UField { .. } => y[k] * (hq_types[k] * dt),
                _ => hq_types[k] * dt,
            };
            hqk[k * len + j + 1] = hqk[k * len + j] + s;
        }
    }
    for j in 0..len {
        let t = grid.elapsed(j);
        let ratio = inc[j] / ell[j];
        for k in 0..kn {
            let o = k * len + j;
            let (l, q) = match (&inputs.endowment, &decay) {
                (_, Some((a, lambda))) => {
                    let at = a[k] * (-lambda[k] * t).exp();
                    (0.0 - eta[j] * at * ratio, at * (ell[j] + lambda[k] * eta[j]) * ratio)
                }
                (
                    EndowmentSpec::UField {
                        f_share,
                        u0_share,
                        u_inf_share,
                        nu,
                    },
                    None,
                ) => {
                    let u = (u_inf_share[k] - (u_inf_share[k] - u0_share[k]) * (-nu[k] * t).exp()) / big_y;
                    // χη = η₀f − ∫ℓu, with ∫ℓu = ∫HQ / y.
                    let chi_eta = eta0 * f_share[k] / big_y - hqk[o] / y[k];
                    if violation.is_none() {
                        let chi = chi_eta / eta[j];
                        if chi < -1e-14 {
                            violation = Some(format!("χ < 0 for type {k} at step {j}"));
                        } else if chi > u * (1.0 + 1e-12) {
                            violation = Some(format!("∂χ > 0 for type {k} at step {j}"));
                        }
                    }
                    (0.0 - ratio * y[k] * chi_eta, y[k] * inc[j] * u)
                }
                (EndowmentSpec::Tabulated { axis, knots, shares, .. }, None) => {
                    let x = ensemble.state(p, k, j);
                    (0.0, interp(knots, shares, x[*axis]) * type_inc[o])
                }
                _ => (0.0, 0.0),
            };
            lk[o] = l;
            qk[o] = q;
            if violation.is_none() && !(q >= 0.0 && q < type_inc[o]) {
                violation = Some(format!(
                    "endowment rate {q} outside [0, I) = [0, {}) for type {k} at step {j}",
                    type_inc[o]
                ));
            }
        }
    }
    if let EndowmentSpec::Tabulated { .. } = &inputs.endowment {
        // Trapezoid on H Q; the liability is filled in by nested Monte Carlo.
        for k in 0..kn {
            for j in 0..len - 1 {
                let o = k * len + j;
                let h0 = ell[j] / inc[j];
                let h1 = ell[j + 1] / inc[j + 1];
                hqk[o + 1] = hqk[o] + 0.5 * dt * (h0 * qk[o] + h1 * qk[o + 1]);
            }
        }
    }
    for j in 0..len - 1 {
        let mut s = 0.0;
        for k in 0..kn {
            s += w[k] * (hqk[k * len + j + 1] - hqk[k * len + j]);
        }
        step_hq[j] = s;
    }
    PathCalc {
        eta,
        ell,
        inc,
        step_hq,
        step_ell,
        g_int,
        lk,
        qk,
        hqk,
        violation,
    }
}

/// Construct the market from the primitives on a simulated ensemble.
pub fn build_market(inputs: EquilibriumInputs, ensemble: Arc<Ensemble>, options: &MarketOptions) -> Result<MarketPath> {
    let model = ensemble.model();
    if model.impatience().is_none() {
        return Err(Error::Market("model has no impatience field".into()));
    }
    if inputs.measure.len() != ensemble.types() {
        return Err(Error::Market("measure and ensemble disagree on the number of types".into()));
    }
    let (gamma_lower, _) = model.gamma_bounds();
    if !(gamma_lower > 0.0) {
        return Err(Error::Market(format!("γ_lower must be positive, got {gamma_lower}")));
    }
    let tol = options.truncation_tolerance;
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Market(format!("truncation tolerance must lie in (0, 1), got {tol}")));
    }
    let truncation_horizon = (1.0 / tol).ln() / gamma_lower;
    let grid = *ensemble.grid();
    let len = grid.steps() + 1;
    let kn = ensemble.types();
    let m = ensemble.paths();
    let mut calcs: Vec<PathCalc> = (0..m).into_par_iter().map(|p| path_calc(&ensemble, &inputs, p)).collect();
    for (p, c) in calcs.iter().enumerate() {
        if ensemble.is_flagged(p) {
            continue;
        }
        if let Some(v) = &c.violation {
            return Err(Error::Market(format!("path {p}: {v}")));
        }
    }
    let nested = if let EndowmentSpec::Tabulated {
        axis,
        knots,
        shares,
        nested,
    } = &inputs.endowment
    {
        let share = |x: &[f64]| interp(knots, shares, x[*axis]);
        let data: Vec<nested::OuterPath> = calcs
            .iter()
            .map(|c| nested::OuterPath {
                g_int: &c.g_int,
                eta: &c.eta,
                ell: &c.ell,
                inc: &c.inc,
            })
            .collect();
        let (liab, report) =
            nested::nested_liability(&ensemble, &inputs, &share, &data, nested, tol, options.nested_seed)?;
        for (c, l) in calcs.iter_mut().zip(liab) {
            c.lk = l;
        }
        Some(report)
    } else {
        None
    };
    let w = inputs.measure.weights();
    let active = ensemble.active_mask();
    let mut rows: [Vec<Vec<f64>>; 11] = Default::default();
    for c in &calcs {
        let mut liab = vec![0.0; len];
        let mut endow = vec![0.0; len];
        for j in 0..len {
            for k in 0..kn {
                liab[j] += w[k] * c.lk[k * len + j];
                endow[j] += w[k] * c.qk[k * len + j];
            }
        }
        let h: Vec<f64> = (0..len).map(|j| c.ell[j] / c.inc[j]).collect();
        let pw: Vec<f64> = (0..len).map(|j| c.eta[j] / h[j]).collect();
        let price: Vec<f64> = (0..len).map(|j| pw[j] + liab[j]).collect();
        let div: Vec<f64> = (0..len).map(|j| c.inc[j] - endow[j]).collect();
        let cons: Vec<f64> = (0..len).map(|j| c.ell[j] / h[j]).collect();
        let hd: Vec<f64> = (0..len - 1).map(|j| c.step_ell[j] - c.step_hq[j]).collect();
        rows[0].push(c.eta.clone());
        rows[1].push(c.ell.clone());
        rows[2].push(h);
        rows[3].push(c.inc.clone());
        rows[4].push(endow);
        rows[5].push(div);
        rows[6].push(price);
        rows[7].push(liab);
        rows[8].push(pw);
        rows[9].push(cons);
        rows[10].push(hd);
    }
    for (p, row) in rows[6].iter().enumerate() {
        if active[p] && row.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Market(format!("non-positive price on path {p}")));
        }
    }
    let [eta, loading, state_price, income, endowment, dividend, price, liability, total_wealth, consumption, step_hd] =
        rows.map(|r| PathSeries::from_rows(r, active.clone()));
    let mut g_int = Vec::with_capacity(m);
    let mut lk = Vec::with_capacity(m);
    let mut qk = Vec::with_capacity(m);
    let mut hqk = Vec::with_capacity(m);
    for c in calcs {
        g_int.push(c.g_int);
        lk.push(c.lk);
        qk.push(c.qk);
        hqk.push(c.hqk);
    }
    let gamma_integral = TypeSeries::from_blocks(g_int, kn, len);
    let type_liability = TypeSeries::from_blocks(lk, kn, len);
    let type_endowment = TypeSeries::from_blocks(qk, kn, len);
    let type_hq = TypeSeries::from_blocks(hqk, kn, len);

    let active_count = active.iter().filter(|a| **a).count();
    let coefficients = if active_count >= MIN_PATHS {
        Some(MarketCoefficients::estimate(
            &ensemble,
            &state_price,
            &price,
            &total_wealth,
            &consumption,
            &loading,
        )?)
    } else {
        None
    };
    let kappa_rule = options.kappa.unwrap_or(if inputs.endowment.is_closed_form() {
        KappaRule::Structural
    } else {
        KappaRule::Estimated
    });
    let steps = grid.steps();
    let (step_kappa, degenerate): (Vec<f64>, Vec<bool>) = match (&coefficients, kappa_rule) {
        (Some(c), rule) => (0..steps)
            .map(|j| {
                let s = c.sigma(j);
                let th = c.theta(j);
                let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nt = th.iter().map(|v| v * v).sum::<f64>().sqrt();
                let deg = ns < DEGENERATE_SIGMA;
                let k = match rule {
                    KappaRule::Structural => 1.0,
                    KappaRule::Estimated if deg => 0.0,
                    KappaRule::Estimated => {
                        let dot: f64 = s.iter().zip(&th).map(|(a, b)| a * b).sum();
                        dot.signum() * nt / ns
                    }
                };
                (k, deg)
            })
            .unzip(),
        (None, KappaRule::Structural) => (vec![1.0; steps], vec![false; steps]),
        (None, KappaRule::Estimated) => {
            return Err(Error::Market(format!(
                "estimated κ needs {MIN_PATHS} unflagged paths, got {active_count}"
            )))
        }
    };
    let kappa_row: Vec<f64> = (0..len).map(|j| step_kappa[j.min(steps - 1)]).collect();
    let kappa = PathSeries::from_rows(vec![kappa_row; m], active);
    let hedge_blocks: Vec<Vec<f64>> = (0..m)
        .map(|p| {
            let mut b = Vec::with_capacity(kn * len);
            for k in 0..kn {
                for j in 0..len {
                    b.push(0.0 - type_liability.get(p, k, j) * kappa.get(p, j));
                }
            }
            b
        })
        .collect();
    let hedge = TypeSeries::from_blocks(hedge_blocks, kn, len);
    let analytic_theta = analytic_theta(&ensemble, &inputs, &gamma_integral, &loading, &income);
    Ok(MarketPath {
        ensemble,
        inputs: Arc::new(inputs),
        eta,
        loading,
        state_price,
        income,
        endowment,
        dividend,
        price,
        liability,
        total_wealth,
        consumption,
        step_hd,
        gamma_integral,
        type_liability,
        type_endowment,
        type_hq,
        hedge,
        kappa,
        kappa_rule,
        degenerate,
        coefficients,
        analytic_theta,
        truncation_horizon,
        nested,
        faults: Vec::new(),
    })
}

/// Σ^I/I − Σ^γ/ℓ with Σ^I = Σ w Λ ∇I ϱ and Σ^γ = Σ w Z ∇γ ϱ.
fn analytic_theta(
    ensemble: &Ensemble,
    inputs: &EquilibriumInputs,
    gamma_integral: &TypeSeries,
    loading: &PathSeries,
    income: &PathSeries,
) -> Option<Vec<PathSeries>> {
    let model = ensemble.model();
    let grad_i = inputs.income.gradient()?;
    let grad_g = model.impatience_gradient()?;
    let (d, n) = (model.dim(), model.noise_dim());
    let len = ensemble.grid().steps() + 1;
    let w = inputs.measure.weights();
    let y = &inputs.initial_wealth;
    let rows: Vec<Vec<f64>> = (0..ensemble.paths())
        .into_par_iter()
        .map(|p| {
            let mut out = vec![0.0; len * n];
            let mut gi = vec![0.0; d];
            let mut gg = vec![0.0; d];
            let mut s = vec![0.0; d * n];
            for j in 0..len {
                let mut si = vec![0.0; n];
                let mut sg = vec![0.0; n];
                for k in 0..ensemble.types() {
                    let x = ensemble.state(p, k, j);
                    grad_i(x, &mut gi);
                    grad_g(x, &mut gg);
                    model.diffusion_at(x, &mut s);
                    let lam = ensemble.log_weight(p, k, j).exp();
                    let z = y[k] * (-gamma_integral.get(p, k, j)).exp();
                    for c in 0..n {
                        let mut a = 0.0;
                        let mut b = 0.0;
                        for r in 0..d {
                            a += gi[r] * s[r * n + c];
                            b += gg[r] * s[r * n + c];
                        }
                        si[c] += w[k] * lam * a;
                        sg[c] += w[k] * z * b;
                    }
                }
                for c in 0..n {
                    out[c * len + j] = si[c] / income.get(p, j) - sg[c] / loading.get(p, j);
                }
            }
            out
        })
        .collect();
    let active = ensemble.active_mask();
    Some(
        (0..n)
            .map(|c| {
                PathSeries::from_rows(
                    rows.iter().map(|r| r[c * len..(c + 1) * len].to_vec()).collect(),
                    active.clone(),
                )
            })
            .collect(),
    )
}

impl MarketPath {
    pub fn ensemble(&self) -> &Arc<Ensemble> {
        &self.ensemble
    }

    pub fn inputs(&self) -> &EquilibriumInputs {
        &self.inputs
    }

    pub fn eta(&self) -> &PathSeries {
        &self.eta
    }

    /// −∂η.
    pub fn loading(&self) -> &PathSeries {
        &self.loading
    }

    pub fn state_price(&self) -> &PathSeries {
        &self.state_price
    }

    /// I^μ.
    pub fn income(&self) -> &PathSeries {
        &self.income
    }

    /// Q^μ.
    pub fn endowment(&self) -> &PathSeries {
        &self.endowment
    }

    /// D^μ = I^μ − Q^μ.
    pub fn dividend(&self) -> &PathSeries {
        &self.dividend
    }

    /// P^μ.
    pub fn price(&self) -> &PathSeries {
        &self.price
    }

    /// L^μ.
    pub fn liability(&self) -> &PathSeries {
        &self.liability
    }

    /// P^W = η/H.
    pub fn total_wealth(&self) -> &PathSeries {
        &self.total_wealth
    }

    /// c^μ = −∂η/H.
    pub fn consumption(&self) -> &PathSeries {
        &self.consumption
    }

    pub fn step_hd(&self) -> &PathSeries {
        &self.step_hd
    }

    pub fn gamma_integral(&self) -> &TypeSeries {
        &self.gamma_integral
    }

    pub fn type_liability(&self) -> &TypeSeries {
        &self.type_liability
    }

    pub fn type_endowment(&self) -> &TypeSeries {
        &self.type_endowment
    }

    pub fn type_hq(&self) -> &TypeSeries {
        &self.type_hq
    }

    pub fn hedge(&self) -> &TypeSeries {
        &self.hedge
    }

    pub fn kappa(&self) -> &PathSeries {
        &self.kappa
    }

    pub fn kappa_rule(&self) -> KappaRule {
        self.kappa_rule
    }

    /// Steps where |σ| < 1e-12.
    pub fn degenerate_steps(&self) -> &[bool] {
        &self.degenerate
    }

    pub fn coefficients(&self) -> Option<&MarketCoefficients> {
        self.coefficients.as_ref()
    }

    pub fn analytic_theta(&self) -> Option<&[PathSeries]> {
        self.analytic_theta.as_deref()
    }

    pub fn truncation_horizon(&self) -> f64 {
        self.truncation_horizon
    }

    pub fn nested_report(&self) -> Option<&NestedReport> {
        self.nested.as_ref()
    }

    pub fn faults(&self) -> &[String] {
        &self.faults
    }

    /// δ = D/P.
    pub fn dividend_yield(&self) -> PathSeries {
        self.dividend.zip_map(&self.price, |d, p| d / p)
    }

    /// Limit policy of every type priced with this market's H and κ.
    pub fn optimal_policy(&self) -> Result<PolicyPath> {
        limit_policy(
            &self.ensemble,
            &PolicyInputs {
                state_price: &self.state_price,
                kappa: &self.kappa,
                initial_wealth: &self.inputs.initial_wealth,
                liability: Some(&self.type_liability),
                hedge: Some(&self.hedge),
            },
        )
    }

    /// Policy inputs tied to this market.
    pub fn policy_inputs(&self) -> PolicyInputs<'_> {
        PolicyInputs {
            state_price: &self.state_price,
            kappa: &self.kappa,
            initial_wealth: &self.inputs.initial_wealth,
            liability: Some(&self.type_liability),
            hedge: Some(&self.hedge),
        }
    }

    /// Fault: the reported short rate shifted by `delta`.
    pub fn with_rate_shift(mut self, delta: f64) -> Self {
        if let Some(c) = &mut self.coefficients {
            c.rate.iter_mut().for_each(|r| *r += delta);
        }
        self.faults.push(format!("rate_shift({delta})"));
        self
    }

    /// Fault: H multiplied by `factor` from grid index `from` on.
    pub fn with_kernel_scale(mut self, factor: f64, from: usize) -> Self {
        for p in 0..self.state_price.paths() {
            for j in from..self.state_price.len() {
                let h = self.state_price.get(p, j);
                self.state_price.set(p, j, h * factor);
            }
        }
        self.faults.push(format!("kernel_scale({factor}, {from})"));
        self
    }

    /// Compare every numeric path bit for bit.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let ps = |a: &PathSeries, b: &PathSeries| {
            a.paths() == b.paths()
                && a.len() == b.len()
                && (0..a.paths()).all(|p| a.row(p).iter().zip(b.row(p)).all(|(x, y)| x.to_bits() == y.to_bits()))
        };
        let ts = |a: &TypeSeries, b: &TypeSeries| {
            a.paths() == b.paths()
                && a.types() == b.types()
                && (0..a.paths()).all(|p| a.block(p).iter().zip(b.block(p)).all(|(x, y)| x.to_bits() == y.to_bits()))
        };
        ps(&self.eta, &other.eta)
            && ps(&self.loading, &other.loading)
            && ps(&self.state_price, &other.state_price)
            && ps(&self.income, &other.income)
            && ps(&self.endowment, &other.endowment)
            && ps(&self.dividend, &other.dividend)
            && ps(&self.price, &other.price)
            && ps(&self.liability, &other.liability)
            && ps(&self.total_wealth, &other.total_wealth)
            && ps(&self.consumption, &other.consumption)
            && ps(&self.step_hd, &other.step_hd)
            && ps(&self.kappa, &other.kappa)
            && ts(&self.gamma_integral, &other.gamma_integral)
            && ts(&self.type_liability, &other.type_liability)
            && ts(&self.type_endowment, &other.type_endowment)
            && ts(&self.type_hq, &other.type_hq)
            && ts(&self.hedge, &other.hedge)
            && self.degenerate == other.degenerate
            && self.coefficients == other.coefficients
    }
}

#[cfg(test)]
mod tests;
