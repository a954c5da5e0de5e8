//! Scenario catalogue: the common OU-flow setup with a sigmoid impatience
//! field and log-linear income, the rentier economy, the B-field and the
//! χ/u-field endowment families, and a tabulated labor-share case.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    build_market, EndowmentSpec, EquilibriumInputs, IncomeField, MarketOptions, MarketPath, NestedMcOptions,
};
use crate::flow::{simulate_flow, Ensemble, FlowModel, TimeGrid};
use crate::population::PopulationMeasure;
use crate::preferences::IsoelasticPreference;
use crate::series::PathSeries;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Rentier,
    Example51,
    Example53,
    Tabulated,
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Rentier => "rentier",
            Self::Example51 => "example51",
            Self::Example53 => "example53",
            Self::Tabulated => "tabulated",
        }
    }
}

/// dX = −θ(X − m)dt + S dW with population growth rate h.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub theta: f64,
    pub mean: Vec<f64>,
    /// d rows of n entries.
    pub vol: Vec<Vec<f64>>,
    #[serde(default)]
    pub growth: f64,
}

/// γ(x) = γ_min + (γ_max − γ_min)·sigmoid(slope·(x[axis] − offset)), and
/// the isoelastic pair (c, α) whose β = γ(1 − α).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceSpec {
    pub gamma_min: f64,
    pub gamma_max: f64,
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub axis: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_c")]
    pub c: f64,
}

fn default_alpha() -> f64 {
    0.5
}

fn default_c() -> f64 {
    1.0
}

/// I(x) = scale·exp(loadings·x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncomeSpec {
    pub scale: f64,
    pub loadings: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Initial net wealth per atom; I(x)/γ(x) when absent. Rescaled to the
    /// budget identity either way.
    #[serde(default)]
    pub initial_wealth: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example51Spec {
    pub b0: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Example53Mode {
    ChiDecay,
    UField,
}

/// Shares are in units of 1/∫y dμ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example53Spec {
    pub mode: Example53Mode,
    #[serde(default)]
    pub chi0_share: Vec<f64>,
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub f_share: Vec<f64>,
    #[serde(default)]
    pub u0_share: Vec<f64>,
    #[serde(default)]
    pub u_inf_share: Vec<f64>,
    #[serde(default)]
    pub nu: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedSpec {
    pub axis: usize,
    pub knots: Vec<f64>,
    pub shares: Vec<f64>,
    #[serde(default)]
    pub nested: NestedMcOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub flow: FlowSpec,
    pub preferences: PreferenceSpec,
    pub income: IncomeSpec,
    pub population: PopulationSpec,
    pub example51: Option<Example51Spec>,
    pub example53: Option<Example53Spec>,
    pub tabulated: Option<TabulatedSpec>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Desk-scale atoms on the two-dimensional type space.
const DESK_POINTS: [[f64; 2]; 5] = [[-1.0, -0.5], [-0.5, 0.5], [0.0, 0.0], [0.5, -0.5], [1.0, 0.5]];
const DESK_WEIGHTS: [f64; 5] = [0.15, 0.2, 0.3, 0.2, 0.15];

impl ScenarioSpec {
    /// Default desk scenario of the given kind: d = n = 2, OU flow with
    /// diagonal volatility, five atoms, γ driven by x₁ and income by x₂.
    pub fn desk(kind: ScenarioKind) -> Self {
        let example51 = (kind == ScenarioKind::Example51).then(|| Example51Spec {
            b0: vec![0.04, 0.06, 0.08, 0.10, 0.12],
            lambda: vec![0.02, 0.03, 0.04, 0.05, 0.06],
        });
        let example53 = (kind == ScenarioKind::Example53).then(|| Example53Spec {
            mode: Example53Mode::UField,
            chi0_share: Vec::new(),
            lambda: Vec::new(),
            f_share: vec![0.10; 5],
            u0_share: vec![0.12; 5],
            u_inf_share: vec![0.20; 5],
            nu: vec![0.1; 5],
        });
        let tabulated = (kind == ScenarioKind::Tabulated).then(|| TabulatedSpec {
            axis: 1,
            knots: vec![-1.0, 0.0, 1.0],
            shares: vec![0.05, 0.10, 0.15],
            nested: NestedMcOptions {
                enabled: true,
                ..NestedMcOptions::default()
            },
        });
        Self {
            kind,
            flow: FlowSpec {
                theta: 0.5,
                mean: vec![0.0, 0.0],
                vol: vec![vec![0.3, 0.0], vec![0.0, 0.3]],
                growth: 0.01,
            },
            preferences: PreferenceSpec {
                gamma_min: 0.01,
                gamma_max: 0.08,
                slope: 1.5,
                offset: 0.0,
                axis: 0,
                alpha: 0.5,
                c: 1.0,
            },
            income: IncomeSpec {
                scale: 1.0,
                loadings: vec![0.0, 0.2],
            },
            population: PopulationSpec {
                points: DESK_POINTS.iter().map(|p| p.to_vec()).collect(),
                weights: DESK_WEIGHTS.to_vec(),
                initial_wealth: None,
            },
            example51,
            example53,
            tabulated,
        }
    }

    /// One-dimensional OU flow with a sigmoid γ, for the rolling-limit
    /// convergence experiment.
    pub fn ou_gamma() -> Self {
        Self {
            kind: ScenarioKind::Rentier,
            flow: FlowSpec {
                theta: 1.0,
                mean: vec![0.0],
                vol: vec![vec![0.5]],
                growth: 0.0,
            },
            preferences: PreferenceSpec {
                gamma_min: 0.01,
                gamma_max: 0.08,
                slope: 2.0,
                offset: 0.0,
                axis: 0,
                alpha: 0.5,
                c: 1.0,
            },
            income: IncomeSpec {
                scale: 1.0,
                loadings: vec![0.0],
            },
            population: PopulationSpec {
                points: vec![vec![-0.5], vec![0.0], vec![0.5]],
                weights: vec![0.3, 0.4, 0.3],
                initial_wealth: None,
            },
            example51: None,
            example53: None,
            tabulated: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.flow.mean.len()
    }

    pub fn noise_dim(&self) -> usize {
        self.flow.vol.first().map_or(0, Vec::len)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.dim();
        let n = self.noise_dim();
        if d == 0 || n == 0 || self.flow.vol.len() != d || self.flow.vol.iter().any(|r| r.len() != n) {
            return Err(Error::Scenario(format!("flow volatility must be {d}×n with n ≥ 1")));
        }
        if self.income.loadings.len() != d {
            return Err(Error::Scenario(format!("income loadings need {d} entries")));
        }
        if self.preferences.axis >= d {
            return Err(Error::Scenario(format!("impatience axis {} outside dimension {d}", self.preferences.axis)));
        }
        if !(self.income.scale > 0.0) {
            return Err(Error::Scenario("income scale must be positive".into()));
        }
        if self.population.points.iter().any(|p| p.len() != d) {
            return Err(Error::Scenario(format!("population points must have dimension {d}")));
        }
        Ok(())
    }

    pub fn impatience(&self) -> (impl Fn(&[f64]) -> f64 + Clone, impl Fn(&[f64], &mut [f64]) + Clone) {
        let p = self.preferences.clone();
        let q = p.clone();
        (
            move |x: &[f64]| p.gamma_min + (p.gamma_max - p.gamma_min) * sigmoid(p.slope * (x[p.axis] - p.offset)),
            move |x: &[f64], g: &mut [f64]| {
                g.fill(0.0);
                let s = sigmoid(q.slope * (x[q.axis] - q.offset));
                g[q.axis] = (q.gamma_max - q.gamma_min) * s * (1.0 - s) * q.slope;
            },
        )
    }

    pub fn flow_model(&self) -> Result<FlowModel> {
        self.check_shapes()?;
        let vol: Vec<f64> = self.flow.vol.iter().flatten().copied().collect();
        let (gamma, grad) = self.impatience();
        let h = self.flow.growth;
        Ok(
            FlowModel::ornstein_uhlenbeck(self.flow.theta, self.flow.mean.clone(), vol, self.noise_dim())?
                .with_growth(move |_| h)
                .with_impatience(gamma, self.preferences.gamma_min, self.preferences.gamma_max)?
                .with_impatience_gradient(grad),
        )
    }

    pub fn income_field(&self) -> IncomeField {
        let scale = self.income.scale;
        let a = self.income.loadings.clone();
        let b = a.clone();
        IncomeField::new(move |x| scale * x.iter().zip(&a).map(|(xi, ai)| xi * ai).sum::<f64>().exp()).with_gradient(
            move |x, g| {
                let v = scale * x.iter().zip(&b).map(|(xi, ai)| xi * ai).sum::<f64>().exp();
                for (gi, bi) in g.iter_mut().zip(&b) {
                    *gi = v * bi;
                }
            },
        )
    }

    pub fn measure(&self) -> Result<PopulationMeasure> {
        PopulationMeasure::discrete(self.population.points.clone(), self.population.weights.clone())
    }

    /// Isoelastic structure of the atom at `x`: β = γ(x)(1 − α).
    pub fn preference_at(&self, x: &[f64]) -> Result<IsoelasticPreference> {
        let (gamma, _) = self.impatience();
        IsoelasticPreference::new(self.preferences.c, self.preferences.alpha, gamma(x) * (1.0 - self.preferences.alpha))
    }

    fn initial_wealth(&self) -> Vec<f64> {
        match &self.population.initial_wealth {
            Some(y) => y.clone(),
            None => {
                let (gamma, _) = self.impatience();
                let inc = self.income_field();
                self.population.points.iter().map(|x| inc.value_at(x) / gamma(x)).collect()
            }
        }
    }

    pub fn endowment(&self) -> Result<EndowmentSpec> {
        let missing = |s: &str| Error::Scenario(format!("scenario kind {} needs a [{s}] section", self.kind.name()));
        Ok(match self.kind {
            ScenarioKind::Rentier => EndowmentSpec::Rentier,
            ScenarioKind::Example51 => {
                let e = self.example51.as_ref().ok_or_else(|| missing("example51"))?;
                EndowmentSpec::BField {
                    b0: e.b0.clone(),
                    lambda: e.lambda.clone(),
                }
            }
            ScenarioKind::Example53 => {
                let e = self.example53.as_ref().ok_or_else(|| missing("example53"))?;
                match e.mode {
                    Example53Mode::ChiDecay => EndowmentSpec::ChiDecay {
                        chi0_share: e.chi0_share.clone(),
                        lambda: e.lambda.clone(),
                    },
                    Example53Mode::UField => EndowmentSpec::UField {
                        f_share: e.f_share.clone(),
                        u0_share: e.u0_share.clone(),
                        u_inf_share: e.u_inf_share.clone(),
                        nu: e.nu.clone(),
                    },
                }
            }
            ScenarioKind::Tabulated => {
                let e = self.tabulated.as_ref().ok_or_else(|| missing("tabulated"))?;
                EndowmentSpec::Tabulated {
                    axis: e.axis,
                    knots: e.knots.clone(),
                    shares: e.shares.clone(),
                    nested: e.nested,
                }
            }
        })
    }

    fn inputs(&self, model: &FlowModel) -> Result<EquilibriumInputs> {
        EquilibriumInputs::new(model, self.measure()?, self.income_field(), self.endowment()?, self.initial_wealth())
    }

    pub fn simulate(&self, grid: TimeGrid, paths: usize, seed: u64) -> Result<Ensemble> {
        let model = self.flow_model()?;
        simulate_flow(&model, grid, &self.population.points, paths, seed)
    }
}

fn expect_kind(spec: &ScenarioSpec, kind: ScenarioKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::Scenario(format!("expected a {} scenario, got {}", kind.name(), spec.kind.name())));
    }
    Ok(())
}

pub fn build_rentier(spec: &ScenarioSpec, model: &FlowModel) -> Result<(EquilibriumInputs, AnalyticReferences)> {
    expect_kind(spec, ScenarioKind::Rentier)?;
    let inputs = spec.inputs(model)?;
    Ok((inputs, AnalyticReferences::Rentier))
}

pub fn build_example51(spec: &ScenarioSpec, model: &FlowModel) -> Result<(EquilibriumInputs, AnalyticReferences)> {
    expect_kind(spec, ScenarioKind::Example51)?;
    let e = spec
        .example51
        .as_ref()
        .ok_or_else(|| Error::Scenario("missing B-field parameters".into()))?;
    let inputs = spec.inputs(model)?;
    Ok((
        inputs,
        AnalyticReferences::BField {
            b0: e.b0.clone(),
            lambda: e.lambda.clone(),
        },
    ))
}

pub fn build_example53(spec: &ScenarioSpec, model: &FlowModel) -> Result<(EquilibriumInputs, AnalyticReferences)> {
    expect_kind(spec, ScenarioKind::Example53)?;
    let e = spec
        .example53
        .as_ref()
        .ok_or_else(|| Error::Scenario("missing χ/u-field parameters".into()))?;
    let inputs = spec.inputs(model)?;
    let chi0: Vec<f64> = match e.mode {
        Example53Mode::ChiDecay => e.chi0_share.clone(),
        Example53Mode::UField => e.f_share.clone(),
    };
    Ok((inputs, AnalyticReferences::ChiField { chi0_share: chi0, mode: e.mode, lambda: e.lambda.clone() }))
}

pub fn build_tabulated(spec: &ScenarioSpec, model: &FlowModel) -> Result<(EquilibriumInputs, AnalyticReferences)> {
    expect_kind(spec, ScenarioKind::Tabulated)?;
    Ok((spec.inputs(model)?, AnalyticReferences::None))
}

/// Dispatch on the scenario kind.
pub fn build_inputs(spec: &ScenarioSpec, model: &FlowModel) -> Result<(EquilibriumInputs, AnalyticReferences)> {
    match spec.kind {
        ScenarioKind::Rentier => build_rentier(spec, model),
        ScenarioKind::Example51 => build_example51(spec, model),
        ScenarioKind::Example53 => build_example53(spec, model),
        ScenarioKind::Tabulated => build_tabulated(spec, model),
    }
}

/// Simulate and construct the market in one call.
pub fn build_scenario_market(
    spec: &ScenarioSpec,
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    options: &MarketOptions,
) -> Result<(MarketPath, AnalyticReferences)> {
    let model = spec.flow_model()?;
    let (inputs, refs) = build_inputs(spec, &model)?;
    let ensemble = Arc::new(simulate_flow(&model, grid, &spec.population.points, paths, seed)?);
    let opts = MarketOptions {
        nested_seed: seed,
        ..*options
    };
    Ok((build_market(inputs, ensemble, &opts)?, refs))
}

/// Closed-form reference paths evaluated on a market's η, ℓ and I.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticReferences {
    Rentier,
    BField { b0: Vec<f64>, lambda: Vec<f64> },
    ChiField { chi0_share: Vec<f64>, mode: Example53Mode, lambda: Vec<f64> },
    None,
}

impl AnalyticReferences {
    /// Closed-form price: (ηI/ℓ)(1 − Σ w y B_t/∫y) for the B-field,
    /// (ηI/ℓ)(1 − Σ w y χ_t) for χ-decay, ηI/ℓ for the rentier economy.
    pub fn price(&self, market: &MarketPath) -> Option<PathSeries> {
        let inputs = market.inputs();
        let w = inputs.measure().weights();
        let y = inputs.initial_wealth();
        let big_y = inputs.total_wealth();
        let grid = *market.ensemble().grid();
        let share = |t: f64| -> Option<f64> {
            match self {
                Self::Rentier => Some(0.0),
                Self::BField { b0, lambda } | Self::ChiField { chi0_share: b0, lambda, mode: Example53Mode::ChiDecay } => {
                    Some((0..w.len()).map(|k| w[k] * y[k] * b0[k] * (-lambda[k] * t).exp()).sum::<f64>() / big_y)
                }
                _ => None,
            }
        };
        share(0.0)?;
        let rows = (0..market.price().paths())
            .map(|p| {
                (0..market.price().len())
                    .map(|j| {
                        let pw = market.eta().get(p, j) * market.income().get(p, j) / market.loading().get(p, j);
                        pw * (1.0 - share(grid.elapsed(j)).expect("checked"))
                    })
                    .collect()
            })
            .collect();
        Some(PathSeries::from_rows(rows, market.price().activity().to_vec()))
    }

    /// ∫₀^∞ H Q(x) dt per type: y B₀ for the B-field, η₀ y χ₀ for χ fields.
    pub fn total_endowment_value(&self, market: &MarketPath, path: usize) -> Option<Vec<f64>> {
        let inputs = market.inputs();
        let y = inputs.initial_wealth();
        let big_y = inputs.total_wealth();
        match self {
            Self::Rentier => Some(vec![0.0; y.len()]),
            Self::BField { b0, .. } => Some(y.iter().zip(b0).map(|(a, b)| a * b).collect()),
            Self::ChiField { chi0_share, .. } => {
                let eta0 = market.eta().get(path, 0);
                Some(y.iter().zip(chi0_share).map(|(a, c)| eta0 * a * c / big_y).collect())
            }
            Self::None => None,
        }
    }
}

/// Σ^I = Σ w Λ ∇I ϱ and Σ^γ = Σ w Z ∇γ ϱ on every path and step,
/// flattened as [path][step][component].
struct RiskLoadings {
    n: usize,
    sigma_i: Vec<f64>,
    sigma_g: Vec<f64>,
    samples: usize,
}

fn risk_loadings(market: &MarketPath) -> Result<RiskLoadings> {
    let ens = market.ensemble();
    let model = ens.model();
    let inputs = market.inputs();
    let grad_i = inputs
        .income()
        .gradient()
        .ok_or_else(|| Error::Scenario("income gradient not supplied".into()))?;
    let grad_g = model
        .impatience_gradient()
        .ok_or_else(|| Error::Scenario("impatience gradient not supplied".into()))?;
    let (d, n) = (model.dim(), model.noise_dim());
    let len = ens.grid().steps() + 1;
    let w = inputs.measure().weights();
    let y = inputs.initial_wealth();
    let mut sigma_i = Vec::new();
    let mut sigma_g = Vec::new();
    let mut gi = vec![0.0; d];
    let mut gg = vec![0.0; d];
    let mut s = vec![0.0; d * n];
    let mut samples = 0;
    for p in (0..ens.paths()).filter(|&p| !ens.is_flagged(p)) {
        for j in 0..len {
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            for k in 0..ens.types() {
                let x = ens.state(p, k, j);
                grad_i(x, &mut gi);
                grad_g(x, &mut gg);
                model.diffusion_at(x, &mut s);
                let lam = ens.log_weight(p, k, j).exp();
                let z = y[k] * (-market.gamma_integral().get(p, k, j)).exp();
                for c in 0..n {
                    for r in 0..d {
                        a[c] += w[k] * lam * gi[r] * s[r * n + c];
                        b[c] += w[k] * z * gg[r] * s[r * n + c];
                    }
                }
            }
            sigma_i.extend(a);
            sigma_g.extend(b);
            samples += 1;
        }
    }
    Ok(RiskLoadings {
        n,
        sigma_i,
        sigma_g,
        samples,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SmcPairCheck {
    /// max |uᵀΣ^γ| relative to max |Σ^γ|.
    pub u_orthogonality: f64,
    /// max |vᵀΣ^I| relative to max |Σ^I|.
    pub v_orthogonality: f64,
    /// min |uᵀΣ^I + vᵀΣ^γ| over samples.
    pub min_cross: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SmoothMarketReport {
    /// min over paths and steps of |ϑ|.
    pub min_theta_norm: f64,
    pub degenerate_samples: usize,
    pub samples: usize,
    pub degenerate: bool,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub pair: SmcPairCheck,
}

const SMC_TOLERANCE: f64 = 1e-10;

fn max_norm(v: &[f64], n: usize) -> f64 {
    v.chunks(n)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn pair_check(r: &RiskLoadings, u: &[f64], v: &[f64]) -> SmcPairCheck {
    let n = r.n;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mi = max_norm(&r.sigma_i, n).max(f64::MIN_POSITIVE);
    let mg = max_norm(&r.sigma_g, n).max(f64::MIN_POSITIVE);
    let mut uo = 0.0f64;
    let mut vo = 0.0f64;
    let mut cross = f64::INFINITY;
    for (si, sg) in r.sigma_i.chunks(n).zip(r.sigma_g.chunks(n)) {
        uo = uo.max(dot(u, sg).abs() / mg);
        vo = vo.max(dot(v, si).abs() / mi);
        cross = cross.min((dot(u, si) + dot(v, sg)).abs());
    }
    let scale = mi.max(mg);
    SmcPairCheck {
        u_orthogonality: uo,
        v_orthogonality: vo,
        min_cross: cross,
        feasible: uo <= SMC_TOLERANCE && vo <= SMC_TOLERANCE && cross > SMC_TOLERANCE * scale,
    }
}

/// Unit vector in the (numerical) null space of Σ ssᵀ that maximizes the
/// projection of the `other` samples.
fn null_direction(own: &[f64], other: &[f64], n: usize) -> Vec<f64> {
    let gram = |v: &[f64]| {
        let mut m = DMatrix::<f64>::zeros(n, n);
        for c in v.chunks(n) {
            for a in 0..n {
                for b in 0..n {
                    m[(a, b)] += c[a] * c[b];
                }
            }
        }
        m
    };
    let g = gram(own);
    let eig = SymmetricEigen::new(g.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let basis: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i].abs() <= SMC_TOLERANCE * SMC_TOLERANCE * top.max(f64::MIN_POSITIVE) || top == 0.0)
        .collect();
    let basis = if basis.is_empty() {
        // No exact null space: take the weakest direction.
        let i = (0..n)
            .min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
            .expect("n ≥ 1");
        vec![i]
    } else {
        basis
    };
    let pmat = DMatrix::from_fn(n, basis.len(), |r, c| eig.eigenvectors[(r, basis[c])]);
    let proj = pmat.transpose() * gram(other) * &pmat;
    let inner = SymmetricEigen::new(proj);
    let best = (0..basis.len())
        .max_by(|&a, &b| inner.eigenvalues[a].total_cmp(&inner.eigenvalues[b]))
        .expect("non-empty");
    let dir = &pmat * inner.eigenvectors.column(best);
    let norm = dir.norm();
    dir.iter().map(|v| v / norm).collect()
}

/// Non-degeneracy of ϑ = Σ^I/I − Σ^γ/ℓ and a search for fixed u, v with
/// uᵀΣ^γ = 0, vᵀΣ^I = 0 and uᵀΣ^I + vᵀΣ^γ ≠ 0 on all samples.
pub fn smooth_market_diagnostic(market: &MarketPath) -> Result<SmoothMarketReport> {
    let ens = market.ensemble();
    if ens.noise_dim() < 2 {
        return Err(Error::Scenario("the smooth-market diagnostic needs n ≥ 2".into()));
    }
    let r = risk_loadings(market)?;
    let n = r.n;
    let mut min_theta = f64::INFINITY;
    let mut degenerate = 0;
    let len = ens.grid().steps() + 1;
    let mut idx = 0;
    for p in (0..ens.paths()).filter(|&p| !ens.is_flagged(p)) {
        for j in 0..len {
            let inc = market.income().get(p, j);
            let ell = market.loading().get(p, j);
            let th: f64 = (0..n)
                .map(|c| {
                    let v = r.sigma_i[idx * n + c] / inc - r.sigma_g[idx * n + c] / ell;
                    v * v
                })
                .sum::<f64>()
                .sqrt();
            min_theta = min_theta.min(th);
            if th < crate::equilibrium::DEGENERATE_SIGMA {
                degenerate += 1;
            }
            idx += 1;
        }
    }
    let u = null_direction(&r.sigma_g, &r.sigma_i, n);
    let v = null_direction(&r.sigma_i, &r.sigma_g, n);
    let pair = pair_check(&r, &u, &v);
    Ok(SmoothMarketReport {
        min_theta_norm: min_theta,
        degenerate_samples: degenerate,
        samples: r.samples,
        degenerate: degenerate > 0,
        u,
        v,
        pair,
    })
}

/// Check a caller-supplied pair (u, v) against the three conditions.
pub fn check_smc_pair(market: &MarketPath, u: &[f64], v: &[f64]) -> Result<SmcPairCheck> {
    let r = risk_loadings(market)?;
    if u.len() != r.n || v.len() != r.n {
        return Err(Error::Scenario(format!("u and v need {} components", r.n)));
    }
    Ok(pair_check(&r, u, v))
}
