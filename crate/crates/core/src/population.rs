//! Population measures and population-weighted aggregation.

use rayon::prelude::*;
use serde::Serialize;

use crate::flow::{Ensemble, FlowModel};
use crate::series::PathSeries;
use crate::{Error, Result};

/// log-weights above this switch the aggregate to a scaled sum.
const LOG_WEIGHT_GUARD: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    Discrete,
    Quadrature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub point: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationMeasure {
    atoms: Vec<Atom>,
    kind: MeasureKind,
}

impl PopulationMeasure {
    pub fn discrete(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::Measure(format!(
                "{} points and {} weights",
                points.len(),
                weights.len()
            )));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::Measure("points must share a positive dimension".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Measure("weights must be positive and finite".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Measure("points must be finite".into()));
        }
        Ok(Self {
            atoms: points
                .into_iter()
                .zip(weights)
                .map(|(point, weight)| Atom { point, weight })
                .collect(),
            kind: MeasureKind::Discrete,
        })
    }

    /// Midpoint rule on the box [lower, upper] split into `cells[i]` cells
    /// per axis; each node carries density·cell volume. Nodes where the
    /// density vanishes are dropped.
    pub fn quadrature(lower: &[f64], upper: &[f64], cells: &[usize], density: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let d = lower.len();
        if d == 0 || upper.len() != d || cells.len() != d {
            return Err(Error::Measure("box bounds and cell counts must share a dimension".into()));
        }
        if cells.contains(&0) || lower.iter().zip(upper).any(|(a, b)| !(b > a)) {
            return Err(Error::Measure("empty box or zero cell count".into()));
        }
        let widths: Vec<f64> = (0..d).map(|i| (upper[i] - lower[i]) / cells[i] as f64).collect();
        let volume: f64 = widths.iter().product();
        let total: usize = cells.iter().product();
        let mut atoms = Vec::new();
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            let x: Vec<f64> = (0..d).map(|i| lower[i] + (idx[i] as f64 + 0.5) * widths[i]).collect();
            let g = density(&x);
            if !g.is_finite() || g < 0.0 {
                return Err(Error::Measure(format!("density {g} at {x:?}")));
            }
            if g > 0.0 {
                atoms.push(Atom {
                    point: x,
                    weight: g * volume,
                });
            }
            for i in 0..d {
                idx[i] += 1;
                if idx[i] < cells[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        if atoms.is_empty() {
            return Err(Error::Measure("density vanishes on every node".into()));
        }
        Ok(Self {
            atoms,
            kind: MeasureKind::Quadrature,
        })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.atoms.iter().map(|a| a.point.clone()).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.weight).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn check_domain(&self, model: &FlowModel) -> Result<()> {
        for a in &self.atoms {
            if a.point.len() != model.dim() || !model.in_domain(&a.point) {
                return Err(Error::Measure(format!("atom {:?} is outside the type space", a.point)));
            }
        }
        Ok(())
    }

    /// Σ wᵢ f(xᵢ) at time zero.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.weight * f(&a.point)).sum()
    }
}

/// Argument handed to aggregated fields.
#[derive(Clone, Copy, Debug)]
pub struct FieldPoint<'a> {
    pub step: usize,
    pub time: f64,
    pub type_index: usize,
    pub state: &'a [f64],
    pub log_weight: f64,
}

#[derive(Clone, Debug)]
pub struct AggregatePath {
    pub values: PathSeries,
    pub provenance: String,
}

#[derive(Clone, Debug)]
pub struct VectorAggregatePath {
    /// One series per component.
    pub components: Vec<PathSeries>,
    pub provenance: String,
}

fn check_pairing(ensemble: &Ensemble, measure: &PopulationMeasure) -> Result<()> {
    if ensemble.types() != measure.len() {
        return Err(Error::Measure(format!(
            "ensemble has {} types but the measure has {} atoms",
            ensemble.types(),
            measure.len()
        )));
    }
    Ok(())
}

/// Σ_k w_k Λ_k f_k for one path and step, guarded against weight overflow.
#[inline]
pub(crate) fn weighted_sum(weights: &[f64], log_weights: &[f64], values: &[f64]) -> f64 {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m > LOG_WEIGHT_GUARD {
        let s: f64 = weights
            .iter()
            .zip(log_weights)
            .zip(values)
            .map(|((w, l), f)| w * (l - m).exp() * f)
            .sum();
        s * m.exp()
    } else {
        weights
            .iter()
            .zip(log_weights)
            .zip(values)
            .map(|((w, l), f)| w * l.exp() * f)
            .sum()
    }
}

/// Aggregate one path with caller-supplied atom weights.
fn aggregate_row(
    ensemble: &Ensemble,
    p: usize,
    weights: &[f64],
    field: &(dyn Fn(&FieldPoint) -> f64 + Sync),
) -> Vec<f64> {
    let grid = ensemble.grid();
    let k_n = ensemble.types();
    let mut lw = vec![0.0; k_n];
    let mut fv = vec![0.0; k_n];
    (0..=grid.steps())
        .map(|j| {
            for k in 0..k_n {
                lw[k] = ensemble.log_weight(p, k, j);
                fv[k] = field(&FieldPoint {
                    step: j,
                    time: grid.time(j),
                    type_index: k,
                    state: ensemble.state(p, k, j),
                    log_weight: lw[k],
                });
            }
            weighted_sum(weights, &lw, &fv)
        })
        .collect()
}

/// ψ^μ_t = Σᵢ wᵢ Λ_t(xᵢ) f(t, φ_t(xᵢ)) on every path. Flagged paths carry
/// NaN and are inactive.
pub fn aggregate(
    ensemble: &Ensemble,
    measure: &PopulationMeasure,
    field: &(dyn Fn(&FieldPoint) -> f64 + Sync),
    provenance: &str,
) -> Result<AggregatePath> {
    check_pairing(ensemble, measure)?;
    let w = measure.weights();
    let len = ensemble.grid().steps() + 1;
    let rows: Vec<Vec<f64>> = (0..ensemble.paths())
        .into_par_iter()
        .map(|p| {
            if ensemble.is_flagged(p) {
                vec![f64::NAN; len]
            } else {
                aggregate_row(ensemble, p, &w, field)
            }
        })
        .collect();
    Ok(AggregatePath {
        values: PathSeries::from_rows(rows, ensemble.active_mask()),
        provenance: provenance.to_string(),
    })
}

/// Vector-valued version of [`aggregate`]; `field` writes `dim` components.
pub fn aggregate_vector(
    ensemble: &Ensemble,
    measure: &PopulationMeasure,
    dim: usize,
    field: &(dyn Fn(&FieldPoint, &mut [f64]) + Sync),
    provenance: &str,
) -> Result<VectorAggregatePath> {
    check_pairing(ensemble, measure)?;
    let components = (0..dim)
        .map(|c| {
            let comp = |pt: &FieldPoint| {
                let mut out = vec![0.0; dim];
                field(pt, &mut out);
                out[c]
            };
            aggregate(ensemble, measure, &comp, provenance).map(|a| a.values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VectorAggregatePath {
        components,
        provenance: provenance.to_string(),
    })
}

/// Atoms (φ_t(xᵢ), wᵢΛ_t(xᵢ)) on one path at grid index `t_index`.
pub fn transport_measure(
    ensemble: &Ensemble,
    measure: &PopulationMeasure,
    t_index: usize,
    path: usize,
) -> Result<PopulationMeasure> {
    check_pairing(ensemble, measure)?;
    if t_index > ensemble.grid().steps() || path >= ensemble.paths() {
        return Err(Error::Measure(format!("index ({path}, {t_index}) out of range")));
    }
    Ok(PopulationMeasure {
        atoms: measure
            .atoms()
            .iter()
            .enumerate()
            .map(|(k, a)| Atom {
                point: ensemble.state(path, k, t_index).to_vec(),
                weight: a.weight * ensemble.weight(path, k, t_index),
            })
            .collect(),
        kind: MeasureKind::Discrete,
    })
}

/// Aggregate path `path` of a restarted ensemble against a transported
/// measure. The measure's atoms must sit at the restarted initial states.
pub fn aggregate_transported(
    restarted: &Ensemble,
    path: usize,
    transported: &PopulationMeasure,
    field: &(dyn Fn(&FieldPoint) -> f64 + Sync),
) -> Result<Vec<f64>> {
    check_pairing(restarted, transported)?;
    for (k, a) in transported.atoms().iter().enumerate() {
        if a.point.as_slice() != restarted.state(path, k, 0) {
            return Err(Error::Measure(format!(
                "atom {k} does not match the restarted initial state on path {path}"
            )));
        }
    }
    Ok(aggregate_row(restarted, path, &transported.weights(), field))
}

/// Smooth test function with its derivatives for the Itô aggregation check.
pub struct TestFunction<'a> {
    pub value: &'a (dyn Fn(f64, &[f64]) -> f64 + Sync),
    pub time_derivative: &'a (dyn Fn(f64, &[f64]) -> f64 + Sync),
    /// Writes ∇f (length d).
    pub gradient: &'a (dyn Fn(f64, &[f64], &mut [f64]) + Sync),
    /// Writes the Hessian (d×d row-major).
    pub hessian: &'a (dyn Fn(f64, &[f64], &mut [f64]) + Sync),
}

#[derive(Clone, Debug, Serialize)]
pub struct ItoReport {
    /// Cross-path mean of the per-step residual, one entry per step.
    pub step_mean: Vec<f64>,
    pub max_step_mean: f64,
    /// Cross-path mean of the residual summed over the horizon.
    pub horizon_mean: f64,
    /// Standard error of `horizon_mean`.
    pub horizon_se: f64,
    /// Largest per-step residual on any path.
    pub max_pathwise: f64,
    /// As `horizon_mean`, with the mean-zero second-order term
    /// ½(ϱΔW)ᵀ∇²f(ϱΔW) − ½tr(ϱϱᵀ∇²f)Δt moved into the martingale part. Only the
    /// drift truncation remains, so the O(Δt) order shows at moderate M.
    pub horizon_mean_second_order: f64,
    pub horizon_se_second_order: f64,
    pub dt: f64,
}

/// Compare increments of Σ wᵢ f(t, φ_t(xᵢ)) with the Itô expansion
/// (∂_t f + ∇f·ρ + ½ tr(ϱϱᵀ∇²f))Δt + ∇f·ϱΔW at the left endpoint.
/// The model drift is scaled by `1 + drift_error`; nonzero only for fault injection.
pub fn verify_ito_aggregation(
    ensemble: &Ensemble,
    measure: &PopulationMeasure,
    f: &TestFunction,
    drift_error: f64,
) -> Result<ItoReport> {
    check_pairing(ensemble, measure)?;
    let model = ensemble.model();
    let grid = ensemble.grid();
    let (d, n, steps) = (model.dim(), model.noise_dim(), grid.steps());
    let dt = grid.dt();
    let w = measure.weights();
    let per_path: Vec<(Vec<f64>, f64, f64)> = (0..ensemble.paths())
        .into_par_iter()
        .filter(|&p| !ensemble.is_flagged(p))
        .map(|p| {
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * n];
            let mut g = vec![0.0; d];
            let mut hess = vec![0.0; d * d];
            let mut res = Vec::with_capacity(steps);
            let mut second = 0.0;
            let mut sdw = vec![0.0; d];
            for j in 0..steps {
                let t = grid.time(j);
                let t1 = grid.time(j + 1);
                let dw = ensemble.increment(p, j);
                let mut r = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    let x = ensemble.state(p, k, j);
                    let x1 = ensemble.state(p, k, j + 1);
                    model.drift_at(x, &mut b);
                    b.iter_mut().for_each(|v| *v *= 1.0 + drift_error);
                    model.diffusion_at(x, &mut s);
                    (f.gradient)(t, x, &mut g);
                    (f.hessian)(t, x, &mut hess);
                    let mut drift = (f.time_derivative)(t, x);
                    let mut mart = 0.0;
                    let mut quad = 0.0;
                    for a in 0..d {
                        sdw[a] = (0..n).map(|c| s[a * n + c] * dw[c]).sum();
                    }
                    for a in 0..d {
                        drift += g[a] * b[a];
                        mart += g[a] * sdw[a];
                        for e in 0..d {
                            let mut cov = 0.0;
                            for c in 0..n {
                                cov += s[a * n + c] * s[e * n + c];
                            }
                            drift += 0.5 * cov * hess[a * d + e];
                            quad += 0.5 * hess[a * d + e] * (sdw[a] * sdw[e] - cov * dt);
                        }
                    }
                    let lhs = (f.value)(t1, x1) - (f.value)(t, x);
                    let base = lhs - drift * dt - mart;
                    r += wk * base;
                    second += wk * (base - quad);
                }
                res.push(r);
            }
            let total = res.iter().sum();
            (res, total, second)
        })
        .collect();
    let m = per_path.len() as f64;
    if per_path.is_empty() {
        return Err(Error::Estimation("no unflagged paths".into()));
    }
    let step_mean: Vec<f64> = (0..steps)
        .map(|j| per_path.iter().map(|(r, _, _)| r[j]).sum::<f64>() / m)
        .collect();
    let mean_se = |v: &dyn Fn(&(Vec<f64>, f64, f64)) -> f64| {
        let mean = per_path.iter().map(v).sum::<f64>() / m;
        let var = per_path.iter().map(|x| (v(x) - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
        (mean, (var / m).sqrt())
    };
    let (horizon_mean, horizon_se) = mean_se(&|x| x.1);
    let (second_mean, second_se) = mean_se(&|x| x.2);
    let max_pathwise = per_path
        .iter()
        .flat_map(|(r, _, _)| r.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    Ok(ItoReport {
        max_step_mean: step_mean.iter().fold(0.0f64, |a, v| a.max(v.abs())),
        step_mean,
        horizon_mean,
        horizon_se,
        max_pathwise,
        horizon_mean_second_order: second_mean,
        horizon_se_second_order: second_se,
        dt,
    })
}
