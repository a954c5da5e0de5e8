//! Nested Monte Carlo for endowment values without a closed form:
//! L_t(x) = −E_t[∫_t^{T*} H_s Q_s(x) ds]/H_t, estimated by restarting the
//! flow from each outer state with antithetic inner increment pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flow::{path_increments, Ensemble, TimeGrid};
use crate::{Error, Result};

use super::EquilibriumInputs;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NestedMcOptions {
    pub enabled: bool,
    /// Inner paths per outer state (even; antithetic pairs).
    pub inner_paths: usize,
    pub inner_dt: f64,
    /// Outer grid points between inner evaluations; values in between are
    /// interpolated through the ratio L/P^W.
    pub eval_stride: usize,
    pub outer_cap: usize,
    pub inner_cap: usize,
    /// Ceiling on outer × inner.
    pub ceiling: usize,
}

impl Default for NestedMcOptions {
    fn default() -> Self {
        Self {
            enabled: false,
            inner_paths: 100,
            inner_dt: 0.5,
            eval_stride: 20,
            outer_cap: 2000,
            inner_cap: 500,
            ceiling: 1_000_000,
        }
    }
}

impl NestedMcOptions {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.outer_cap > 2000 || self.inner_cap > 500 {
            return Err(Error::Scenario("nested caps may not exceed 2000 outer / 500 inner paths".into()));
        }
        if self.inner_paths < 2 || self.inner_paths % 2 != 0 || self.inner_paths > self.inner_cap {
            return Err(Error::Scenario(format!(
                "inner paths must be even and in [2, {}], got {}",
                self.inner_cap, self.inner_paths
            )));
        }
        if !(self.inner_dt > 0.0) || self.eval_stride == 0 {
            return Err(Error::Scenario("inner dt and evaluation stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NestedReport {
    pub estimator: String,
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub inner_dt: f64,
    pub inner_steps: usize,
    pub inner_horizon: f64,
    pub eval_steps: Vec<usize>,
    /// Largest standard error of an L estimate relative to |L|.
    pub max_relative_se: f64,
}

/// Outer-path data needed to continue η, ℓ and I from an outer state.
pub(crate) struct OuterPath<'a> {
    pub g_int: &'a [f64],
    pub eta: &'a [f64],
    pub ell: &'a [f64],
    pub inc: &'a [f64],
}

pub(crate) fn nested_liability(
    ensemble: &Ensemble,
    inputs: &EquilibriumInputs,
    share: &(dyn Fn(&[f64]) -> f64 + Sync),
    outer: &[OuterPath],
    opts: &NestedMcOptions,
    tolerance: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, NestedReport)> {
    if !opts.enabled {
        return Err(Error::Market("tabulated endowments need nested Monte Carlo enabled".into()));
    }
    let m = ensemble.paths();
    if m > opts.outer_cap {
        return Err(Error::Market(format!("{m} outer paths exceed the cap {}", opts.outer_cap)));
    }
    if m * opts.inner_paths > opts.ceiling {
        return Err(Error::Market(format!(
            "nested work {m} × {} exceeds the ceiling {}",
            opts.inner_paths, opts.ceiling
        )));
    }
    let model = ensemble.model();
    let gamma = model.impatience().expect("validated");
    let (gamma_lower, _) = model.gamma_bounds();
    let grid = ensemble.grid();
    let len = grid.steps() + 1;
    let kn = ensemble.types();
    let d = model.dim();
    let n = model.noise_dim();
    let horizon = (1.0 / tolerance).ln() / gamma_lower;
    let inner_steps = (horizon / opts.inner_dt).ceil() as usize;
    let mut eval: Vec<usize> = (0..len).step_by(opts.eval_stride).collect();
    if *eval.last().expect("non-empty") != len - 1 {
        eval.push(len - 1);
    }
    let w = inputs.measure.weights();
    let y = &inputs.initial_wealth;
    let pairs = opts.inner_paths / 2;
    let inner_seed = seed ^ 0x6a09_e667_f3bc_c908;
    let jobs: Vec<(usize, usize)> = (0..m)
        .filter(|&p| !ensemble.is_flagged(p))
        .flat_map(|p| eval.iter().enumerate().map(move |(e, _)| (p, e)))
        .collect();
    let results: Vec<((usize, usize), Vec<f64>, f64)> = jobs
        .into_par_iter()
        .map(|(p, e)| {
            let j = eval[e];
            let o = &outer[p];
            let t = grid.time(j);
            let g = TimeGrid::new(t, t + inner_steps as f64 * opts.inner_dt, inner_steps)?;
            let mut init = Vec::with_capacity(kn * d);
            for k in 0..kn {
                init.extend_from_slice(ensemble.state(p, k, j));
            }
            let stream0 = ((p * len + j) * pairs) as u64;
            let mut incs = Vec::with_capacity(2 * pairs);
            for i in 0..pairs {
                let z = path_increments(inner_seed, stream0 + i as u64, inner_steps, n, opts.inner_dt);
                incs.push(z.iter().map(|v| -v).collect());
                incs.push(z);
            }
            let inner = Ensemble::from_increments(model, g, inner_seed, vec![init; 2 * pairs], incs)?;
            let h_t = o.ell[j] / o.inc[j];
            let dt = opts.inner_dt;
            let mut sums = vec![0.0; kn];
            let mut sq = vec![0.0; kn];
            let mut pair_val = vec![0.0; kn];
            for q in 0..2 * pairs {
                let mut acc = vec![0.0; kn];
                let mut prev = vec![0.0; kn];
                let mut gi = vec![0.0; kn];
                let mut gprev: Vec<f64> = (0..kn).map(|k| gamma(inner.state(q, k, 0))).collect();
                for s in 0..=inner_steps {
                    let mut ell = 0.0;
                    let mut inc = 0.0;
                    let mut q_types = vec![0.0; kn];
                    for k in 0..kn {
                        let x = inner.state(q, k, s);
                        let gv = gamma(x);
                        if s > 0 {
                            gi[k] += 0.5 * dt * (gprev[k] + gv);
                        }
                        gprev[k] = gv;
                        ell += w[k] * y[k] * (-(o.g_int[k * len + j] + gi[k])).exp() * gv;
                        let lam = (ensemble.log_weight(p, k, j) + inner.log_weight(q, k, s)).exp();
                        let ik = lam * inputs.income.value_at(x);
                        inc += w[k] * ik;
                        q_types[k] = share(x) * ik;
                    }
                    let h = ell / inc;
                    for k in 0..kn {
                        let v = h * q_types[k];
                        if s > 0 {
                            acc[k] += 0.5 * dt * (prev[k] + v);
                        }
                        prev[k] = v;
                    }
                }
                for k in 0..kn {
                    if q % 2 == 0 {
                        pair_val[k] = acc[k];
                    } else {
                        let a = 0.5 * (pair_val[k] + acc[k]);
                        sums[k] += a;
                        sq[k] += a * a;
                    }
                }
            }
            let np = pairs as f64;
            let mut rel = 0.0f64;
            let vals: Vec<f64> = (0..kn)
                .map(|k| {
                    let mean = sums[k] / np;
                    let var = ((sq[k] / np - mean * mean) * np / (np - 1.0).max(1.0)).max(0.0);
                    if mean > 0.0 {
                        rel = rel.max((var / np).sqrt() / mean);
                    }
                    0.0 - mean / h_t
                })
                .collect();
            Ok(((p, e), vals, rel))
        })
        .collect::<Result<_>>()?;
    let mut table = vec![vec![vec![0.0; kn]; eval.len()]; m];
    let mut max_rel = 0.0f64;
    for ((p, e), v, r) in results {
        table[p][e] = v;
        max_rel = max_rel.max(r);
    }
    let liab = (0..m)
        .map(|p| {
            let o = &outer[p];
            let pw = |j: usize| o.eta[j] * o.inc[j] / o.ell[j];
            let mut b = vec![0.0; kn * len];
            for k in 0..kn {
                for e in 0..eval.len() - 1 {
                    let (j0, j1) = (eval[e], eval[e + 1]);
                    let r0 = table[p][e][k] / pw(j0);
                    let r1 = table[p][e + 1][k] / pw(j1);
                    for j in j0..=j1 {
                        let tau = (j - j0) as f64 / (j1 - j0) as f64;
                        b[k * len + j] = (r0 + tau * (r1 - r0)) * pw(j);
                    }
                }
                if eval.len() == 1 {
                    b[k * len] = table[p][0][k];
                }
            }
            b
        })
        .collect();
    Ok((
        liab,
        NestedReport {
            estimator: "restart-ensemble nested Monte Carlo, antithetic inner pairs, trapezoid in time".into(),
            outer_paths: m,
            inner_paths: opts.inner_paths,
            inner_dt: opts.inner_dt,
            inner_steps,
            inner_horizon: horizon,
            eval_steps: eval,
            max_relative_se: max_rel,
        },
    ))
}
