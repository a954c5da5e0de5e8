//! Optimal consumption and portfolio policies for fixed, rolled and
//! continuously updated impatience.
//!
//! All per-type quantities are type-wise totals (already mass-weighted by the
//! initial net wealth profile); aggregating multiplies by the atom weights.

use rayon::prelude::*;

use crate::flow::Ensemble;
use crate::population::PopulationMeasure;
use crate::series::{PathSeries, TypeSeries};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    indices: Vec<usize>,
}

impl Partition {
    /// Grid indices 0 = s₀ < … < s_m = N.
    pub fn new(indices: Vec<usize>, steps: usize) -> Result<Self> {
        if indices.first() != Some(&0) || indices.last() != Some(&steps) {
            return Err(Error::Policy(format!("partition must run from 0 to {steps}")));
        }
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Policy("partition indices must increase strictly".into()));
        }
        Ok(Self { indices })
    }

    /// Every `stride` steps; `stride` must divide N.
    pub fn uniform(steps: usize, stride: usize) -> Result<Self> {
        if stride == 0 || steps % stride != 0 {
            return Err(Error::Policy(format!("stride {stride} does not divide {steps}")));
        }
        Self::new((0..=steps / stride).map(|i| i * stride).collect(), steps)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Inputs shared by all policy constructors.
#[derive(Clone, Copy)]
pub struct PolicyInputs<'a> {
    /// State price H per path and grid point.
    pub state_price: &'a PathSeries,
    /// Smooth-market multiplier κ per path and grid point.
    pub kappa: &'a PathSeries,
    /// Initial net wealth y(x) per type.
    pub initial_wealth: &'a [f64],
    /// Endowment value L (zero when absent).
    pub liability: Option<&'a TypeSeries>,
    /// Hedging portfolio ϖ (zero when absent).
    pub hedge: Option<&'a TypeSeries>,
}

#[derive(Clone, Debug)]
pub struct PolicyPath {
    /// ξ − L.
    pub net_wealth: TypeSeries,
    pub consumption: TypeSeries,
    pub portfolio: TypeSeries,
    pub liability: TypeSeries,
    pub hedge: TypeSeries,
    pub active: Vec<bool>,
}

/// Cross-sectional totals of a policy.
#[derive(Clone, Debug)]
pub struct AggregatedPolicy {
    /// ξ^μ.
    pub wealth: PathSeries,
    /// c^μ.
    pub consumption: PathSeries,
    /// π^μ.
    pub portfolio: PathSeries,
}

impl PolicyPath {
    pub fn wealth(&self, p: usize, k: usize, j: usize) -> f64 {
        self.net_wealth.get(p, k, j) + self.liability.get(p, k, j)
    }

    pub fn aggregate(&self, measure: &PopulationMeasure) -> Result<AggregatedPolicy> {
        let w = measure.weights();
        if w.len() != self.net_wealth.types() {
            return Err(Error::Policy("measure does not match policy types".into()));
        }
        let paths = self.net_wealth.paths();
        let len = self.net_wealth.len();
        let sum = |f: &(dyn Fn(usize, usize, usize) -> f64 + Sync)| {
            let rows = (0..paths)
                .into_par_iter()
                .map(|p| {
                    (0..len)
                        .map(|j| w.iter().enumerate().map(|(k, wk)| wk * f(p, k, j)).sum())
                        .collect()
                })
                .collect();
            PathSeries::from_rows(rows, self.active.clone())
        };
        Ok(AggregatedPolicy {
            wealth: sum(&|p, k, j| self.wealth(p, k, j)),
            consumption: sum(&|p, k, j| self.consumption.get(p, k, j)),
            portfolio: sum(&|p, k, j| self.portfolio.get(p, k, j)),
        })
    }
}

fn check_inputs(ensemble: &Ensemble, inputs: &PolicyInputs) -> Result<()> {
    let (m, k, len) = (ensemble.paths(), ensemble.types(), ensemble.grid().steps() + 1);
    let h = inputs.state_price;
    if h.paths() != m || h.len() != len || inputs.kappa.paths() != m || inputs.kappa.len() != len {
        return Err(Error::Policy("H or κ path has the wrong shape".into()));
    }
    if inputs.initial_wealth.len() != k {
        return Err(Error::Policy("initial wealth must have one entry per type".into()));
    }
    for s in [inputs.liability, inputs.hedge].into_iter().flatten() {
        if s.paths() != m || s.types() != k || s.len() != len {
            return Err(Error::Policy("L or ϖ path has the wrong shape".into()));
        }
    }
    for p in 0..m {
        if !ensemble.is_flagged(p) && h.row(p).iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Policy(format!("non-positive state price on path {p}")));
        }
    }
    Ok(())
}

/// Assemble a policy given, per path, type and step, the discount factor
/// (ξ−L)/y and the consumption fraction.
fn assemble(
    ensemble: &Ensemble,
    inputs: &PolicyInputs,
    kernel: &(dyn Fn(usize, usize, usize) -> (f64, f64) + Sync),
) -> PolicyPath {
    let (m, kn, len) = (ensemble.paths(), ensemble.types(), ensemble.grid().steps() + 1);
    let zero = TypeSeries::filled(m, kn, len, 0.0);
    let liability = inputs.liability.cloned().unwrap_or_else(|| zero.clone());
    let hedge = inputs.hedge.cloned().unwrap_or(zero);
    let blocks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|p| {
            let mut net = Vec::with_capacity(kn * len);
            let mut cons = Vec::with_capacity(kn * len);
            let mut port = Vec::with_capacity(kn * len);
            for k in 0..kn {
                let y = inputs.initial_wealth[k];
                for j in 0..len {
                    let (factor, gamma) = kernel(p, k, j);
                    let v = y * factor;
                    net.push(v);
                    cons.push(gamma * v);
                    port.push(v * inputs.kappa.get(p, j) - hedge.get(p, k, j));
                }
            }
            (net, cons, port)
        })
        .collect();
    let mut nets = Vec::with_capacity(m);
    let mut conss = Vec::with_capacity(m);
    let mut ports = Vec::with_capacity(m);
    for (a, b, c) in blocks {
        nets.push(a);
        conss.push(b);
        ports.push(c);
    }
    PolicyPath {
        net_wealth: TypeSeries::from_blocks(nets, kn, len),
        consumption: TypeSeries::from_blocks(conss, kn, len),
        portfolio: TypeSeries::from_blocks(ports, kn, len),
        liability,
        hedge,
        active: ensemble.active_mask(),
    }
}

fn impatience(ensemble: &Ensemble) -> Result<&(dyn Fn(&[f64]) -> f64 + Send + Sync)> {
    ensemble
        .model()
        .impatience()
        .map(|g| g.as_ref())
        .ok_or_else(|| Error::Policy("model has no impatience field".into()))
}

/// e^{−(t_j − t_s)g} · H_s/H_j: one frozen-impatience stretch.
#[inline]
fn stretch(ensemble: &Ensemble, h: &PathSeries, p: usize, s: usize, j: usize, g: f64) -> f64 {
    let grid = ensemble.grid();
    (-(grid.elapsed(j) - grid.elapsed(s)) * g).exp() * (h.get(p, s) / h.get(p, j))
}

/// γ frozen at each type's initial point for the whole horizon.
pub fn optimal_policy_fixed_gamma(ensemble: &Ensemble, inputs: &PolicyInputs) -> Result<PolicyPath> {
    check_inputs(ensemble, inputs)?;
    let gamma = impatience(ensemble)?;
    let h = inputs.state_price;
    Ok(assemble(ensemble, inputs, &|p, k, j| {
        let g = gamma(ensemble.state(p, k, 0));
        (stretch(ensemble, h, p, 0, j, g), g)
    }))
}

/// γ frozen at the left endpoint of each partition interval.
pub fn rolling_policy(ensemble: &Ensemble, partition: &Partition, inputs: &PolicyInputs) -> Result<PolicyPath> {
    check_inputs(ensemble, inputs)?;
    let steps = ensemble.grid().steps();
    if partition.indices().last() != Some(&steps) {
        return Err(Error::Policy("partition does not match the grid".into()));
    }
    let gamma = impatience(ensemble)?;
    let h = inputs.state_price;
    let idx = partition.indices();
    let kn = ensemble.types();
    let len = steps + 1;
    // Precompute per path and type the factor accumulated up to each s_i.
    let tables: Vec<Vec<(f64, f64)>> = (0..ensemble.paths())
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(kn * len);
            for k in 0..kn {
                let mut acc = 1.0;
                let mut seg = 0;
                let mut g = gamma(ensemble.state(p, k, 0));
                for j in 0..len {
                    while seg + 1 < idx.len() - 1 && j >= idx[seg + 1] {
                        acc *= stretch(ensemble, h, p, idx[seg], idx[seg + 1], g);
                        seg += 1;
                        g = gamma(ensemble.state(p, k, idx[seg]));
                    }
                    out.push((acc * stretch(ensemble, h, p, idx[seg], j, g), g));
                }
            }
            out
        })
        .collect();
    Ok(assemble(ensemble, inputs, &|p, k, j| tables[p][k * len + j]))
}

/// Continuous updating: e^{−∫γ(φ_u)du} with the trapezoid on the grid.
pub fn limit_policy(ensemble: &Ensemble, inputs: &PolicyInputs) -> Result<PolicyPath> {
    check_inputs(ensemble, inputs)?;
    let gamma = impatience(ensemble)?;
    let h = inputs.state_price;
    let integral = ensemble.cumulative_integral(gamma);
    Ok(assemble(ensemble, inputs, &|p, k, j| {
        let g = gamma(ensemble.state(p, k, j));
        ((-integral.get(p, k, j)).exp() * (h.get(p, 0) / h.get(p, j)), g)
    }))
}

/// sup over types and steps of |net wealth difference|, per path.
pub fn sup_gap(a: &PolicyPath, b: &PolicyPath) -> Vec<f64> {
    let n = &a.net_wealth;
    (0..n.paths())
        .filter(|&p| a.active[p])
        .map(|p| {
            let mut m = 0.0f64;
            for k in 0..n.types() {
                for j in 0..n.len() {
                    m = m.max((n.get(p, k, j) - b.net_wealth.get(p, k, j)).abs());
                }
            }
            m
        })
        .collect()
}
