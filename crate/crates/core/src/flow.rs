//! Brownian flow of agent types under common noise.
//!
//! Every path carries one increment stream shared by all types. States are
//! advanced with Euler–Maruyama; the population weight Λ is kept in log
//! space and accumulated with the trapezoidal rule on the growth rate h.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::series::TypeSeries;
use crate::{Error, Result};

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Writes into the output slice; used for drift (length d), diffusion
/// (d×n row-major) and gradients (length d).
pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type Predicate = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct FlowModel {
    dim: usize,
    noise_dim: usize,
    drift: VectorField,
    diffusion: VectorField,
    domain: Predicate,
    growth: ScalarField,
    impatience: Option<ScalarField>,
    impatience_gradient: Option<VectorField>,
    gamma_bounds: (f64, f64),
}

impl fmt::Debug for FlowModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FlowModel")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("has_impatience", &self.impatience.is_some())
            .field("gamma_bounds", &self.gamma_bounds)
            .finish()
    }
}

impl FlowModel {
    /// Zero drift, zero diffusion, whole-space domain, no growth.
    pub fn new(dim: usize, noise_dim: usize) -> Result<Self> {
        if dim == 0 || noise_dim == 0 {
            return Err(Error::Model("dimensions must be positive".into()));
        }
        Ok(Self {
            dim,
            noise_dim,
            drift: Arc::new(|_, out: &mut [f64]| out.fill(0.0)),
            diffusion: Arc::new(|_, out: &mut [f64]| out.fill(0.0)),
            domain: Arc::new(|_| true),
            growth: Arc::new(|_| 0.0),
            impatience: None,
            impatience_gradient: None,
            gamma_bounds: (f64::NAN, f64::NAN),
        })
    }

    /// dX = −θ(X − m)dt + S dW with constant S (d×n, row-major).
    pub fn ornstein_uhlenbeck(theta: f64, mean: Vec<f64>, vol: Vec<f64>, noise_dim: usize) -> Result<Self> {
        let dim = mean.len();
        if vol.len() != dim * noise_dim {
            return Err(Error::Model(format!(
                "volatility has {} entries, expected {}",
                vol.len(),
                dim * noise_dim
            )));
        }
        if !theta.is_finite() || mean.iter().chain(&vol).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("OU parameters".into()));
        }
        Ok(Self::new(dim, noise_dim)?
            .with_drift(move |x, out| {
                for (o, (xi, mi)) in out.iter_mut().zip(x.iter().zip(&mean)) {
                    *o = -theta * (xi - mi);
                }
            })
            .with_constant_diffusion(vol))
    }

    pub fn with_drift(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_diffusion(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn with_constant_diffusion(self, matrix: Vec<f64>) -> Self {
        self.with_diffusion(move |_, out| out.copy_from_slice(&matrix))
    }

    pub fn with_domain(mut self, f: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.domain = Arc::new(f);
        self
    }

    pub fn with_growth(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.growth = Arc::new(f);
        self
    }

    /// Impatience field with its declared bounds γ_lower ≤ γ ≤ γ_upper.
    pub fn with_impatience(
        mut self,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        lower: f64,
        upper: f64,
    ) -> Result<Self> {
        if !(lower > 0.0) || !(upper >= lower) || !upper.is_finite() {
            return Err(Error::Model(format!(
                "impatience bounds must satisfy 0 < lower <= upper, got [{lower}, {upper}]"
            )));
        }
        self.impatience = Some(Arc::new(f));
        self.gamma_bounds = (lower, upper);
        Ok(self)
    }

    pub fn with_impatience_gradient(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.impatience_gradient = Some(Arc::new(f));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn drift_at(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn diffusion_at(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        (self.domain)(x)
    }

    pub fn growth_at(&self, x: &[f64]) -> f64 {
        (self.growth)(x)
    }

    pub fn impatience(&self) -> Option<&ScalarField> {
        self.impatience.as_ref()
    }

    pub fn impatience_gradient(&self) -> Option<&VectorField> {
        self.impatience_gradient.as_ref()
    }

    /// (γ_lower, γ_upper); NaN when no impatience field is set.
    pub fn gamma_bounds(&self) -> (f64, f64) {
        self.gamma_bounds
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Model(format!("type point has dimension {}, expected {}", x.len(), self.dim)));
        }
        if !self.in_domain(x) {
            return Err(Error::Model(format!("type point {x:?} is outside the domain")));
        }
        let mut b = vec![0.0; self.dim];
        self.drift_at(x, &mut b);
        let mut s = vec![0.0; self.dim * self.noise_dim];
        self.diffusion_at(x, &mut s);
        if b.iter().chain(&s).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("drift or diffusion at {x:?}")));
        }
        if !self.growth_at(x).is_finite() {
            return Err(Error::NonFinite(format!("growth rate at {x:?}")));
        }
        if let Some(g) = &self.impatience {
            let v = g(x);
            let (lo, hi) = self.gamma_bounds;
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::Model(format!("impatience {v} at {x:?} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Uniform time grid t_j = t0 + jΔt, j = 0..=N.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Grid("steps must be positive".into()));
        }
        if !(t0.is_finite() && horizon.is_finite() && horizon > t0) {
            return Err(Error::Grid(format!("need finite t0 < T, got [{t0}, {horizon}]")));
        }
        Ok(Self {
            t0,
            dt: (horizon - t0) / steps as f64,
            steps,
        })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    /// Elapsed time since t0.
    pub fn elapsed(&self, j: usize) -> f64 {
        j as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.steps)
    }

    /// Tail grid starting at index `s`, with the same spacing.
    pub fn restarted(&self, s: usize) -> Result<Self> {
        if s >= self.steps {
            return Err(Error::Grid(format!("restart index {s} must be below N = {}", self.steps)));
        }
        Ok(Self {
            t0: self.time(s),
            dt: self.dt,
            steps: self.steps - s,
        })
    }

    fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::Grid(format!("factor {factor} does not divide N = {}", self.steps)));
        }
        Ok(Self {
            t0: self.t0,
            dt: self.dt * factor as f64,
            steps: self.steps / factor,
        })
    }
}

/// Simulated flow: increments, trajectories and log-weights for every path.
#[derive(Clone, Debug)]
pub struct Ensemble {
    model: FlowModel,
    grid: TimeGrid,
    seed: u64,
    paths: usize,
    types: usize,
    increments: Vec<f64>,
    states: Vec<f64>,
    log_weights: Vec<f64>,
    explosion: Vec<Option<usize>>,
}

struct PathBlock {
    states: Vec<f64>,
    log_weights: Vec<f64>,
    explosion: Option<usize>,
}

/// Euler–Maruyama recursion for all types of one path.
fn propagate(model: &FlowModel, grid: &TimeGrid, init: &[f64], incr: &[f64], frozen: bool) -> PathBlock {
    let d = model.dim;
    let n = model.noise_dim;
    let steps = grid.steps;
    let len = steps + 1;
    let types = init.len() / d;
    let dt = grid.dt;
    let mut states = vec![0.0; types * len * d];
    let mut log_weights = vec![0.0; types * len];
    for k in 0..types {
        states[k * len * d..k * len * d + d].copy_from_slice(&init[k * d..(k + 1) * d]);
    }
    let mut h_prev: Vec<f64> = (0..types).map(|k| model.growth_at(&init[k * d..(k + 1) * d])).collect();
    let mut h_next = vec![0.0; types];
    let mut explosion = if frozen { Some(0) } else { None };
    let mut cur = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * n];
    for j in 0..steps {
        if explosion.is_none() {
            let dw = &incr[j * n..(j + 1) * n];
            let mut bad = false;
            for k in 0..types {
                let o = (k * len + j) * d;
                cur.copy_from_slice(&states[o..o + d]);
                model.drift_at(&cur, &mut b);
                model.diffusion_at(&cur, &mut s);
                for a in 0..d {
                    let mut v = cur[a] + b[a] * dt;
                    for c in 0..n {
                        v += s[a * n + c] * dw[c];
                    }
                    next[a] = v;
                }
                let h = if next.iter().all(|v| v.is_finite()) && model.in_domain(&next) {
                    model.growth_at(&next)
                } else {
                    f64::NAN
                };
                if !h.is_finite() {
                    bad = true;
                    break;
                }
                h_next[k] = h;
                states[o + d..o + 2 * d].copy_from_slice(&next);
                log_weights[k * len + j + 1] = log_weights[k * len + j] + 0.5 * dt * (h_prev[k] + h);
            }
            if bad {
                explosion = Some(j + 1);
            } else {
                std::mem::swap(&mut h_prev, &mut h_next);
                continue;
            }
        }
        // Frozen path: hold the last accepted state and weight.
        for k in 0..types {
            let o = (k * len + j) * d;
            states.copy_within(o..o + d, o + d);
            log_weights[k * len + j + 1] = log_weights[k * len + j];
        }
    }
    PathBlock {
        states,
        log_weights,
        explosion,
    }
}

/// Draw the increment stream of one path: N×n normals scaled by √Δt.
pub(crate) fn path_increments(seed: u64, stream: u64, steps: usize, n: usize, dt: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let sq = dt.sqrt();
    (0..steps * n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sq
        })
        .collect()
}

/// Simulate `paths` copies of the flow started at `types`.
pub fn simulate_flow(model: &FlowModel, grid: TimeGrid, types: &[Vec<f64>], paths: usize, seed: u64) -> Result<Ensemble> {
    if types.is_empty() {
        return Err(Error::Model("at least one type is required".into()));
    }
    if paths == 0 {
        return Err(Error::Model("at least one path is required".into()));
    }
    for x in types {
        model.check_point(x)?;
    }
    let n = model.noise_dim;
    let init: Vec<f64> = types.iter().flatten().copied().collect();
    let increments: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| path_increments(seed, p as u64, grid.steps, n, grid.dt))
        .collect();
    let inits = vec![init; paths];
    Ensemble::assemble(model.clone(), grid, seed, types.len(), inits, increments, vec![false; paths])
}

impl Ensemble {
    fn assemble(
        model: FlowModel,
        grid: TimeGrid,
        seed: u64,
        types: usize,
        inits: Vec<Vec<f64>>,
        increments: Vec<Vec<f64>>,
        frozen: Vec<bool>,
    ) -> Result<Self> {
        let paths = inits.len();
        let blocks: Vec<PathBlock> = (0..paths)
            .into_par_iter()
            .map(|p| propagate(&model, &grid, &inits[p], &increments[p], frozen[p]))
            .collect();
        let flagged = blocks.iter().filter(|b| b.explosion.is_some()).count();
        if 2 * flagged > paths {
            return Err(Error::Explosion { flagged, paths });
        }
        let mut states = Vec::with_capacity(blocks.iter().map(|b| b.states.len()).sum());
        let mut log_weights = Vec::with_capacity(blocks.iter().map(|b| b.log_weights.len()).sum());
        let mut explosion = Vec::with_capacity(paths);
        for b in blocks {
            states.extend_from_slice(&b.states);
            log_weights.extend_from_slice(&b.log_weights);
            explosion.push(b.explosion);
        }
        Ok(Self {
            model,
            grid,
            seed,
            paths,
            types,
            increments: increments.concat(),
            states,
            log_weights,
            explosion,
        })
    }

    /// Flow restarted at grid index `s`: types become φ_{0,s}(x) on each path,
    /// weights reset to one, and the stored increments from `s` on are reused.
    pub fn restart(&self, s: usize) -> Result<Self> {
        let grid = if s == 0 { self.grid } else { self.grid.restarted(s)? };
        let n = self.model.noise_dim;
        let d = self.model.dim;
        let mut inits = Vec::with_capacity(self.paths);
        let mut incr = Vec::with_capacity(self.paths);
        let mut frozen = Vec::with_capacity(self.paths);
        for p in 0..self.paths {
            let mut x = Vec::with_capacity(self.types * d);
            for k in 0..self.types {
                x.extend_from_slice(self.state(p, k, s));
            }
            inits.push(x);
            incr.push(self.increments_of(p)[s * n..].to_vec());
            frozen.push(matches!(self.explosion[p], Some(e) if e <= s));
        }
        Self::assemble(self.model.clone(), grid, self.seed, self.types, inits, incr, frozen)
    }

    /// Same Brownian paths on a grid `factor` times coarser (increments summed).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsened(factor)?;
        let n = self.model.noise_dim;
        let d = self.model.dim;
        let mut inits = Vec::with_capacity(self.paths);
        let mut incr = Vec::with_capacity(self.paths);
        for p in 0..self.paths {
            let mut x = Vec::with_capacity(self.types * d);
            for k in 0..self.types {
                x.extend_from_slice(self.state(p, k, 0));
            }
            inits.push(x);
            let fine = self.increments_of(p);
            let mut coarse = vec![0.0; grid.steps * n];
            for j in 0..grid.steps {
                for i in 0..factor {
                    for c in 0..n {
                        coarse[j * n + c] += fine[(j * factor + i) * n + c];
                    }
                }
            }
            incr.push(coarse);
        }
        Self::assemble(self.model.clone(), grid, self.seed, self.types, inits, incr, vec![false; self.paths])
    }

    /// Simulate from explicit per-path initial states and increments.
    pub(crate) fn from_increments(
        model: &FlowModel,
        grid: TimeGrid,
        seed: u64,
        inits: Vec<Vec<f64>>,
        increments: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let types = inits.first().map_or(0, |x| x.len() / model.dim);
        let paths = inits.len();
        Self::assemble(model.clone(), grid, seed, types, inits, increments, vec![false; paths])
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn types(&self) -> usize {
        self.types
    }

    pub fn dim(&self) -> usize {
        self.model.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.model.noise_dim
    }

    #[inline]
    pub fn state(&self, p: usize, k: usize, j: usize) -> &[f64] {
        let d = self.model.dim;
        let o = ((p * self.types + k) * (self.grid.steps + 1) + j) * d;
        &self.states[o..o + d]
    }

    #[inline]
    pub fn log_weight(&self, p: usize, k: usize, j: usize) -> f64 {
        self.log_weights[(p * self.types + k) * (self.grid.steps + 1) + j]
    }

    pub fn weight(&self, p: usize, k: usize, j: usize) -> f64 {
        self.log_weight(p, k, j).exp()
    }

    /// ΔW over [t_j, t_{j+1}] on path p.
    #[inline]
    pub fn increment(&self, p: usize, j: usize) -> &[f64] {
        let n = self.model.noise_dim;
        let o = (p * self.grid.steps + j) * n;
        &self.increments[o..o + n]
    }

    pub fn increments_of(&self, p: usize) -> &[f64] {
        let n = self.model.noise_dim;
        let len = self.grid.steps * n;
        &self.increments[p * len..(p + 1) * len]
    }

    /// Grid index at which the path froze, if it did.
    pub fn explosion_step(&self, p: usize) -> Option<usize> {
        self.explosion[p]
    }

    pub fn is_flagged(&self, p: usize) -> bool {
        self.explosion[p].is_some()
    }

    pub fn active_mask(&self) -> Vec<bool> {
        self.explosion.iter().map(Option::is_none).collect()
    }

    pub fn flagged_fraction(&self) -> f64 {
        self.explosion.iter().filter(|e| e.is_some()).count() as f64 / self.paths as f64
    }

    /// f(φ_t(x)) at every path, type and grid point.
    pub fn field_values(&self, f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> TypeSeries {
        let len = self.grid.steps + 1;
        let blocks = (0..self.paths)
            .into_par_iter()
            .map(|p| {
                let mut b = Vec::with_capacity(self.types * len);
                for k in 0..self.types {
                    for j in 0..len {
                        b.push(f(self.state(p, k, j)));
                    }
                }
                b
            })
            .collect();
        TypeSeries::from_blocks(blocks, self.types, len)
    }

    /// Trapezoidal ∫_{t0}^{t_j} f(φ_u(x)) du at every grid point.
    pub fn cumulative_integral(&self, f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> TypeSeries {
        let len = self.grid.steps + 1;
        let dt = self.grid.dt;
        let blocks = (0..self.paths)
            .into_par_iter()
            .map(|p| {
                let mut b = Vec::with_capacity(self.types * len);
                for k in 0..self.types {
                    let mut acc = 0.0;
                    let mut prev = f(self.state(p, k, 0));
                    b.push(0.0);
                    for j in 1..len {
                        let cur = f(self.state(p, k, j));
                        acc += 0.5 * dt * (prev + cur);
                        b.push(acc);
                        prev = cur;
                    }
                }
                b
            })
            .collect();
        TypeSeries::from_blocks(blocks, self.types, len)
    }
}


#[derive(Clone, Debug, serde::Serialize)]
pub struct CocycleReport {
    pub restarts: Vec<usize>,
    /// Grid points where the restarted state differs from the original tail.
    pub state_mismatches: usize,
    /// max |Λ_{0,s}Λ_{s,t} − Λ_{0,t}| / Λ_{0,t}.
    pub weight_residual: f64,
    pub weight_tolerance: f64,
    pub pass: bool,
}

/// Restart at each index in `restarts` and compare with the original tail:
/// φ_{0,t} = φ_{s,t}∘φ_{0,s} exactly and Λ_{0,t} = Λ_{0,s}Λ_{s,t} to 1e-12.
/// `weight_factor` multiplies the restarted weights (1 for none; other
/// values inject a fault).
pub fn verify_cocycle(ensemble: &Ensemble, restarts: &[usize], weight_factor: f64) -> Result<CocycleReport> {
    const WEIGHT_TOLERANCE: f64 = 1e-12;
    let steps = ensemble.grid.steps;
    let mut mismatches = 0;
    let mut residual = 0.0f64;
    for &s in restarts {
        if s > steps {
            return Err(Error::Grid(format!("restart index {s} beyond {steps} steps")));
        }
        let r = ensemble.restart(s)?;
        for p in (0..ensemble.paths).filter(|&p| !ensemble.is_flagged(p)) {
            for k in 0..ensemble.types {
                for i in 0..=steps - s {
                    if r.state(p, k, i) != ensemble.state(p, k, s + i) {
                        mismatches += 1;
                    }
                    let whole = ensemble.weight(p, k, s + i);
                    let composed = ensemble.weight(p, k, s) * r.weight(p, k, i) * weight_factor;
                    residual = residual.max((composed - whole).abs() / whole);
                }
            }
        }
    }
    Ok(CocycleReport {
        restarts: restarts.to_vec(),
        state_mismatches: mismatches,
        weight_residual: residual,
        weight_tolerance: WEIGHT_TOLERANCE,
        pass: mismatches == 0 && residual <= WEIGHT_TOLERANCE,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FellerVerdict {
    NonExplosive,
    Inconclusive,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct FellerReport {
    pub verdict: FellerVerdict,
    /// K at the farthest probed point on each side (lower, upper).
    pub k_lower: f64,
    pub k_upper: f64,
    /// Farthest probed point on each side.
    pub reach_lower: f64,
    pub reach_upper: f64,
    pub threshold: f64,
}

const FELLER_CELLS: usize = 4096;
const FELLER_DOUBLINGS: usize = 20;

/// Feller's test for a scalar diffusion dX = ρ(X)dt + ϱ(X)dW.
///
/// K(x) = ∫₀ˣ 2c⁻¹(z) ∫₀ᶻ c(y)/ϱ²(y) dy dz with c(x) = exp(2∫₀ˣ ρ/ϱ²).
/// The probe starts at `probe_range` and doubles on each side until K
/// passes 1/`tolerance` or the doubling budget is spent.
pub fn feller_nonexplosion_1d(
    drift: impl Fn(f64) -> f64,
    diffusion: impl Fn(f64) -> f64,
    probe_range: (f64, f64),
    tolerance: f64,
) -> Result<FellerReport> {
    let (lo, hi) = probe_range;
    if !(lo < 0.0 && hi > 0.0) {
        return Err(Error::Model(format!("probe range must straddle 0, got ({lo}, {hi})")));
    }
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(Error::Model(format!("tolerance must lie in (0, 1), got {tolerance}")));
    }
    let threshold = 1.0 / tolerance;
    let (k_upper, reach_upper) = feller_side(&drift, &diffusion, 1.0, hi, threshold)?;
    let (k_lower, reach_lower) = feller_side(&drift, &diffusion, -1.0, -lo, threshold)?;
    let verdict = if k_upper >= threshold && k_lower >= threshold {
        FellerVerdict::NonExplosive
    } else {
        FellerVerdict::Inconclusive
    };
    Ok(FellerReport {
        verdict,
        k_lower,
        k_upper,
        reach_lower: -reach_lower,
        reach_upper,
        threshold,
    })
}

/// March K outward along x = sign·z. Within a cell log c is taken as linear,
/// so the inner integral uses the exact exponential of that interpolant.
fn feller_side(
    drift: &impl Fn(f64) -> f64,
    diffusion: &impl Fn(f64) -> f64,
    sign: f64,
    start: f64,
    threshold: f64,
) -> Result<(f64, f64)> {
    let ratio = |z: f64| {
        let s = diffusion(sign * z);
        if s == 0.0 || !s.is_finite() {
            return Err(Error::Model(format!("diffusion vanishes or is non-finite at {}", sign * z)));
        }
        Ok((drift(sign * z) / (s * s), 1.0 / (s * s)))
    };
    let mut a = 0.0;
    let mut k = 0.0;
    let mut z = 0.0;
    let (mut r_prev, _) = ratio(0.0)?;
    let mut end = start;
    for _ in 0..=FELLER_DOUBLINGS {
        let h = (end - z) / FELLER_CELLS as f64;
        for _ in 0..FELLER_CELLS {
            let z1 = z + h;
            let (r1, _) = ratio(z1)?;
            let (_, inv_mid) = ratio(z + 0.5 * h)?;
            let delta = sign * h * (r_prev + r1);
            let phi = if delta.abs() < 1e-12 { 1.0 } else { -(-delta).exp_m1() / delta };
            let a1 = a * (-delta).exp() + h * phi * inv_mid;
            k += h * (a + a1);
            a = a1;
            z = z1;
            r_prev = r1;
            if !(k < threshold) {
                return Ok((k, z));
            }
        }
        end *= 2.0;
    }
    Ok((k, z))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou() -> FlowModel {
        FlowModel::ornstein_uhlenbeck(1.0, vec![0.0], vec![1.0], 1).unwrap()
    }

    #[test]
    fn zero_noise_flow_is_constant_with_exponential_weight() {
        let m = FlowModel::new(2, 1).unwrap().with_growth(|_| 0.03);
        let g = TimeGrid::new(0.0, 2.0, 100).unwrap();
        let e = simulate_flow(&m, g, &[vec![0.5, -1.0]], 3, 7).unwrap();
        for p in 0..3 {
            assert_eq!(e.state(p, 0, 100), &[0.5, -1.0]);
            let want = (0.03f64 * 2.0).exp();
            assert!((e.weight(p, 0, 100) - want).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_growth_keeps_unit_weights() {
        let e = simulate_flow(&ou(), TimeGrid::new(0.0, 1.0, 20).unwrap(), &[vec![1.0]], 5, 1).unwrap();
        for p in 0..5 {
            for j in 0..=20 {
                assert_eq!(e.weight(p, 0, j), 1.0);
            }
        }
    }

    #[test]
    fn ou_mean_matches_closed_form() {
        let m = ou();
        let g = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let x0 = 1.5;
        let e = simulate_flow(&m, g, &[vec![x0]], 10_000, 11).unwrap();
        let xs: Vec<f64> = (0..e.paths()).map(|p| e.state(p, 0, 200)[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let se = (var / xs.len() as f64).sqrt();
        let want = x0 * (-1.0f64).exp();
        assert!((mean - want).abs() < 3.0 * se + 2e-3, "mean {mean} want {want} se {se}");
    }

    #[test]
    fn types_share_noise() {
        let m = FlowModel::new(1, 1).unwrap().with_constant_diffusion(vec![1.0]);
        let e = simulate_flow(&m, TimeGrid::new(0.0, 1.0, 10).unwrap(), &[vec![0.0], vec![3.0]], 4, 2).unwrap();
        for p in 0..4 {
            for j in 0..=10 {
                assert!((e.state(p, 1, j)[0] - e.state(p, 0, j)[0] - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn restart_identity_and_tail_composition() {
        let m = ou().with_growth(|x| 0.01 * x[0].tanh());
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let e = simulate_flow(&m, g, &[vec![1.0], vec![-0.5]], 8, 3).unwrap();
        let r0 = e.restart(0).unwrap();
        assert_eq!(r0.states, e.states);
        assert_eq!(r0.log_weights, e.log_weights);
        let r = e.restart(20).unwrap();
        for p in 0..8 {
            for k in 0..2 {
                for j in 20..=50 {
                    assert_eq!(r.state(p, k, j - 20), e.state(p, k, j));
                }
            }
        }
    }

    #[test]
    fn deterministic_restart_matches_tail() {
        let m = FlowModel::new(1, 1).unwrap().with_drift(|x, o| o[0] = -0.3 * x[0] + 0.1);
        let e = simulate_flow(&m, TimeGrid::new(0.0, 4.0, 40).unwrap(), &[vec![2.0]], 1, 0).unwrap();
        let r = e.restart(20).unwrap();
        for j in 20..=40 {
            assert_eq!(r.state(0, 0, j - 20), e.state(0, 0, j));
        }
    }

    #[test]
    fn leaving_domain_freezes_and_flags() {
        let m = FlowModel::new(1, 1)
            .unwrap()
            .with_constant_diffusion(vec![1.0])
            .with_domain(|x| x[0] > -0.5);
        let e = simulate_flow(&m, TimeGrid::new(0.0, 1.0, 100).unwrap(), &[vec![2.0]], 50, 5).unwrap();
        for p in 0..50 {
            if let Some(s) = e.explosion_step(p) {
                assert!(s >= 1);
                assert_eq!(e.state(p, 0, 100), e.state(p, 0, s - 1));
            }
        }
        assert!(e.flagged_fraction() > 0.0);
    }

    #[test]
    fn majority_explosion_is_rejected() {
        let m = FlowModel::new(1, 1).unwrap().with_drift(|x, o| o[0] = x[0] * x[0] * x[0]);
        let r = simulate_flow(&m, TimeGrid::new(0.0, 1.0, 10).unwrap(), &[vec![10.0]], 10, 0);
        assert!(matches!(r, Err(Error::Explosion { .. })));
    }

    #[test]
    fn non_finite_initial_coefficients_rejected() {
        let m = FlowModel::new(1, 1).unwrap().with_drift(|x, o| o[0] = 1.0 / x[0]);
        let r = simulate_flow(&m, TimeGrid::new(0.0, 1.0, 10).unwrap(), &[vec![0.0]], 1, 0);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn coarsen_sums_increments() {
        let e = simulate_flow(&ou(), TimeGrid::new(0.0, 1.0, 8).unwrap(), &[vec![0.0]], 2, 9).unwrap();
        let c = e.coarsen(4).unwrap();
        assert_eq!(c.grid().steps(), 2);
        let s: f64 = (0..4).map(|j| e.increment(1, j)[0]).sum();
        assert!((c.increment(1, 0)[0] - s).abs() < 1e-15);
    }

    #[test]
    fn feller_brownian_motion() {
        let r = feller_nonexplosion_1d(|_| 0.0, |_| 1.0, (-10.0, 10.0), 1e-6).unwrap();
        assert_eq!(r.verdict, FellerVerdict::NonExplosive);
        // K(x) = x² exactly under the cell rule for constant coefficients.
        assert!((r.k_upper - r.reach_upper * r.reach_upper).abs() / r.k_upper < 1e-9);
    }

    #[test]
    fn feller_ou_and_cubic() {
        let r = feller_nonexplosion_1d(|x| -x, |_| 1.0, (-5.0, 5.0), 1e-6).unwrap();
        assert_eq!(r.verdict, FellerVerdict::NonExplosive);
        let r = feller_nonexplosion_1d(|x| x * x * x, |_| 1.0, (-2.0, 2.0), 1e-6).unwrap();
        assert_eq!(r.verdict, FellerVerdict::Inconclusive);
        assert!(r.k_upper < 10.0);
    }

    #[test]
    fn feller_rejects_vanishing_diffusion() {
        assert!(feller_nonexplosion_1d(|_| 0.0, |x| x, (-1.0, 1.0), 1e-6).is_err());
    }
}
