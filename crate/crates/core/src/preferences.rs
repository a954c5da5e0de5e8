//! Isoelastic consistent preferences: U₁ = c e^{−βt} y^α for consumption and
//! U₂ = d e^{−βt} y^α for terminal wealth, with d tied to (c, α, β) so that
//! the optimal consumption rate is the constant fraction γ = β/(1−α).

use crate::quad::simpson;
use crate::{Error, Result};

const CHI_PANELS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsoelasticPreference {
    c: f64,
    alpha: f64,
    beta: f64,
    d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    /// U₁, utility of consumption.
    Running,
    /// U₂, utility of terminal wealth.
    Terminal,
}

impl IsoelasticPreference {
    pub fn new(c: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Preference(format!("scale c must be positive, got {c}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Preference(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Preference(format!("beta must lie in (0, 1), got {beta}")));
        }
        Ok(Self {
            c,
            alpha,
            beta,
            d: c * ((1.0 - alpha) / beta).powf(1.0 - alpha),
        })
    }

    /// Same parameters with the terminal scale replaced; breaks consistency.
    pub fn with_terminal_scale(mut self, d: f64) -> Self {
        self.d = d;
        self
    }

    /// No range checks; for the boundary cases β = 0 used in examples.
    pub fn unchecked(c: f64, alpha: f64, beta: f64) -> Self {
        let d = if beta > 0.0 {
            c * ((1.0 - alpha) / beta).powf(1.0 - alpha)
        } else {
            f64::INFINITY
        };
        Self { c, alpha, beta, d }
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    /// Effective impatience β/(1−α).
    pub fn gamma(&self) -> f64 {
        self.beta / (1.0 - self.alpha)
    }

    fn scale(&self, which: Component) -> f64 {
        match which {
            Component::Running => self.c,
            Component::Terminal => self.d,
        }
    }

    pub fn utility(&self, which: Component, t: f64, y: f64) -> f64 {
        self.scale(which) * (-self.beta * t).exp() * y.powf(self.alpha)
    }

    pub fn marginal(&self, which: Component, t: f64, y: f64) -> f64 {
        self.scale(which) * self.alpha * (-self.beta * t).exp() * y.powf(self.alpha - 1.0)
    }

    /// Inverse of y ↦ ∂U/∂y: (z e^{βt}/(k α))^{1/(α−1)}.
    pub fn inverse_marginal(&self, which: Component, t: f64, z: f64) -> f64 {
        (z * (self.beta * t).exp() / (self.scale(which) * self.alpha)).powf(1.0 / (self.alpha - 1.0))
    }
}

pub fn u1(pref: &IsoelasticPreference, t: f64, y: f64) -> f64 {
    pref.utility(Component::Running, t, y)
}

pub fn u2(pref: &IsoelasticPreference, t: f64, y: f64) -> f64 {
    pref.utility(Component::Terminal, t, y)
}

pub fn inverse_marginal_1(pref: &IsoelasticPreference, t: f64, z: f64) -> f64 {
    pref.inverse_marginal(Component::Running, t, z)
}

pub fn inverse_marginal_2(pref: &IsoelasticPreference, t: f64, z: f64) -> f64 {
    pref.inverse_marginal(Component::Terminal, t, z)
}

/// Log-spaced search around the analytic maximizer, refined by zooming.
#[derive(Clone, Copy, Debug)]
pub struct SearchGrid {
    /// Half-width of the initial window in log x.
    pub log_span: f64,
    pub points: usize,
    pub refinements: usize,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            log_span: 12.0,
            points: 401,
            refinements: 40,
        }
    }
}

/// |max_x (U(t,x) − xz) − (U(t,𝓘) − 𝓘z)| with the maximum found by grid search.
pub fn check_duality(pref: &IsoelasticPreference, which: Component, t: f64, z: f64, grid: &SearchGrid) -> f64 {
    let inv = pref.inverse_marginal(which, t, z);
    let objective = |x: f64| pref.utility(which, t, x) - x * z;
    let analytic = objective(inv);
    let n = grid.points.max(3);
    let mut center = inv.ln();
    let mut span = grid.log_span;
    let mut best = f64::NEG_INFINITY;
    for _ in 0..=grid.refinements {
        let step = 2.0 * span / (n - 1) as f64;
        let mut arg = center;
        for i in 0..n {
            let s = center - span + i as f64 * step;
            let v = objective(s.exp());
            if v > best {
                best = v;
                arg = s;
            }
        }
        center = arg;
        span = 2.0 * step;
    }
    (best - analytic).abs()
}

/// 𝒳(t,T,z) = 𝓘₂(T,z) + ∫_t^T 𝓘₁(s,z) ds (composite Simpson, 256 panels).
pub fn chi(pref: &IsoelasticPreference, t: f64, horizon: f64, z: f64) -> f64 {
    let tail = inverse_marginal_2(pref, horizon, z);
    if horizon == t {
        return tail;
    }
    tail + simpson(t, horizon, CHI_PANELS, |s| inverse_marginal_1(pref, s, z))
}

/// |𝓘₂(T′,z) − 𝓘₂(T,z) − ∫_{T′}^T 𝓘₁(s,z) ds| for T′ ≤ T.
pub fn time_consistency_residual(pref: &IsoelasticPreference, t_early: f64, t_late: f64, z: f64) -> f64 {
    let lhs = inverse_marginal_2(pref, t_early, z) - inverse_marginal_2(pref, t_late, z);
    let rhs = simpson(t_early, t_late, CHI_PANELS, |s| inverse_marginal_1(pref, s, z));
    (lhs - rhs).abs()
}
