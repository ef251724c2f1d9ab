//! Empirical running estimates of the boundedness and smoothness constants.
//!
//! The drift and estimator-deviation bounds are stated in terms of constants
//! (G_f, G_g, L_f, L_g, L, σ) that are assumed to exist but are never given
//! numerically, so the runtime estimates them as running maxima over observed
//! quantities. Checks built on these estimates are necessary-condition
//! checks: a violated bound is a real failure, a satisfied bound is evidence,
//! not proof.

use serde::Serialize;

use crate::error::{Error, Result};

/// Running maxima of observed constants. All fields are monotone
/// nondecreasing under [`SmoothnessEstimate::update`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SmoothnessEstimate {
    /// Max observed inner Jacobian norm (Frobenius, which upper-bounds the
    /// spectral norm, so bound checks built on it are conservative).
    pub g_f: f64,
    /// Max observed outer gradient norm.
    pub g_g: f64,
    /// Max observed inner gradient-difference ratio ‖∇f(w₁)−∇f(w₂)‖/‖w₁−w₂‖.
    pub l_f: f64,
    /// Max observed outer gradient-difference ratio.
    pub l_g: f64,
    /// Max observed full-objective gradient-difference ratio.
    pub l: f64,
    /// Max observed per-sample deviation (value or gradient) from the
    /// shard mean; proxy for the variance constant.
    pub sigma: f64,
}

/// One observed quantity, tagged with the constant it feeds.
#[derive(Clone, Copy, Debug)]
pub enum Observation {
    InnerJacobianNorm(f64),
    OuterGradNorm(f64),
    InnerLipschitzRatio(f64),
    OuterLipschitzRatio(f64),
    FullLipschitzRatio(f64),
    SampleDeviation(f64),
}

impl Observation {
    fn value(self) -> f64 {
        match self {
            Observation::InnerJacobianNorm(v)
            | Observation::OuterGradNorm(v)
            | Observation::InnerLipschitzRatio(v)
            | Observation::OuterLipschitzRatio(v)
            | Observation::FullLipschitzRatio(v)
            | Observation::SampleDeviation(v) => v,
        }
    }
}

impl SmoothnessEstimate {
    /// Raises the matching field to `max(old, observed)`. Non-finite
    /// observations are rejected so a blown-up run cannot poison the bounds.
    pub fn update(&mut self, obs: Observation) -> Result<()> {
        let v = obs.value();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("smoothness observation {obs:?}")));
        }
        let field = match obs {
            Observation::InnerJacobianNorm(_) => &mut self.g_f,
            Observation::OuterGradNorm(_) => &mut self.g_g,
            Observation::InnerLipschitzRatio(_) => &mut self.l_f,
            Observation::OuterLipschitzRatio(_) => &mut self.l_g,
            Observation::FullLipschitzRatio(_) => &mut self.l,
            Observation::SampleDeviation(_) => &mut self.sigma,
        };
        if v > *field {
            *field = v;
        }
        Ok(())
    }

    /// Field-wise max with another estimate. Commutative and associative, so
    /// per-client partial estimates can be merged in any order.
    pub fn merge(&mut self, other: &SmoothnessEstimate) {
        self.g_f = self.g_f.max(other.g_f);
        self.g_g = self.g_g.max(other.g_g);
        self.l_f = self.l_f.max(other.l_f);
        self.l_g = self.l_g.max(other.l_g);
        self.l = self.l.max(other.l);
        self.sigma = self.sigma.max(other.sigma);
    }

    /// Client-drift bound τ²η²Ĝ_g²Ĝ_f² on ‖wⁱ_{s,t} − w̄_s‖².
    pub fn drift_bound(&self, tau: usize, eta: f64) -> f64 {
        let t = tau as f64;
        t * t * eta * eta * self.g_g * self.g_g * self.g_f * self.g_f
    }

    /// Monitored estimator-deviation bound
    /// 5(Ĝ_g²L̂_f² + Ĝ_f⁴L̂_g²)τ²η²Ĝ_g²Ĝ_f² + 5Ĝ_f²σ̂²/b₁ + 5Ĝ_g²σ̂²/b + 5L̂_g²Ĝ_f²σ̂²/b.
    /// Reported, never asserted: σ̂ is only a loose proxy.
    pub fn deviation_bound(&self, tau: usize, eta: f64, b: usize, b1: usize) -> f64 {
        let gf2 = self.g_f * self.g_f;
        let gg2 = self.g_g * self.g_g;
        let s2 = self.sigma * self.sigma;
        let h2 = gg2 * self.l_f * self.l_f + gf2 * gf2 * self.l_g * self.l_g;
        5.0 * h2 * self.drift_bound(tau, eta)
            + 5.0 * gf2 * s2 / b1 as f64
            + 5.0 * gg2 * s2 / b as f64
            + 5.0 * self.l_g * self.l_g * gf2 * s2 / b as f64
    }
}
