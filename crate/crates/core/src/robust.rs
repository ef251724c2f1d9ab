//! Robust reweighting machinery: KL divergence to uniform, exact inner-max
//! weights, the regularized minimax value, and the log-sum-exp objective.
//!
//! The KL-regularized worst-case reweighting of client losses
//!
//! ```text
//! max_{r ∈ Λ_n} Σ_i r_i f_i − γ Σ_i r_i log(n r_i)
//! ```
//!
//! has the closed-form maximizer r*_i ∝ exp(f_i/γ) and its optimal value
//! equals γ·log((1/n) Σ_i exp(f_i/γ)). [`minimax_value`] computes the left
//! side through the maximizer (route A) and [`lse_value`] computes the right
//! side directly (route B); the two routes deliberately share no code so
//! their agreement is a meaningful check, exercised by [`verify_lemma1`].

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{derive_stream, uniform, Purpose};

const SIMPLEX_TOL: f64 = 1e-12;

/// Nonnegative weights over n clients summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        if r.is_empty() {
            return Err(Error::validation("r", "simplex weights must be nonempty"));
        }
        if r.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::validation(
                "r",
                "simplex weights must be finite and nonnegative",
            ));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::validation(
                "r",
                format!("simplex weights must sum to 1 (got {sum})"),
            ));
        }
        Ok(SimplexWeights(r))
    }

    pub fn uniform(n: usize) -> Self {
        SimplexWeights(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest weight (first one on exact ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// First index attaining the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// KL divergence Σ_i r_i log(n r_i) of `r` from the uniform distribution,
/// with the boundary convention 0·log 0 = 0. Always ≥ 0.
pub fn kl_to_uniform(r: &SimplexWeights) -> f64 {
    let n = r.len() as f64;
    r.as_slice()
        .iter()
        .filter(|&&ri| ri > 0.0)
        .map(|&ri| ri * (n * ri).ln())
        .sum()
}

fn check_losses_gamma(losses: &[f64], gamma: f64) -> Result<()> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::validation("gamma", "must be finite and > 0"));
    }
    if losses.is_empty() {
        return Err(Error::validation("losses", "must be nonempty"));
    }
    if losses.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("losses".to_string()));
    }
    Ok(())
}

/// Inner-max weights r*_i = exp(f_i/γ) / Σ_j exp(f_j/γ), computed with
/// max-shift so no raw exponential is ever materialized.
pub fn softmax_weights(losses: &[f64], gamma: f64) -> Result<SimplexWeights> {
    check_losses_gamma(losses, gamma)?;
    let m = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = losses.iter().map(|&f| ((f - m) / gamma).exp()).collect();
    let z: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= z;
    }
    SimplexWeights::new(exps)
}

/// The regularized inner objective Σ_i r_i f_i − γ Σ_i r_i log(n r_i)
/// evaluated at an arbitrary simplex point.
pub fn inner_objective(losses: &[f64], r: &SimplexWeights, gamma: f64) -> Result<f64> {
    if losses.len() != r.len() {
        return Err(Error::DimensionMismatch {
            context: "inner_objective",
            left: losses.len(),
            right: r.len(),
        });
    }
    let weighted: f64 = losses
        .iter()
        .zip(r.as_slice())
        .map(|(f, ri)| ri * f)
        .sum();
    Ok(weighted - gamma * kl_to_uniform(r))
}

/// Route A: the exact inner-max value, evaluated through the closed-form
/// maximizer. Equals [`lse_value`] for all finite losses and γ > 0.
pub fn minimax_value(losses: &[f64], gamma: f64) -> Result<f64> {
    let r_star = softmax_weights(losses, gamma)?;
    inner_objective(losses, &r_star, gamma)
}

/// Route B: γ·log((1/n) Σ_i exp(f_i/γ)) with max-shift.
pub fn lse_value(losses: &[f64], gamma: f64) -> Result<f64> {
    check_losses_gamma(losses, gamma)?;
    let n = losses.len() as f64;
    let m = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = losses.iter().map(|&f| ((f - m) / gamma).exp()).sum();
    Ok(m + gamma * (sum / n).ln())
}

/// Result of one equivalence-and-optimality trial batch.
#[derive(Clone, Debug, Serialize)]
pub struct Lemma1Report {
    pub n: usize,
    pub gamma: f64,
    pub trials: usize,
    /// Worst relative gap |minimax − lse| / max(1, |lse|) over all trials.
    pub worst_rel_gap: f64,
    /// Trials where a random or perturbed simplex point beat r*.
    pub optimality_violations: usize,
    /// Candidate simplex points tested per trial.
    pub candidates_per_trial: usize,
    pub pass: bool,
}

pub const LEMMA1_REL_TOL: f64 = 1e-9;
const RANDOM_CANDIDATES: usize = 200;
const PERTURBED_CANDIDATES: usize = 50;

/// Draws `trials` random loss vectors in [−10, 10]^n, checks that the two
/// routes agree to [`LEMMA1_REL_TOL`] relative, and that the closed-form
/// maximizer beats 200 random simplex points and 50 local perturbations of
/// itself in the inner objective.
pub fn verify_lemma1(n: usize, gamma: f64, trials: usize, seed: u64) -> Result<Lemma1Report> {
    if n == 0 {
        return Err(Error::validation("n", "must be ≥ 1"));
    }
    if trials == 0 {
        return Err(Error::validation("trials", "must be ≥ 1"));
    }
    if gamma <= 0.0 {
        return Err(Error::validation("gamma", "must be > 0"));
    }

    let mut worst_rel_gap: f64 = 0.0;
    let mut optimality_violations = 0usize;

    for trial in 0..trials {
        let mut rng = derive_stream(seed, trial as u64, 0, 0, Purpose::Probe);
        let losses: Vec<f64> = (0..n).map(|_| uniform(&mut rng, -10.0..10.0)).collect();

        let lse = lse_value(&losses, gamma)?;
        let mm = minimax_value(&losses, gamma)?;
        let rel_gap = (mm - lse).abs() / lse.abs().max(1.0);
        worst_rel_gap = worst_rel_gap.max(rel_gap);

        let r_star = softmax_weights(&losses, gamma)?;
        let at_star = inner_objective(&losses, &r_star, gamma)?;
        // strictly concave inner objective: every other point scores lower,
        // up to arithmetic noise on near-ties
        let tol = 1e-12 * at_star.abs().max(1.0);
        let mut beaten = false;
        for _ in 0..RANDOM_CANDIDATES {
            let candidate = random_simplex_point(n, &mut rng);
            if inner_objective(&losses, &candidate, gamma)? > at_star + tol {
                beaten = true;
            }
        }
        for _ in 0..PERTURBED_CANDIDATES {
            let candidate = perturb_simplex_point(&r_star, 1e-3, &mut rng);
            if inner_objective(&losses, &candidate, gamma)? > at_star + tol {
                beaten = true;
            }
        }
        if beaten {
            optimality_violations += 1;
        }
    }

    let pass = worst_rel_gap <= LEMMA1_REL_TOL && optimality_violations == 0;
    Ok(Lemma1Report {
        n,
        gamma,
        trials,
        worst_rel_gap,
        optimality_violations,
        candidates_per_trial: RANDOM_CANDIDATES + PERTURBED_CANDIDATES,
        pass,
    })
}

/// Uniform point on the simplex via normalized exponentials.
pub fn random_simplex_point(n: usize, rng: &mut impl rand::Rng) -> SimplexWeights {
    let mut e: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = uniform(rng, f64::MIN_POSITIVE..1.0);
            -u.ln()
        })
        .collect();
    let s: f64 = e.iter().sum();
    for v in &mut e {
        *v /= s;
    }
    SimplexWeights::new(e).expect("normalized exponentials form a simplex point")
}

/// Additive noise of the given scale, clipped to the nonnegative orthant and
/// renormalized.
pub fn perturb_simplex_point(
    r: &SimplexWeights,
    scale: f64,
    rng: &mut impl rand::Rng,
) -> SimplexWeights {
    let mut p: Vec<f64> = r
        .as_slice()
        .iter()
        .map(|&ri| (ri + uniform(rng, -scale..scale)).max(0.0))
        .collect();
    let s: f64 = p.iter().sum();
    if s <= 0.0 {
        return SimplexWeights::uniform(r.len());
    }
    for v in &mut p {
        *v /= s;
    }
    SimplexWeights::new(p).expect("clipped renormalized point is on the simplex")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn ln3() -> f64 {
        3.0f64.ln()
    }

    #[test]
    fn kl_uniform_is_zero() {
        for n in 1..6 {
            let r = SimplexWeights::uniform(n);
            assert!(kl_to_uniform(&r).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_point_mass() {
        let r = SimplexWeights::new(vec![1.0, 0.0]).unwrap();
        assert!((kl_to_uniform(&r) - LN2).abs() < 1e-15);
    }

    #[test]
    fn kl_hand_value() {
        let r = SimplexWeights::new(vec![0.75, 0.25]).unwrap();
        // 0.75·ln(1.5) + 0.25·ln(0.5)
        assert!((kl_to_uniform(&r) - 0.13081203594113698).abs() < 1e-15);
    }

    #[test]
    fn non_simplex_rejected() {
        assert!(SimplexWeights::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexWeights::new(vec![1.5, -0.5]).is_err());
        assert!(SimplexWeights::new(vec![]).is_err());
    }

    #[test]
    fn softmax_equal_losses_is_uniform() {
        let w = softmax_weights(&[3.0, 3.0, 3.0], 0.7).unwrap();
        for &r in w.as_slice() {
            assert!((r - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_value() {
        let w = softmax_weights(&[0.0, ln3()], 1.0).unwrap();
        assert!((w.as_slice()[0] - 0.25).abs() < 1e-14);
        assert!((w.as_slice()[1] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn softmax_large_gamma_near_uniform() {
        let w = softmax_weights(&[0.0, ln3()], 100.0).unwrap();
        for &r in w.as_slice() {
            assert!((r - 0.5).abs() <= 0.003, "weight {r}");
        }
    }

    #[test]
    fn softmax_rejects_bad_gamma() {
        assert!(softmax_weights(&[1.0], 0.0).is_err());
        assert!(softmax_weights(&[1.0], -2.0).is_err());
    }

    #[test]
    fn minimax_constant_losses() {
        let c = -4.2;
        let v = minimax_value(&[c, c, c, c], 0.3).unwrap();
        assert!((v - c).abs() < 1e-12);
    }

    #[test]
    fn minimax_hand_value_is_ln2() {
        let v = minimax_value(&[0.0, ln3()], 1.0).unwrap();
        assert!((v - LN2).abs() < 1e-12);
    }

    #[test]
    fn lse_single_loss_is_identity() {
        let v = lse_value(&[2.75], 0.4).unwrap();
        assert!((v - 2.75).abs() < 1e-15);
    }

    #[test]
    fn lse_hand_value_is_ln2() {
        let v = lse_value(&[0.0, ln3()], 1.0).unwrap();
        assert!((v - LN2).abs() < 1e-14);
    }

    #[test]
    fn lse_no_overflow_on_huge_losses() {
        let v = lse_value(&[1000.0, 1000.0], 1.0).unwrap();
        assert_eq!(v, 1000.0);
    }

    #[test]
    fn routes_agree_on_fixed_vector() {
        let losses = [1.0, 2.0, 3.0];
        let a = minimax_value(&losses, 0.5).unwrap();
        let b = lse_value(&losses, 0.5).unwrap();
        assert!((a - b).abs() < 1e-10, "gap {}", (a - b).abs());
    }

    #[test]
    fn verify_lemma1_passes() {
        let report = verify_lemma1(5, 0.2, 100, 42).unwrap();
        assert!(report.pass, "report: {report:?}");
        assert!(report.worst_rel_gap <= LEMMA1_REL_TOL);
    }

    #[test]
    fn verify_lemma1_degenerate_single_client() {
        let report = verify_lemma1(1, 1.0, 10, 3).unwrap();
        assert!(report.pass);
        // with n = 1 both routes return the loss itself
        let v = lse_value(&[7.7], 1.0).unwrap();
        assert!((v - 7.7).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn shift_covariance(
            losses in proptest::collection::vec(-10.0f64..10.0, 1..8),
            shift in -5.0f64..5.0,
            gamma in 0.05f64..10.0,
        ) {
            let shifted: Vec<f64> = losses.iter().map(|f| f + shift).collect();
            let w0 = softmax_weights(&losses, gamma).unwrap();
            let w1 = softmax_weights(&shifted, gamma).unwrap();
            for (a, b) in w0.as_slice().iter().zip(w1.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let l0 = lse_value(&losses, gamma).unwrap();
            let l1 = lse_value(&shifted, gamma).unwrap();
            prop_assert!((l1 - (l0 + shift)).abs() < 1e-9);
        }

        #[test]
        fn argmax_preserved(
            losses in proptest::collection::vec(-10.0f64..10.0, 2..10),
            gamma in 0.01f64..100.0,
        ) {
            let w = softmax_weights(&losses, gamma).unwrap();
            prop_assert_eq!(w.argmax(), argmax(&losses));
        }

        #[test]
        fn routes_agree(
            losses in proptest::collection::vec(-10.0f64..10.0, 1..10),
            gamma in 0.001f64..1000.0,
        ) {
            let a = minimax_value(&losses, gamma).unwrap();
            let b = lse_value(&losses, gamma).unwrap();
            let rel = (a - b).abs() / b.abs().max(1.0);
            prop_assert!(rel <= LEMMA1_REL_TOL, "rel gap {}", rel);
        }

        #[test]
        fn gamma_limits(
            losses in proptest::collection::vec(-10.0f64..10.0, 2..10),
        ) {
            let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            let spread = max - min;
            let hi = lse_value(&losses, 1e3).unwrap();
            let lo = lse_value(&losses, 1e-3).unwrap();
            prop_assert!((hi - mean).abs() <= 1e-2 * spread + 1e-12);
            prop_assert!((lo - max).abs() <= 1e-2 * spread + 1e-12);
        }
    }
}
