//! Independent ground-truth machinery: finite-difference gradients,
//! Monte-Carlo estimator probes, a single-machine reference descent loop, and
//! log-log rate fitting. Everything here is written against the task trait
//! only, with no dependence on the federated runtime, so it can sit on the
//! other side of an equivalence test.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{derive_stream, sample_with_replacement, Purpose, RngStream};
use crate::smoothness::{Observation, SmoothnessEstimate};
use crate::tasks::{
    client_grad_estimator, client_grad_estimator_full, full_batch, full_objective,
    CompositionTask,
};
use crate::vec::ParamVec;

/// Default central-difference step: the double-precision sweet spot where
/// truncation and rounding error balance.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Central differences per coordinate: (F(w + h·e_j) − F(w − h·e_j)) / 2h.
pub fn finite_diff_grad<F>(objective: F, w: &ParamVec, h: f64) -> Result<ParamVec>
where
    F: Fn(&ParamVec) -> f64,
{
    if h <= 0.0 {
        return Err(Error::validation("h", "step must be > 0"));
    }
    let mut grad = Vec::with_capacity(w.len());
    let mut probe = w.clone();
    for j in 0..w.len() {
        let orig = probe[j];
        probe.as_mut_slice()[j] = orig + h;
        let plus = objective(&probe);
        probe.as_mut_slice()[j] = orig - h;
        let minus = objective(&probe);
        probe.as_mut_slice()[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad objective at coordinate {j}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(ParamVec::from(grad))
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// ‖g_analytic − g_fd‖ / max(1, ‖g_fd‖).
    pub max_rel_err: f64,
    /// Coordinate with the largest absolute disagreement.
    pub worst_coordinate: usize,
    /// Step size used.
    pub step: f64,
}

/// Compares `analytic` to the central-difference gradient of `objective`.
pub fn grad_check<F>(
    objective: F,
    analytic: &ParamVec,
    w: &ParamVec,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamVec) -> f64,
{
    let fd = finite_diff_grad(objective, w, h)?;
    if fd.len() != analytic.len() {
        return Err(Error::DimensionMismatch {
            context: "grad_check",
            left: analytic.len(),
            right: fd.len(),
        });
    }
    let mut worst_coordinate = 0;
    let mut worst_abs = 0.0;
    let mut diff_sq = 0.0;
    for j in 0..fd.len() {
        let d = analytic[j] - fd[j];
        diff_sq += d * d;
        if d.abs() > worst_abs {
            worst_abs = d.abs();
            worst_coordinate = j;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: diff_sq.sqrt() / fd.norm().max(1.0),
        worst_coordinate,
        step: h,
    })
}

/// Result of averaging many independent draws of the stochastic estimator at
/// a fixed point.
#[derive(Clone, Debug, Serialize)]
pub struct BiasProbe {
    /// ‖mean estimator − ∇F^i(w)‖.
    pub deviation: f64,
    /// 3·s/√reps where s is the empirical spread of the draws; an unbiased
    /// estimator's deviation stays inside this band.
    pub mc_band: f64,
    pub reps: usize,
}

/// Draws `reps` independent estimator evaluations with fresh minibatches and
/// compares their mean to the exact full-batch gradient. For a linear outer
/// function the estimator is unbiased and the deviation sits inside the
/// Monte-Carlo band; for a nonlinear outer and small inner batches the bias
/// shows up as a deviation clear of the band.
pub fn mc_bias_probe(
    task: &dyn CompositionTask,
    client: usize,
    w: &ParamVec,
    b: usize,
    b1: usize,
    reps: usize,
    seed: u64,
) -> Result<BiasProbe> {
    if reps == 0 {
        return Err(Error::validation("reps", "must be ≥ 1"));
    }
    let full_grad = client_grad_estimator_full(task, client, w)?;
    let inner_len = task.inner_len(client);
    let outer_len = task.outer_len(client);

    let mut draws: Vec<ParamVec> = Vec::with_capacity(reps);
    for rep in 0..reps {
        let mut inner_rng = derive_stream(seed, rep as u64, client as u64, 0, Purpose::InnerBatch);
        let inner_batch = sample_with_replacement(&mut inner_rng, inner_len, b);
        let outer_batch = if task.outer_stochastic() {
            let mut outer_rng =
                derive_stream(seed, rep as u64, client as u64, 0, Purpose::OuterBatch);
            sample_with_replacement(&mut outer_rng, outer_len, b1)
        } else {
            vec![0]
        };
        draws.push(client_grad_estimator(
            task,
            client,
            w,
            &inner_batch,
            &outer_batch,
        )?);
    }

    let mut mean = ParamVec::zeros(w.len());
    for d in &draws {
        mean.add_scaled(1.0 / reps as f64, d)?;
    }
    let deviation = mean.dist_sq(&full_grad)?.sqrt();
    // norm-level spread of the draws around their mean
    let spread_sq: f64 = draws
        .iter()
        .map(|d| d.dist_sq(&mean).expect("same length"))
        .sum::<f64>()
        / (reps.saturating_sub(1).max(1)) as f64;
    let mc_band = 3.0 * spread_sq.sqrt() / (reps as f64).sqrt();
    Ok(BiasProbe {
        deviation,
        mc_band,
        reps,
    })
}

/// T steps of exact full-batch gradient descent on the composition
/// objective. Kept free of any runtime machinery so the federated loop can
/// be tested against it.
pub fn reference_composition_gd(
    task: &dyn CompositionTask,
    w0: &ParamVec,
    eta: f64,
    steps: usize,
) -> Result<Vec<ParamVec>> {
    let n = task.clients();
    let mut trajectory = Vec::with_capacity(steps + 1);
    let mut w = w0.clone();
    trajectory.push(w.clone());
    for step in 0..steps {
        let mut grad = ParamVec::zeros(w.len());
        for i in 0..n {
            grad.add_scaled(1.0, &client_grad_estimator_full(task, i, &w)?)?;
        }
        grad.scale(1.0 / n as f64);
        w.add_scaled(-eta, &grad)?;
        if !w.is_finite() {
            return Err(Error::Diverged {
                round: step,
                value: f64::INFINITY,
            });
        }
        trajectory.push(w.clone());
    }
    Ok(trajectory)
}

/// Least-squares slope of log(value) vs log(t). Callers state how many
/// points their use case requires; points must span at least two decades.
pub fn rate_fit(points: &[(f64, f64)], min_points: usize) -> Result<f64> {
    if points.len() < min_points.max(2) {
        return Err(Error::validation(
            "points",
            format!("need ≥ {} points, got {}", min_points.max(2), points.len()),
        ));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(t, v) in points {
        if t <= 0.0 || v <= 0.0 || !t.is_finite() || !v.is_finite() {
            return Err(Error::validation(
                "points",
                "t and value must be finite and positive",
            ));
        }
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if hi / lo < 100.0 {
        return Err(Error::validation(
            "points",
            format!("t values must span ≥ 2 decades (span {:.2}×)", hi / lo),
        ));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(t, _)| t.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, v)| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..points.len() {
        num += (xs[i] - mx) * (ys[i] - my);
        den += (xs[i] - mx) * (xs[i] - mx);
    }
    Ok(num / den)
}

/// Samples random point pairs to feed the Lipschitz-ratio and per-sample
/// deviation fields of a [`SmoothnessEstimate`]; the gradient-norm fields are
/// fed from the same draws.
pub fn estimate_constants(
    task: &dyn CompositionTask,
    pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<SmoothnessEstimate> {
    let mut est = SmoothnessEstimate::default();
    let d = task.param_dim();
    let n = task.clients();
    let mut rng: RngStream = derive_stream(seed, 0, 0, 0, Purpose::Probe);
    let draw_point = |rng: &mut RngStream| -> ParamVec {
        (0..d)
            .map(|_| crate::rng::uniform(rng, -radius..radius))
            .collect()
    };
    for _ in 0..pairs {
        let w1 = draw_point(&mut rng);
        let w2 = draw_point(&mut rng);
        let dist = w1.dist_sq(&w2)?.sqrt();
        let mut f1 = ParamVec::zeros(d);
        let mut f2 = ParamVec::zeros(d);
        for i in 0..n {
            let batch = full_batch(task.inner_len(i));
            est.update(Observation::InnerJacobianNorm(
                task.inner_jacobian_frob(i, &w1, &batch)?,
            ))?;
            let g1 = task.plain_grad(i, &w1, &batch)?;
            let g2 = task.plain_grad(i, &w2, &batch)?;
            if dist > 1e-9 {
                est.update(Observation::InnerLipschitzRatio(
                    g1.dist_sq(&g2)?.sqrt() / dist,
                ))?;
            }
            // per-sample gradient spread around the shard mean
            for j in 0..task.inner_len(i) {
                let gj = task.plain_grad(i, &w1, &[j])?;
                est.update(Observation::SampleDeviation(gj.dist_sq(&g1)?.sqrt()))?;
            }
            let u1 = client_grad_estimator_full(task, i, &w1)?;
            let u2 = client_grad_estimator_full(task, i, &w2)?;
            f1.add_scaled(1.0 / n as f64, &u1)?;
            f2.add_scaled(1.0 / n as f64, &u2)?;
            let y1 = task.inner_value(i, &w1, &full_batch(task.inner_len(i)))?;
            let ob = if task.outer_stochastic() {
                full_batch(task.outer_len(i))
            } else {
                vec![0]
            };
            est.update(Observation::OuterGradNorm(
                task.outer_grad(i, &y1, &ob)?.norm(),
            ))?;
        }
        if dist > 1e-9 {
            est.update(Observation::FullLipschitzRatio(
                f1.dist_sq(&f2)?.sqrt() / dist,
            ))?;
        }
    }
    Ok(est)
}

/// Convenience wrapper: exact F evaluated through full batches, as a closure
/// for finite differencing.
pub fn objective_closure<'a>(task: &'a dyn CompositionTask) -> impl Fn(&ParamVec) -> f64 + 'a {
    move |w| full_objective(task, w).unwrap_or(f64::NAN)
}

/// Gradient-check summary for one task family.
#[derive(Clone, Debug, Serialize)]
pub struct FamilyGradReport {
    pub family: String,
    pub points: usize,
    pub step: f64,
    /// Worst estimator-vs-finite-difference relative error over all
    /// (point, client) probes.
    pub max_rel_err: f64,
    /// Worst inner-map VJP-vs-directional-difference relative error; only
    /// present for families with a vector-valued inner mapping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vjp_max_rel_err: Option<f64>,
}

/// Builds a small instance of the named family and compares full-batch
/// estimator gradients against central differences of the per-client
/// objective at random points; for meta-learning families it additionally
/// checks the inner-map transposed-Jacobian products against directional
/// differences.
pub fn grad_check_family(
    family: &str,
    points: usize,
    h: f64,
    seed: u64,
) -> Result<FamilyGradReport> {
    use crate::tasks::maml::MamlOuter;
    use crate::tasks::scalar::ScalarOuter;
    use crate::tasks::synth;

    let gamma = 0.5;
    enum Built {
        Scalar(crate::tasks::scalar::ScalarTask),
        Maml(crate::tasks::maml::MamlTask),
    }
    let built = match family {
        "quadratic-dro" => Built::Scalar(synth::make_dro_quadratic(
            4,
            5,
            12,
            1.0,
            0.3,
            seed,
            ScalarOuter::Exp { gamma },
        )?),
        "logistic-dro" => Built::Scalar(synth::make_logistic_dro(
            4,
            5,
            16,
            0.5,
            seed,
            ScalarOuter::Exp { gamma },
        )?),
        "imbalanced-classification" => Built::Scalar(synth::make_imbalanced_classification(
            4,
            40,
            10,
            4,
            3,
            None,
            2.0,
            seed,
            ScalarOuter::Exp { gamma },
        )?),
        "quadratic-maml" => Built::Maml(synth::make_maml_quadratic(
            4,
            4,
            3,
            3,
            0.5,
            1.5,
            seed,
            0.1,
            MamlOuter::Exp { gamma },
        )?),
        "logistic-maml" => Built::Maml(synth::make_maml_logistic(
            4,
            4,
            10,
            10,
            0.5,
            seed,
            0.1,
            MamlOuter::Exp { gamma },
        )?),
        other => {
            return Err(Error::validation(
                "task",
                format!("unknown grad-check family `{other}`"),
            ))
        }
    };
    let task: &dyn CompositionTask = match &built {
        Built::Scalar(t) => t,
        Built::Maml(t) => t,
    };

    let d = task.param_dim();
    let mut rng = derive_stream(seed, 1, 0, 0, Purpose::Probe);
    let mut max_rel_err = 0.0f64;
    let mut vjp_max_rel_err: Option<f64> = None;

    for _ in 0..points {
        let w: ParamVec = (0..d)
            .map(|_| crate::rng::uniform(&mut rng, -1.0..1.0))
            .collect();
        let client = crate::rng::uniform(&mut rng, 0..task.clients());
        let analytic = client_grad_estimator_full(task, client, &w)?;
        let objective =
            |p: &ParamVec| crate::tasks::client_objective_full(task, client, p).unwrap_or(f64::NAN);
        let report = grad_check(objective, &analytic, &w, h)?;
        max_rel_err = max_rel_err.max(report.max_rel_err);

        if let Built::Maml(m) = &built {
            let batch = full_batch(task.inner_len(client));
            let v: ParamVec = (0..d)
                .map(|_| crate::rng::uniform(&mut rng, -1.0..1.0))
                .collect();
            let analytic_vjp = m.adapt_vjp(client, &w, &batch, &v)?;
            // (Jᵀv)_j via central differences of ⟨adapt(w), v⟩ along e_j
            let mut fd = Vec::with_capacity(d);
            let mut probe = w.clone();
            for j in 0..d {
                let orig = probe[j];
                probe.as_mut_slice()[j] = orig + h;
                let plus = m.adapt(client, &probe, &batch)?.dot(&v)?;
                probe.as_mut_slice()[j] = orig - h;
                let minus = m.adapt(client, &probe, &batch)?.dot(&v)?;
                probe.as_mut_slice()[j] = orig;
                fd.push((plus - minus) / (2.0 * h));
            }
            let fd = ParamVec::from(fd);
            let rel = analytic_vjp.dist_sq(&fd)?.sqrt() / fd.norm().max(1.0);
            vjp_max_rel_err = Some(vjp_max_rel_err.unwrap_or(0.0).max(rel));
        }
    }

    Ok(FamilyGradReport {
        family: family.to_string(),
        points,
        step: h,
        max_rel_err,
        vjp_max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_quadratic_gradient() {
        let f = |w: &ParamVec| 0.5 * w.norm_sq();
        let w = ParamVec::from(vec![3.0, -1.0]);
        let g = finite_diff_grad(f, &w, 1e-6).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn fd_constant_is_zero() {
        let g = finite_diff_grad(|_| 4.2, &ParamVec::zeros(3), 1e-6).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fd_exponential() {
        let f = |w: &ParamVec| w[0].exp();
        let g = finite_diff_grad(f, &ParamVec::from(vec![0.0]), 1e-6).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fd_rejects_bad_step_and_nan() {
        assert!(finite_diff_grad(|_| 1.0, &ParamVec::zeros(1), 0.0).is_err());
        assert!(finite_diff_grad(|_| f64::NAN, &ParamVec::zeros(1), 1e-6).is_err());
    }

    #[test]
    fn rate_fit_recovers_power_law() {
        let points: Vec<(f64, f64)> = (0..12)
            .map(|k| {
                let t = 100.0 * 1.6f64.powi(k);
                (t, 5.0 * t.powf(-0.5))
            })
            .collect();
        let slope = rate_fit(&points, 10).unwrap();
        assert!((slope + 0.5).abs() < 1e-10);
    }

    #[test]
    fn rate_fit_flat_sequence_has_nonnegative_slope() {
        let points: Vec<(f64, f64)> = (0..12)
            .map(|k| (100.0 * 1.6f64.powi(k), 3.0))
            .collect();
        let slope = rate_fit(&points, 10).unwrap();
        assert!(slope >= -1e-12);
    }

    #[test]
    fn rate_fit_guards() {
        assert!(rate_fit(&[(100.0, 1.0), (200.0, 0.5)], 10).is_err());
        let narrow: Vec<(f64, f64)> = (0..12).map(|k| (100.0 + k as f64, 1.0)).collect();
        assert!(rate_fit(&narrow, 10).is_err());
    }

    #[test]
    fn reference_gd_monotone_on_quadratic() {
        use crate::tasks::scalar::{SampleLoss, ScalarOuter, ScalarTask};
        use crate::tasks::ClientShard;
        use crate::vec::Vector;
        let task = ScalarTask::new(
            2,
            1,
            ScalarOuter::Identity,
            vec![ClientShard {
                client_id: 0,
                inner: vec![SampleLoss::Centered {
                    center: Vector::from(vec![1.0, -2.0]),
                }],
                outer: vec![],
            }],
        )
        .unwrap();
        let traj = reference_composition_gd(&task, &ParamVec::zeros(2), 0.5, 20).unwrap();
        let values: Vec<f64> = traj
            .iter()
            .map(|w| full_objective(&task, w).unwrap())
            .collect();
        for pair in values.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15);
        }
        // η = 0 keeps the trajectory constant
        let frozen = reference_composition_gd(&task, &ParamVec::zeros(2), 0.0, 5).unwrap();
        for w in &frozen {
            assert_eq!(w, &ParamVec::zeros(2));
        }
    }
}
