//! The federated server loop: per-round client sampling, parallel local
//! compositional SGD with a synchronization gap, unweighted model averaging,
//! per-round exact diagnostics, and the drift monitor.
//!
//! Determinism contract: all randomness is derived per (seed, round, client,
//! step, purpose), partial results are reduced in ascending client order, and
//! constant estimates are merged with a commutative max, so the parallel
//! client loop is bit-reproducible and independent of execution order.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, ExperimentConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_stream, sample_with_replacement, sample_without_replacement, Purpose};
use crate::robust::{argmax, softmax_weights};
use crate::smoothness::{Observation, SmoothnessEstimate};
use crate::tasks::{full_batch, full_gradient, full_objective, CompositionTask};
use crate::vec::ParamVec;

/// Objective magnitude beyond which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Relative slack applied to the drift bound to absorb constant-estimation
/// error.
pub const DRIFT_SLACK: f64 = 0.05;

/// Per-round telemetry, evaluated at the broadcast model w̄_s over all n
/// clients with full batches (participants-only quantities would not match
/// the full objective the convergence statement is about).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// F(w̄_s) for the composition runner; Σ r_i f_i(w̄_s) for the baseline.
    pub objective: f64,
    /// Full-batch per-client scalar losses f_i(w̄_s).
    pub client_losses: Vec<f64>,
    /// max_i f_i(w̄_s).
    pub worst_loss: f64,
    /// Implied robust weights softmax(losses/γ).
    pub weights: Vec<f64>,
    /// ‖∇F(w̄_s)‖ computed exactly.
    pub grad_norm: f64,
    /// max_{i,t} ‖wⁱ_{s,t} − w̄_s‖² observed during the round.
    pub max_drift_sq: f64,
    /// τ²η²Ĝ_g²Ĝ_f² with the estimates as of the end of this round.
    pub drift_bound: f64,
    /// Clamped exponent evaluations during this round (diagnostics included).
    pub clamp_events: u64,
    /// Not serialized: replays must produce byte-identical metrics files.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    /// Broadcast model w̄_s at the start of each executed round.
    pub model_trace: Vec<ParamVec>,
    pub final_model: ParamVec,
    pub estimate: SmoothnessEstimate,
    /// True when the run stopped early on a non-finite or huge objective.
    pub diverged: bool,
}

/// Uniform sample without replacement of m of n clients, deterministic in
/// (seed, round), returned ascending.
pub fn sample_clients(seed: u64, round: usize, n: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::validation(
            "m",
            format!("must satisfy 1 ≤ m ≤ n (m = {m}, n = {n})"),
        ));
    }
    let mut rng = derive_stream(seed, round as u64, 0, 0, Purpose::ClientSample);
    Ok(sample_without_replacement(&mut rng, n, m))
}

/// Unweighted mean of client models, reduced in ascending client order so
/// the result is bitwise independent of input permutation.
pub fn server_average(mut models: Vec<(usize, ParamVec)>) -> Result<ParamVec> {
    if models.is_empty() {
        return Err(Error::validation("models", "cannot average zero models"));
    }
    models.sort_by_key(|(id, _)| *id);
    let count = models.len() as f64;
    let mut acc = ParamVec::zeros(models[0].1.len());
    for (_, w) in &models {
        acc.add_scaled(1.0, w)?;
    }
    acc.scale(1.0 / count);
    Ok(acc)
}

/// Sample-size-weighted mean over the participating subset, weights
/// renormalized within the subset. Reduction order is ascending client id.
fn weighted_average(mut models: Vec<(usize, ParamVec)>, shard_weights: &[f64]) -> Result<ParamVec> {
    if models.is_empty() {
        return Err(Error::validation("models", "cannot average zero models"));
    }
    models.sort_by_key(|(id, _)| *id);
    let total: f64 = models.iter().map(|(id, _)| shard_weights[*id]).sum();
    let mut acc = ParamVec::zeros(models[0].1.len());
    for (id, w) in &models {
        acc.add_scaled(shard_weights[*id] / total, w)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StepMode {
    /// Chain the outer gradient through the inner Jacobian (the
    /// compositional estimator).
    Composition,
    /// Plain SGD on the raw per-client loss (the averaging baseline).
    Plain,
}

/// Result of one client's τ local steps.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub client: usize,
    pub model: ParamVec,
    pub max_drift_sq: f64,
    pub estimate: SmoothnessEstimate,
}

fn local_round(
    task: &dyn CompositionTask,
    client: usize,
    w_start: &ParamVec,
    cfg: &ExperimentConfig,
    round: usize,
    mode: StepMode,
) -> Result<LocalOutcome> {
    w_start.check_finite("local_round start model")?;
    let inner_len = task.inner_len(client);
    let mut w = w_start.clone();
    let mut estimate = SmoothnessEstimate::default();
    let mut max_drift_sq = 0.0f64;

    for t in 0..cfg.tau {
        let inner_batch = match cfg.b {
            Some(b) => {
                let mut rng =
                    derive_stream(cfg.seed, round as u64, client as u64, t as u64, Purpose::InnerBatch);
                sample_with_replacement(&mut rng, inner_len, b)
            }
            None => full_batch(inner_len),
        };
        let (u, jac_norm, outer_norm) = match mode {
            StepMode::Composition => {
                let outer_batch = if task.outer_stochastic() {
                    match cfg.b1 {
                        Some(b1) => {
                            let mut rng = derive_stream(
                                cfg.seed,
                                round as u64,
                                client as u64,
                                t as u64,
                                Purpose::OuterBatch,
                            );
                            sample_with_replacement(&mut rng, task.outer_len(client), b1)
                        }
                        None => full_batch(task.outer_len(client)),
                    }
                } else {
                    vec![0]
                };
                let out = task.estimator_with_norms(client, &w, &inner_batch, &outer_batch)?;
                (out.u, out.inner_jac_frob, out.outer_grad_norm)
            }
            StepMode::Plain => {
                let g = task.plain_grad(client, &w, &inner_batch)?;
                let norm = g.norm();
                (g, norm, 1.0)
            }
        };
        if !u.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient estimator for client {client} at round {round} step {t} \
                 ({} clamp events so far)",
                task.clamp_events()
            )));
        }
        estimate.update(Observation::InnerJacobianNorm(jac_norm))?;
        estimate.update(Observation::OuterGradNorm(outer_norm))?;
        w.add_scaled(-cfg.eta, &u)?;
        let drift = w.dist_sq(w_start)?;
        if drift > max_drift_sq {
            max_drift_sq = drift;
        }
    }

    Ok(LocalOutcome {
        client,
        model: w,
        max_drift_sq,
        estimate,
    })
}

fn validate_task_against_config(task: &dyn CompositionTask, cfg: &ExperimentConfig) -> Result<()> {
    if task.clients() != cfg.n {
        return Err(Error::validation(
            "n",
            format!(
                "config says {} clients but task has {}",
                cfg.n,
                task.clients()
            ),
        ));
    }
    if let Some(b) = cfg.b {
        for i in 0..task.clients() {
            if b > task.inner_len(i) {
                return Err(Error::validation(
                    "b",
                    format!(
                        "inner batch {b} exceeds client {i}'s shard size {}",
                        task.inner_len(i)
                    ),
                ));
            }
        }
    }
    if task.outer_stochastic() {
        if let Some(b1) = cfg.b1 {
            for i in 0..task.clients() {
                if b1 > task.outer_len(i) {
                    return Err(Error::validation(
                        "b1",
                        format!(
                            "outer batch {b1} exceeds client {i}'s outer shard size {}",
                            task.outer_len(i)
                        ),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn run_federated(
    task: &dyn CompositionTask,
    cfg: &ExperimentConfig,
    mode: StepMode,
) -> Result<RunOutput> {
    validate_task_against_config(task, cfg)?;
    let n = cfg.n;
    // baseline weights r_i ∝ shard size; also used for the baseline objective
    let shard_weights: Vec<f64> = {
        let total: f64 = (0..n).map(|i| task.inner_len(i) as f64).sum();
        (0..n).map(|i| task.inner_len(i) as f64 / total).collect()
    };

    let mut w = ParamVec::zeros(task.param_dim());
    let mut estimate = SmoothnessEstimate::default();
    let mut records: Vec<RoundRecord> = Vec::with_capacity(cfg.rounds);
    let mut model_trace: Vec<ParamVec> = Vec::with_capacity(cfg.rounds);
    let mut diverged = false;

    for round in 0..cfg.rounds {
        let started = Instant::now();
        let clamp_before = task.clamp_events();
        model_trace.push(w.clone());

        let mut client_losses = Vec::with_capacity(n);
        for i in 0..n {
            client_losses.push(task.client_loss(i, &w)?);
        }
        let worst_loss = client_losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let objective = match mode {
            StepMode::Composition => full_objective(task, &w)?,
            StepMode::Plain => client_losses
                .iter()
                .zip(&shard_weights)
                .map(|(l, r)| l * r)
                .sum(),
        };
        let grad = match mode {
            StepMode::Composition => full_gradient(task, &w)?,
            StepMode::Plain => {
                let mut acc = ParamVec::zeros(task.param_dim());
                for (i, &r) in shard_weights.iter().enumerate() {
                    let g = task.plain_grad(i, &w, &full_batch(task.inner_len(i)))?;
                    acc.add_scaled(r, &g)?;
                }
                acc
            }
        };
        let weights = softmax_weights(&client_losses, cfg.gamma)?.into_vec();

        if !objective.is_finite() || objective.abs() > DIVERGENCE_LIMIT || !grad.is_finite() {
            records.push(RoundRecord {
                round,
                objective,
                client_losses,
                worst_loss,
                weights,
                grad_norm: grad.norm(),
                max_drift_sq: 0.0,
                drift_bound: estimate.drift_bound(cfg.tau, cfg.eta),
                clamp_events: task.clamp_events() - clamp_before,
                wall_clock_s: started.elapsed().as_secs_f64(),
            });
            diverged = true;
            log::warn!("round {round}: objective {objective:e} diverged, stopping early");
            break;
        }

        let participants = sample_clients(cfg.seed, round, n, cfg.m)?;
        let outcomes: Result<Vec<LocalOutcome>> = participants
            .par_iter()
            .map(|&i| local_round(task, i, &w, cfg, round, mode))
            .collect();
        let outcomes = match outcomes {
            Ok(o) => o,
            Err(e) if e.is_divergence() => {
                log::warn!("round {round}: {e}; stopping early");
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };

        let mut max_drift_sq = 0.0f64;
        for outcome in &outcomes {
            estimate.merge(&outcome.estimate);
            if outcome.max_drift_sq > max_drift_sq {
                max_drift_sq = outcome.max_drift_sq;
            }
        }

        let models: Vec<(usize, ParamVec)> = outcomes
            .into_iter()
            .map(|o| (o.client, o.model))
            .collect();
        w = match mode {
            StepMode::Composition => server_average(models)?,
            StepMode::Plain => weighted_average(models, &shard_weights)?,
        };

        records.push(RoundRecord {
            round,
            objective,
            client_losses,
            worst_loss,
            weights,
            grad_norm: grad.norm(),
            max_drift_sq,
            drift_bound: estimate.drift_bound(cfg.tau, cfg.eta),
            clamp_events: task.clamp_events() - clamp_before,
            wall_clock_s: started.elapsed().as_secs_f64(),
        });

        if !w.is_finite() {
            diverged = true;
            log::warn!("round {round}: averaged model non-finite, stopping early");
            break;
        }
    }

    Ok(RunOutput {
        records,
        model_trace,
        final_model: w,
        estimate,
        diverged,
    })
}

/// The compositional runner: S rounds of sample → broadcast → τ local
/// compositional-SGD steps per participant → unweighted average.
pub fn run_comfedl(task: &dyn CompositionTask, cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_federated(task, cfg, StepMode::Composition)
}

/// The averaging baseline: same loop shape, plain SGD on the raw per-client
/// loss, sample-size-weighted averaging.
pub fn run_fedavg(task: &dyn CompositionTask, cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_federated(task, cfg, StepMode::Plain)
}

/// Runs the algorithm selected by the config.
pub fn run(task: &dyn CompositionTask, cfg: &ExperimentConfig) -> Result<RunOutput> {
    match cfg.algorithm {
        Algorithm::Comfedl | Algorithm::ComfedlDamaml => run_comfedl(task, cfg),
        Algorithm::Fedavg => run_fedavg(task, cfg),
    }
}

/// Post-hoc drift audit over recorded rounds.
#[derive(Clone, Debug, Serialize)]
pub struct DriftReport {
    pub rounds: usize,
    /// Rounds whose observed drift exceeded bound·(1 + slack).
    pub violations: Vec<usize>,
    /// max over rounds of drift/bound (0/0 counts as 0).
    pub worst_ratio: f64,
    pub slack: f64,
    /// Monitored estimator-deviation bound from the final estimates; not
    /// asserted because σ̂ is a loose proxy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deviation_bound_monitor: Option<f64>,
    pub pass: bool,
}

/// Checks every recorded round's observed squared drift against its
/// recorded bound with [`DRIFT_SLACK`] relative slack. Works from records
/// alone, so it can audit a metrics file after the fact.
pub fn drift_check(records: &[RoundRecord]) -> DriftReport {
    let mut violations = Vec::new();
    let mut worst_ratio = 0.0f64;
    for rec in records {
        let bound = rec.drift_bound;
        let ratio = if rec.max_drift_sq <= 0.0 {
            0.0
        } else if bound > 0.0 {
            rec.max_drift_sq / bound
        } else {
            f64::INFINITY
        };
        if ratio > worst_ratio {
            worst_ratio = ratio;
        }
        if ratio > 1.0 + DRIFT_SLACK {
            violations.push(rec.round);
        }
    }
    DriftReport {
        rounds: records.len(),
        pass: violations.is_empty(),
        violations,
        worst_ratio,
        slack: DRIFT_SLACK,
        deviation_bound_monitor: None,
    }
}

/// [`drift_check`] plus the monitored estimator-deviation bound computed
/// from the run's final constant estimates.
pub fn drift_check_with_monitor(
    records: &[RoundRecord],
    estimate: &SmoothnessEstimate,
    cfg: &ExperimentConfig,
) -> DriftReport {
    let mut report = drift_check(records);
    report.deviation_bound_monitor = match (cfg.b, cfg.b1) {
        (Some(b), Some(b1)) => Some(estimate.deviation_bound(cfg.tau, cfg.eta, b, b1)),
        _ => None,
    };
    report
}

/// Learning-rate / batch schedule for the rate experiment: η = η₀·T^(−α₁),
/// b = b₁ = ⌈T^(α₂)⌉, τ constant.
#[derive(Clone, Debug)]
pub struct RateSchedule {
    pub alpha1: f64,
    pub alpha2: f64,
    pub eta0: f64,
    pub gamma: f64,
    pub tau: usize,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub heterogeneity: f64,
}

impl Default for RateSchedule {
    fn default() -> Self {
        RateSchedule {
            alpha1: 0.5,
            alpha2: 1.0,
            eta0: 0.5,
            gamma: 1.0,
            tau: 5,
            n: 10,
            m: 5,
            d: 5,
            heterogeneity: 0.5,
        }
    }
}

/// Runs the compositional runner on the logistic robust task once per total
/// step budget T and returns (T, running-average ‖∇F(w̄_s)‖²) pairs for rate
/// fitting.
pub fn rate_experiment(
    t_values: &[usize],
    schedule: &RateSchedule,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::with_capacity(t_values.len());
    for &t in t_values {
        if t < schedule.tau {
            return Err(Error::validation("t", "total steps must be ≥ tau"));
        }
        let tf = t as f64;
        let eta = schedule.eta0 * tf.powf(-schedule.alpha1);
        let batch = tf.powf(schedule.alpha2).ceil() as usize;
        let rounds = t / schedule.tau;
        let samples = batch.max(50);
        let task = crate::tasks::synth::make_logistic_dro(
            schedule.n,
            schedule.d,
            samples,
            schedule.heterogeneity,
            seed,
            crate::tasks::scalar::ScalarOuter::Exp {
                gamma: schedule.gamma,
            },
        )?;
        let cfg = ExperimentConfig {
            seed,
            n: schedule.n,
            m: schedule.m,
            tau: schedule.tau,
            rounds,
            eta,
            b: Some(batch),
            b1: Some(batch),
            gamma: schedule.gamma,
            eta_in: None,
            algorithm: Algorithm::Comfedl,
            task: crate::config::TaskSection {
                family: "logistic-dro".to_string(),
                n: schedule.n,
                d: schedule.d,
                classes: None,
                samples_per_client: Some(samples),
                dominant_size: None,
                minority_size: None,
                rho: None,
                support: None,
                query: None,
                center_scale: None,
                jitter: None,
                heterogeneity: Some(schedule.heterogeneity),
                separation: None,
                eig_lo: None,
                eig_hi: None,
                data_seed: Some(seed),
            },
        };
        let out = run_comfedl(&task, &cfg)?;
        if out.diverged {
            return Err(Error::Diverged {
                round: out.records.len(),
                value: out.records.last().map(|r| r.objective).unwrap_or(f64::NAN),
            });
        }
        let avg: f64 = out
            .records
            .iter()
            .map(|r| r.grad_norm * r.grad_norm)
            .sum::<f64>()
            / out.records.len() as f64;
        points.push((tf, avg));
        log::info!("rate experiment T = {t}: avg ‖∇F‖² = {avg:e}");
    }
    Ok(points)
}

/// Weights argmax must track loss argmax in every record (the testable form
/// of "higher loss gets higher weight").
pub fn check_reweighting_invariant(records: &[RoundRecord]) -> bool {
    records
        .iter()
        .all(|r| argmax(&r.weights) == argmax(&r.client_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskSection;
    use crate::tasks::scalar::{SampleLoss, ScalarOuter, ScalarTask};
    use crate::tasks::ClientShard;
    use crate::vec::Vector;

    fn quad_identity_task(n: usize, centers: Vec<Vec<f64>>) -> ScalarTask {
        let shards = centers
            .into_iter()
            .enumerate()
            .map(|(i, c)| ClientShard {
                client_id: i,
                inner: vec![SampleLoss::Centered {
                    center: Vector::from(c),
                }],
                outer: vec![],
            })
            .collect();
        let _ = n;
        ScalarTask::new(2, 1, ScalarOuter::Identity, shards).unwrap()
    }

    fn base_cfg(n: usize, family: &str, d: usize) -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            n,
            m: n,
            tau: 1,
            rounds: 1,
            eta: 0.1,
            b: None,
            b1: None,
            gamma: 0.5,
            eta_in: None,
            algorithm: Algorithm::Comfedl,
            task: TaskSection {
                family: family.to_string(),
                n,
                d,
                classes: None,
                samples_per_client: None,
                dominant_size: None,
                minority_size: None,
                rho: None,
                support: None,
                query: None,
                center_scale: None,
                jitter: None,
                heterogeneity: None,
                separation: None,
                eig_lo: None,
                eig_hi: None,
                data_seed: None,
            },
        }
    }

    #[test]
    fn sample_clients_full_participation() {
        assert_eq!(sample_clients(1, 0, 5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sample_clients_deterministic() {
        let a = sample_clients(9, 4, 10, 1).unwrap();
        let b = sample_clients(9, 4, 10, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_clients_rejects_oversubscription() {
        assert!(sample_clients(0, 0, 4, 5).is_err());
    }

    #[test]
    fn selection_frequency_in_binomial_band() {
        let (n, m, rounds) = (10usize, 3usize, 10_000usize);
        let mut counts = vec![0usize; n];
        for s in 0..rounds {
            for i in sample_clients(17, s, n, m).unwrap() {
                counts[i] += 1;
            }
        }
        let p = m as f64 / n as f64;
        let sigma = (p * (1.0 - p) / rounds as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / rounds as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "frequency {freq} outside {p} ± {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn server_average_midpoint_and_identity() {
        let a = ParamVec::from(vec![0.0, 0.0]);
        let b = ParamVec::from(vec![2.0, 4.0]);
        let avg = server_average(vec![(0, a.clone()), (1, b)]).unwrap();
        assert_eq!(avg.as_slice(), &[1.0, 2.0]);
        let same = server_average(vec![(0, a.clone()), (1, a.clone())]).unwrap();
        assert_eq!(same, a);
        assert!(server_average(vec![]).is_err());
    }

    #[test]
    fn server_average_permutation_invariant_bitwise() {
        let models = vec![
            (2, ParamVec::from(vec![0.3, 1.7])),
            (0, ParamVec::from(vec![-1.1, 0.2])),
            (1, ParamVec::from(vec![10.0, -3.3])),
        ];
        let mut permuted = models.clone();
        permuted.rotate_left(1);
        let a = server_average(models).unwrap();
        let b = server_average(permuted).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn local_round_single_contraction() {
        // identity outer, f(w) = ½‖w‖²: one step of η = 0.1 scales by 0.9
        let task = quad_identity_task(1, vec![vec![0.0, 0.0]]);
        let cfg = base_cfg(1, "quadratic-dro", 2);
        let out = local_round(
            &task,
            0,
            &ParamVec::from(vec![1.0, 1.0]),
            &cfg,
            0,
            StepMode::Composition,
        )
        .unwrap();
        assert!((out.model[0] - 0.9).abs() < 1e-15);
        assert!((out.model[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn local_round_two_contractions() {
        let task = quad_identity_task(1, vec![vec![0.0, 0.0]]);
        let mut cfg = base_cfg(1, "quadratic-dro", 2);
        cfg.tau = 2;
        let out = local_round(
            &task,
            0,
            &ParamVec::from(vec![1.0, 1.0]),
            &cfg,
            0,
            StepMode::Composition,
        )
        .unwrap();
        assert!((out.model[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn local_round_zero_eta_is_identity() {
        let task = quad_identity_task(1, vec![vec![3.0, -1.0]]);
        let mut cfg = base_cfg(1, "quadratic-dro", 2);
        cfg.eta = 0.0; // config validation forbids this; the step itself is fine with it
        let start = ParamVec::from(vec![1.0, 2.0]);
        let out = local_round(&task, 0, &start, &cfg, 0, StepMode::Composition).unwrap();
        assert_eq!(out.model, start);
        assert_eq!(out.max_drift_sq, 0.0);
    }

    #[test]
    fn zero_rounds_returns_init() {
        let task = quad_identity_task(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut cfg = base_cfg(2, "quadratic-dro", 2);
        cfg.rounds = 0;
        let out = run_comfedl(&task, &cfg).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.final_model, ParamVec::zeros(2));
        assert!(!out.diverged);
    }

    #[test]
    fn identical_configs_replay_identically() {
        let mk = || {
            crate::tasks::synth::make_dro_quadratic(
                4,
                3,
                8,
                0.8,
                0.2,
                77,
                ScalarOuter::Exp { gamma: 1.0 },
            )
            .unwrap()
        };
        let mut cfg = base_cfg(4, "quadratic-dro", 3);
        cfg.rounds = 20;
        cfg.tau = 3;
        cfg.m = 2;
        cfg.b = Some(4);
        cfg.gamma = 1.0;
        cfg.eta = 0.03;
        let a = run_comfedl(&mk(), &cfg).unwrap();
        let b = run_comfedl(&mk(), &cfg).unwrap();
        assert_eq!(a.final_model, b.final_model);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.objective, rb.objective);
            assert_eq!(ra.client_losses, rb.client_losses);
            assert_eq!(ra.max_drift_sq, rb.max_drift_sq);
            assert_eq!(ra.grad_norm, rb.grad_norm);
        }
    }

    #[test]
    fn client_execution_order_does_not_matter() {
        let task = crate::tasks::synth::make_dro_quadratic(
            3,
            2,
            5,
            1.0,
            0.2,
            5,
            ScalarOuter::Exp { gamma: 1.0 },
        )
        .unwrap();
        let mut cfg = base_cfg(3, "quadratic-dro", 2);
        cfg.b = Some(2);
        cfg.tau = 2;
        let w = ParamVec::from(vec![0.4, -0.6]);
        let run_order = |order: &[usize]| -> ParamVec {
            let models: Vec<(usize, ParamVec)> = order
                .iter()
                .map(|&i| {
                    let o = local_round(&task, i, &w, &cfg, 0, StepMode::Composition).unwrap();
                    (o.client, o.model)
                })
                .collect();
            server_average(models).unwrap()
        };
        assert_eq!(run_order(&[0, 1, 2]), run_order(&[2, 0, 1]));
    }

    #[test]
    fn fedavg_equal_shards_match_unweighted_average() {
        let task = quad_identity_task(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut cfg = base_cfg(2, "quadratic-dro", 2);
        cfg.algorithm = Algorithm::Fedavg;
        cfg.rounds = 5;
        let out = run_fedavg(&task, &cfg).unwrap();
        // identical shard sizes: weighted = unweighted; both clients do plain
        // GD on ½‖w−c‖², so the average trajectory is the midpoint dynamics
        let mut w = ParamVec::zeros(2);
        for _ in 0..5 {
            let w0 = vec_step(&w, &[1.0, 0.0], 0.1);
            let w1 = vec_step(&w, &[0.0, 1.0], 0.1);
            w = server_average(vec![(0, w0), (1, w1)]).unwrap();
        }
        assert!(out.final_model.dist_sq(&w).unwrap() < 1e-28);
    }

    fn vec_step(w: &ParamVec, center: &[f64], eta: f64) -> ParamVec {
        let mut out = w.clone();
        let grad: ParamVec = w
            .as_slice()
            .iter()
            .zip(center)
            .map(|(wi, ci)| wi - ci)
            .collect();
        out.add_scaled(-eta, &grad).unwrap();
        out
    }

    #[test]
    fn divergence_stops_early_with_flag() {
        // exp outer with tiny γ and a huge starting loss blows past the limit
        let task = crate::tasks::synth::make_dro_quadratic(
            2,
            2,
            4,
            60.0,
            0.0,
            1,
            ScalarOuter::Exp { gamma: 0.01 },
        )
        .unwrap();
        let mut cfg = base_cfg(2, "quadratic-dro", 2);
        cfg.rounds = 50;
        cfg.eta = 10.0;
        let out = run_comfedl(&task, &cfg).unwrap();
        assert!(out.diverged);
        assert!(out.records.len() < 50);
    }

    #[test]
    fn oversized_batch_names_field() {
        let task = quad_identity_task(1, vec![vec![0.0, 0.0]]);
        let mut cfg = base_cfg(1, "quadratic-dro", 2);
        cfg.b = Some(99);
        match run_comfedl(&task, &cfg) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "b"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn drift_check_passes_on_stochastic_run() {
        let task = crate::tasks::synth::make_dro_quadratic(
            6,
            3,
            20,
            0.8,
            0.2,
            13,
            ScalarOuter::Exp { gamma: 1.0 },
        )
        .unwrap();
        let mut cfg = base_cfg(6, "quadratic-dro", 3);
        cfg.rounds = 60;
        cfg.tau = 5;
        cfg.m = 3;
        cfg.b = Some(4);
        cfg.gamma = 1.0;
        cfg.eta = 0.03;
        let out = run_comfedl(&task, &cfg).unwrap();
        assert!(!out.diverged);
        let report = drift_check_with_monitor(&out.records, &out.estimate, &cfg);
        assert!(report.pass, "report {report:?}");
        assert!(report.worst_ratio <= 1.0 + DRIFT_SLACK);
    }

    #[test]
    fn reweighting_invariant_holds() {
        let task = crate::tasks::synth::make_dro_quadratic(
            5,
            2,
            6,
            0.8,
            0.3,
            23,
            ScalarOuter::Exp { gamma: 1.0 },
        )
        .unwrap();
        let mut cfg = base_cfg(5, "quadratic-dro", 2);
        cfg.rounds = 30;
        cfg.tau = 2;
        cfg.b = Some(3);
        cfg.eta = 0.02;
        cfg.gamma = 1.0;
        let out = run_comfedl(&task, &cfg).unwrap();
        assert!(check_reweighting_invariant(&out.records));
    }
}
