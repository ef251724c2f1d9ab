//! Synthetic task generators: reproducible heterogeneous shards with no
//! external dataset dependency.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_stream, standard_normal, uniform, Purpose};
use crate::tasks::maml::{BaseSample, MamlOuter, MamlTask};
use crate::tasks::scalar::{SampleLoss, ScalarOuter, ScalarTask};
use crate::tasks::ClientShard;
use crate::vec::Vector;

fn normal_vec(rng: &mut impl Rng, d: usize, scale: f64) -> Vector {
    (0..d).map(|_| scale * standard_normal(rng)).collect()
}

/// Centered-quadratic shards: client i's samples are ½‖w − c‖² with centers
/// jittered around a client-specific base center, so clients disagree about
/// the minimizer and robust reweighting has something to trade off.
pub fn make_dro_quadratic(
    n: usize,
    d: usize,
    samples_per_client: usize,
    center_scale: f64,
    jitter: f64,
    seed: u64,
    outer: ScalarOuter,
) -> Result<ScalarTask> {
    if n == 0 || samples_per_client == 0 {
        return Err(Error::validation("n", "need clients and samples ≥ 1"));
    }
    let shards = (0..n)
        .map(|i| {
            let mut rng = derive_stream(seed, 0, i as u64, 0, Purpose::DataGen);
            let base = normal_vec(&mut rng, d, center_scale);
            let inner = (0..samples_per_client)
                .map(|_| {
                    let mut center = base.clone();
                    center
                        .add_scaled(1.0, &normal_vec(&mut rng, d, jitter))
                        .expect("same length");
                    SampleLoss::Centered { center }
                })
                .collect();
            ClientShard {
                client_id: i,
                inner,
                outer: vec![],
            }
        })
        .collect();
    ScalarTask::new(d, 1, outer, shards)
}

/// Binary logistic shards with per-client ground-truth weights spread around
/// a shared direction; labels carry inherent Bernoulli noise, so the task is
/// stochastic even at full batch.
pub fn make_logistic_dro(
    n: usize,
    d: usize,
    samples_per_client: usize,
    heterogeneity: f64,
    seed: u64,
    outer: ScalarOuter,
) -> Result<ScalarTask> {
    if n == 0 || samples_per_client == 0 {
        return Err(Error::validation("n", "need clients and samples ≥ 1"));
    }
    let mut shared_rng = derive_stream(seed, 0, u64::MAX, 0, Purpose::DataGen);
    let shared = normal_vec(&mut shared_rng, d, 1.0);
    let shards = (0..n)
        .map(|i| {
            let mut rng = derive_stream(seed, 0, i as u64, 0, Purpose::DataGen);
            let mut truth = shared.clone();
            truth
                .add_scaled(1.0, &normal_vec(&mut rng, d, heterogeneity))
                .expect("same length");
            let inner = (0..samples_per_client)
                .map(|_| {
                    let x = normal_vec(&mut rng, d, 1.0);
                    let z = x.dot(&truth).expect("same length");
                    let p = 1.0 / (1.0 + (-z).exp());
                    let label = if uniform(&mut rng, 0.0..1.0) < p { 1.0 } else { 0.0 };
                    SampleLoss::Logistic { x, label }
                })
                .collect();
            ClientShard {
                client_id: i,
                inner,
                outer: vec![],
            }
        })
        .collect();
    ScalarTask::new(d, 1, outer, shards)
}

/// Imbalanced multiclass classification shards: Gaussian class clusters with
/// means on a scaled coordinate simplex, one randomly chosen client holding
/// `dominant_size` samples and every other client `minority_size`.
///
/// With `rho = Some(ρ)` each client i additionally skews its label
/// distribution: class (i mod classes) with probability ρ, the rest sharing
/// (1 − ρ) evenly, so ρ = 1/classes is exactly uniform. With `rho = None`
/// labels are uniform and heterogeneity comes from small-shard variation.
#[allow(clippy::too_many_arguments)]
pub fn make_imbalanced_classification(
    n: usize,
    dominant_size: usize,
    minority_size: usize,
    d: usize,
    classes: usize,
    rho: Option<f64>,
    separation: f64,
    seed: u64,
    outer: ScalarOuter,
) -> Result<ScalarTask> {
    if n < 2 {
        return Err(Error::validation("n", "need at least 2 clients"));
    }
    if dominant_size == 0 || minority_size == 0 {
        return Err(Error::validation(
            "dominant_size",
            "shard sizes must be ≥ 1",
        ));
    }
    if classes < 2 {
        return Err(Error::validation("classes", "need at least 2 classes"));
    }
    if d < classes {
        return Err(Error::validation(
            "d",
            format!("need d ≥ classes to place class means (d = {d}, classes = {classes})"),
        ));
    }
    if let Some(r) = rho {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::validation("rho", "must lie in [0, 1]"));
        }
    }

    let mut pick_rng = derive_stream(seed, 0, u64::MAX, 0, Purpose::DataGen);
    let dominant_client = uniform(&mut pick_rng, 0..n);

    let shards = (0..n)
        .map(|i| {
            let mut rng = derive_stream(seed, 0, i as u64, 0, Purpose::DataGen);
            let size = if i == dominant_client {
                dominant_size
            } else {
                minority_size
            };
            let inner = (0..size)
                .map(|_| {
                    let class = match rho {
                        Some(r) => {
                            let dom = i % classes;
                            if uniform(&mut rng, 0.0..1.0) < r {
                                dom
                            } else {
                                // one of the remaining classes, uniformly
                                let k = uniform(&mut rng, 0..classes - 1);
                                if k >= dom {
                                    k + 1
                                } else {
                                    k
                                }
                            }
                        }
                        None => uniform(&mut rng, 0..classes),
                    };
                    let mut x = normal_vec(&mut rng, d, 1.0);
                    x.as_mut_slice()[class] += separation;
                    SampleLoss::CrossEntropy { x, class }
                })
                .collect();
            ClientShard {
                client_id: i,
                inner,
                outer: vec![],
            }
        })
        .collect();
    ScalarTask::new(d, classes, outer, shards)
}

fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Vec<Vec<f64>> {
    // Gram-Schmidt on Gaussian columns; retry on (measure-zero) degeneracy
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= proj * bi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

/// Quadratic meta-learning tasks: each task's base loss is ½wᵀAw − bᵀw with
/// a well-conditioned random symmetric positive definite A (eigenvalues in
/// [`eig_lo`, `eig_hi`]) and its own linear term, and per-sample variation is
/// a symmetric psd blend so every sample stays a valid quadratic.
#[allow(clippy::too_many_arguments)]
pub fn make_maml_quadratic(
    n: usize,
    d: usize,
    support: usize,
    query: usize,
    eig_lo: f64,
    eig_hi: f64,
    seed: u64,
    eta_in: f64,
    outer: MamlOuter,
) -> Result<MamlTask> {
    if n == 0 || support == 0 || query == 0 {
        return Err(Error::validation("n", "need tasks and samples ≥ 1"));
    }
    if !(0.0 < eig_lo && eig_lo <= eig_hi) {
        return Err(Error::validation("eig_lo", "need 0 < eig_lo ≤ eig_hi"));
    }
    let jitter = 0.1;
    let shards = (0..n)
        .map(|i| {
            let mut rng = derive_stream(seed, 0, i as u64, 0, Purpose::DataGen);
            let q = random_orthogonal(&mut rng, d);
            let eigs: Vec<f64> = (0..d).map(|_| uniform(&mut rng, eig_lo..=eig_hi)).collect();
            let mut base_a = vec![0.0; d * d];
            for (k, qk) in q.iter().enumerate() {
                for r in 0..d {
                    for c in 0..d {
                        base_a[r * d + c] += eigs[k] * qk[r] * qk[c];
                    }
                }
            }
            // exact symmetrization so accumulated rounding cannot trip the
            // construction-time symmetry check
            for r in 0..d {
                for c in (r + 1)..d {
                    let m = 0.5 * (base_a[r * d + c] + base_a[c * d + r]);
                    base_a[r * d + c] = m;
                    base_a[c * d + r] = m;
                }
            }
            let base_b = normal_vec(&mut rng, d, 0.3);

            let mut draw = |count: usize| -> Result<Vec<BaseSample>> {
                (0..count)
                    .map(|_| {
                        let z: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
                        let mut a = base_a.iter().map(|v| (1.0 - jitter) * v).collect::<Vec<_>>();
                        // psd rank-one perturbation scaled to keep the mean near A
                        let mean_eig = (eig_lo + eig_hi) / 2.0;
                        let scale = jitter * mean_eig / d as f64;
                        for r in 0..d {
                            for c in 0..d {
                                a[r * d + c] += scale * z[r] * z[c];
                            }
                        }
                        let mut b = base_b.clone();
                        b.add_scaled(1.0, &normal_vec(&mut rng, d, 0.05))?;
                        BaseSample::quadratic(a, b)
                    })
                    .collect()
            };
            Ok(ClientShard {
                client_id: i,
                inner: draw(support)?,
                outer: draw(query)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MamlTask::new(d, eta_in, outer, shards)
}

/// Logistic meta-learning tasks: per-task ground-truth weights spread around
/// a shared direction, disjoint support and query sample sets.
#[allow(clippy::too_many_arguments)]
pub fn make_maml_logistic(
    n: usize,
    d: usize,
    support: usize,
    query: usize,
    heterogeneity: f64,
    seed: u64,
    eta_in: f64,
    outer: MamlOuter,
) -> Result<MamlTask> {
    if n == 0 || support == 0 || query == 0 {
        return Err(Error::validation("n", "need tasks and samples ≥ 1"));
    }
    let mut shared_rng = derive_stream(seed, 0, u64::MAX, 0, Purpose::DataGen);
    let shared = normal_vec(&mut shared_rng, d, 1.0);
    let shards = (0..n)
        .map(|i| {
            let mut rng = derive_stream(seed, 0, i as u64, 0, Purpose::DataGen);
            let mut truth = shared.clone();
            truth
                .add_scaled(1.0, &normal_vec(&mut rng, d, heterogeneity))
                .expect("same length");
            let mut draw = |count: usize| -> Vec<BaseSample> {
                (0..count)
                    .map(|_| {
                        let x = normal_vec(&mut rng, d, 1.0);
                        let z = x.dot(&truth).expect("same length");
                        let p = 1.0 / (1.0 + (-z).exp());
                        let label = if uniform(&mut rng, 0.0..1.0) < p { 1.0 } else { 0.0 };
                        BaseSample::Logistic { x, label }
                    })
                    .collect()
            };
            ClientShard {
                client_id: i,
                inner: draw(support),
                outer: draw(query),
            }
        })
        .collect();
    MamlTask::new(d, eta_in, outer, shards)
}
