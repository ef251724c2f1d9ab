//! Scalar-inner composition tasks (p = 1).
//!
//! The inner mapping is a batch-mean scalar loss and the outer function is
//! either the identity (plain single-level training) or the robust wrapper
//! g(y) = exp(y/γ), which is deterministic given y, so these tasks carry no
//! outer sample set.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tasks::{validate_batch, ClientShard, CompositionTask, EstimatorOutput, EXP_CLAMP};
use crate::vec::{InnerVec, ParamVec, Vector};

/// One sample record of a scalar loss family.
#[derive(Clone, Debug)]
pub enum SampleLoss {
    /// ½‖w − c‖² around a per-sample center.
    Centered { center: Vector },
    /// Squared error (wᵀx − y)².
    LeastSquares { x: Vector, y: f64 },
    /// Binary cross entropy with logit wᵀx and label in {0, 1}.
    Logistic { x: Vector, label: f64 },
    /// Multiclass cross entropy; w is read as a (classes × features)
    /// row-major matrix of logit weights.
    CrossEntropy { x: Vector, class: usize },
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(z)) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl SampleLoss {
    pub fn value(&self, w: &[f64], classes: usize) -> f64 {
        match self {
            SampleLoss::Centered { center } => {
                0.5 * w
                    .iter()
                    .zip(center.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            }
            SampleLoss::LeastSquares { x, y } => {
                let r = dot(w, x.as_slice()) - y;
                r * r
            }
            SampleLoss::Logistic { x, label } => {
                let z = dot(w, x.as_slice());
                softplus(z) - label * z
            }
            SampleLoss::CrossEntropy { x, class } => {
                let z = logits(w, x.as_slice(), classes);
                log_sum_exp(&z) - z[*class]
            }
        }
    }

    /// Accumulates `coeff · ∇loss(w)` into `out`.
    pub fn add_grad(&self, w: &[f64], classes: usize, coeff: f64, out: &mut [f64]) {
        match self {
            SampleLoss::Centered { center } => {
                for ((o, wi), ci) in out.iter_mut().zip(w).zip(center.as_slice()) {
                    *o += coeff * (wi - ci);
                }
            }
            SampleLoss::LeastSquares { x, y } => {
                let r = dot(w, x.as_slice()) - y;
                for (o, xi) in out.iter_mut().zip(x.as_slice()) {
                    *o += coeff * 2.0 * r * xi;
                }
            }
            SampleLoss::Logistic { x, label } => {
                let z = dot(w, x.as_slice());
                let r = sigmoid(z) - label;
                for (o, xi) in out.iter_mut().zip(x.as_slice()) {
                    *o += coeff * r * xi;
                }
            }
            SampleLoss::CrossEntropy { x, class } => {
                let z = logits(w, x.as_slice(), classes);
                let p = softmax(&z);
                let d = x.len();
                for (k, pk) in p.iter().enumerate() {
                    let r = pk - if k == *class { 1.0 } else { 0.0 };
                    for (j, xj) in x.as_slice().iter().enumerate() {
                        out[k * d + j] += coeff * r * xj;
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logits(w: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let d = x.len();
    (0..classes).map(|k| dot(&w[k * d..(k + 1) * d], x)).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Outer function of a scalar task.
#[derive(Clone, Debug)]
pub enum ScalarOuter {
    /// g(y) = y; the composition degenerates to plain averaging.
    Identity,
    /// g(y) = exp(y/γ), the robust reweighting wrapper.
    Exp { gamma: f64 },
}

/// Composition task with scalar inner losses.
pub struct ScalarTask {
    dim: usize,
    classes: usize,
    outer: ScalarOuter,
    shards: Vec<ClientShard<SampleLoss>>,
    clamp_events: AtomicU64,
}

impl ScalarTask {
    pub fn new(
        dim: usize,
        classes: usize,
        outer: ScalarOuter,
        shards: Vec<ClientShard<SampleLoss>>,
    ) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::validation("shards", "need at least one client"));
        }
        if let ScalarOuter::Exp { gamma } = outer {
            if gamma <= 0.0 {
                return Err(Error::validation("gamma", "must be > 0"));
            }
        }
        for (i, s) in shards.iter().enumerate() {
            if s.inner.is_empty() {
                return Err(Error::validation(
                    "shards",
                    format!("client {i} has an empty inner sample set"),
                ));
            }
        }
        Ok(ScalarTask {
            dim,
            classes,
            outer,
            shards,
            clamp_events: AtomicU64::new(0),
        })
    }

    pub fn outer(&self) -> &ScalarOuter {
        &self.outer
    }

    pub fn shard_sample(&self, client: usize, idx: usize) -> &SampleLoss {
        &self.shards[client].inner[idx]
    }

    /// exp(t) with the exponent clamped at [`EXP_CLAMP`]; clamps are counted.
    fn exp_clamped(&self, t: f64) -> f64 {
        if t > EXP_CLAMP {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
            EXP_CLAMP.exp()
        } else {
            t.exp()
        }
    }

    /// Batch-mean loss value.
    fn batch_value(&self, client: usize, w: &[f64], batch: &[usize]) -> f64 {
        let shard = &self.shards[client];
        let sum: f64 = batch
            .iter()
            .map(|&j| shard.inner[j].value(w, self.classes))
            .sum();
        sum / batch.len() as f64
    }

    /// Batch-mean loss gradient (length = full parameter dimension).
    fn batch_grad(&self, client: usize, w: &[f64], batch: &[usize]) -> ParamVec {
        let shard = &self.shards[client];
        let mut g = vec![0.0; self.dim * self.classes.max(1)];
        let coeff = 1.0 / batch.len() as f64;
        for &j in batch {
            shard.inner[j].add_grad(w, self.classes, coeff, &mut g);
        }
        ParamVec::from(g)
    }

    fn outer_coeff(&self, y: f64) -> f64 {
        match self.outer {
            ScalarOuter::Identity => 1.0,
            ScalarOuter::Exp { gamma } => self.exp_clamped(y / gamma) / gamma,
        }
    }
}

impl CompositionTask for ScalarTask {
    fn clients(&self) -> usize {
        self.shards.len()
    }

    fn param_dim(&self) -> usize {
        self.dim * self.classes.max(1)
    }

    fn inner_dim(&self) -> usize {
        1
    }

    fn inner_len(&self, client: usize) -> usize {
        self.shards[client].inner.len()
    }

    fn outer_len(&self, _client: usize) -> usize {
        0
    }

    fn outer_stochastic(&self) -> bool {
        false
    }

    fn inner_value(&self, client: usize, w: &ParamVec, batch: &[usize]) -> Result<InnerVec> {
        validate_batch(batch, self.inner_len(client), "inner_value")?;
        Ok(InnerVec::scalar(self.batch_value(client, w.as_slice(), batch)))
    }

    fn inner_vjp(
        &self,
        client: usize,
        w: &ParamVec,
        batch: &[usize],
        v: &InnerVec,
    ) -> Result<ParamVec> {
        validate_batch(batch, self.inner_len(client), "inner_vjp")?;
        if v.len() != 1 {
            return Err(Error::DimensionMismatch {
                context: "inner_vjp (p = 1)",
                left: v.len(),
                right: 1,
            });
        }
        Ok(self.batch_grad(client, w.as_slice(), batch).scaled(v[0]))
    }

    fn outer_grad(&self, _client: usize, y: &InnerVec, _batch: &[usize]) -> Result<InnerVec> {
        Ok(InnerVec::scalar(self.outer_coeff(y[0])))
    }

    fn outer_value(&self, _client: usize, y: &InnerVec, _batch: &[usize]) -> Result<f64> {
        Ok(match self.outer {
            ScalarOuter::Identity => y[0],
            ScalarOuter::Exp { gamma } => self.exp_clamped(y[0] / gamma),
        })
    }

    fn inner_jacobian_frob(&self, client: usize, w: &ParamVec, batch: &[usize]) -> Result<f64> {
        validate_batch(batch, self.inner_len(client), "inner_jacobian_frob")?;
        Ok(self.batch_grad(client, w.as_slice(), batch).norm())
    }

    fn client_loss(&self, client: usize, w: &ParamVec) -> Result<f64> {
        let batch = crate::tasks::full_batch(self.inner_len(client));
        Ok(self.batch_value(client, w.as_slice(), &batch))
    }

    fn plain_grad(&self, client: usize, w: &ParamVec, batch: &[usize]) -> Result<ParamVec> {
        validate_batch(batch, self.inner_len(client), "plain_grad")?;
        Ok(self.batch_grad(client, w.as_slice(), batch))
    }

    fn client_grad_full(&self, client: usize, w: &ParamVec) -> Result<ParamVec> {
        // direct chain rule: ∇F^i = g'(f^i(w)) ∇f^i(w)
        let batch = crate::tasks::full_batch(self.inner_len(client));
        let f = self.batch_value(client, w.as_slice(), &batch);
        let coeff = self.outer_coeff(f);
        Ok(self.batch_grad(client, w.as_slice(), &batch).scaled(coeff))
    }

    fn estimator_with_norms(
        &self,
        client: usize,
        w: &ParamVec,
        inner_batch: &[usize],
        _outer_batch: &[usize],
    ) -> Result<EstimatorOutput> {
        validate_batch(inner_batch, self.inner_len(client), "estimator")?;
        let f = self.batch_value(client, w.as_slice(), inner_batch);
        let grad = self.batch_grad(client, w.as_slice(), inner_batch);
        let coeff = self.outer_coeff(f);
        let jac = grad.norm();
        Ok(EstimatorOutput {
            u: grad.scaled(coeff),
            inner_jac_frob: jac,
            outer_grad_norm: coeff.abs(),
        })
    }

    fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }
}
