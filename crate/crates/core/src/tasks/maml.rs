//! Meta-learning composition tasks (p = d).
//!
//! The inner mapping is one gradient step on a per-task base loss,
//! y = w − η_in·∇f_i(w; support batch), and the outer function evaluates the
//! base loss at the adapted point on a query batch, optionally wrapped in the
//! robust exp(·/γ). The inner Jacobian is I − η_in·∇²f_i(w), so the task
//! needs base losses with analytic Hessian-vector products: quadratics
//! (½wᵀAw − bᵀw with A symmetric psd) and logistic regression (matrix-free
//! xᵀσ′xxᵀ terms).

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tasks::{validate_batch, ClientShard, CompositionTask, EstimatorOutput, EXP_CLAMP};
use crate::vec::{InnerVec, ParamVec, Vector};

/// One sample record of a base loss with analytic gradient and HVP.
#[derive(Clone, Debug)]
pub enum BaseSample {
    /// ½wᵀAw − bᵀw with `a` a row-major d×d symmetric matrix.
    Quadratic { a: Vec<f64>, b: Vector },
    /// Binary cross entropy with logit wᵀx and label in {0, 1}.
    Logistic { x: Vector, label: f64 },
}

impl BaseSample {
    /// Builds a quadratic sample, rejecting non-symmetric matrices.
    pub fn quadratic(a: Vec<f64>, b: Vector) -> Result<Self> {
        let d = b.len();
        if a.len() != d * d {
            return Err(Error::DimensionMismatch {
                context: "quadratic sample matrix",
                left: a.len(),
                right: d * d,
            });
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if (a[i * d + j] - a[j * d + i]).abs() > 1e-12 {
                    return Err(Error::validation(
                        "a",
                        format!("matrix not symmetric at ({i}, {j})"),
                    ));
                }
            }
        }
        Ok(BaseSample::Quadratic { a, b })
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        match self {
            BaseSample::Quadratic { a, b } => {
                let d = b.len();
                let mut quad = 0.0;
                for i in 0..d {
                    let row = &a[i * d..(i + 1) * d];
                    let aw: f64 = row.iter().zip(w).map(|(x, y)| x * y).sum();
                    quad += w[i] * aw;
                }
                0.5 * quad - b.as_slice().iter().zip(w).map(|(x, y)| x * y).sum::<f64>()
            }
            BaseSample::Logistic { x, label } => {
                let z: f64 = x.as_slice().iter().zip(w).map(|(a, b)| a * b).sum();
                softplus(z) - label * z
            }
        }
    }

    /// Accumulates `coeff · ∇f(w)` into `out`.
    pub fn add_grad(&self, w: &[f64], coeff: f64, out: &mut [f64]) {
        match self {
            BaseSample::Quadratic { a, b } => {
                let d = b.len();
                for i in 0..d {
                    let row = &a[i * d..(i + 1) * d];
                    let aw: f64 = row.iter().zip(w).map(|(x, y)| x * y).sum();
                    out[i] += coeff * (aw - b[i]);
                }
            }
            BaseSample::Logistic { x, label } => {
                let z: f64 = x.as_slice().iter().zip(w).map(|(a, b)| a * b).sum();
                let r = sigmoid(z) - label;
                for (o, xi) in out.iter_mut().zip(x.as_slice()) {
                    *o += coeff * r * xi;
                }
            }
        }
    }

    /// Accumulates `coeff · ∇²f(w)·v` into `out`, matrix-free.
    pub fn add_hvp(&self, w: &[f64], v: &[f64], coeff: f64, out: &mut [f64]) {
        match self {
            BaseSample::Quadratic { a, b } => {
                let d = b.len();
                for i in 0..d {
                    let row = &a[i * d..(i + 1) * d];
                    let av: f64 = row.iter().zip(v).map(|(x, y)| x * y).sum();
                    out[i] += coeff * av;
                }
            }
            BaseSample::Logistic { x, .. } => {
                let z: f64 = x.as_slice().iter().zip(w).map(|(a, b)| a * b).sum();
                let s = sigmoid(z);
                let xv: f64 = x.as_slice().iter().zip(v).map(|(a, b)| a * b).sum();
                let c = coeff * s * (1.0 - s) * xv;
                for (o, xi) in out.iter_mut().zip(x.as_slice()) {
                    *o += c * xi;
                }
            }
        }
    }

    /// Accumulates `coeff · ∇²f(w)` into the row-major d×d buffer.
    fn add_hessian(&self, w: &[f64], coeff: f64, out: &mut [f64]) {
        let d = w.len();
        match self {
            BaseSample::Quadratic { a, .. } => {
                for (o, v) in out.iter_mut().zip(a) {
                    *o += coeff * v;
                }
            }
            BaseSample::Logistic { x, .. } => {
                let z: f64 = x.as_slice().iter().zip(w).map(|(a, b)| a * b).sum();
                let s = sigmoid(z);
                let c = coeff * s * (1.0 - s);
                let xs = x.as_slice();
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] += c * xs[i] * xs[j];
                    }
                }
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Outer function applied to the adapted point.
#[derive(Clone, Debug)]
pub enum MamlOuter {
    /// g(y) = f_i(y; query batch): the plain one-step meta objective.
    Plain,
    /// g(y) = exp(f_i(y; query batch)/γ): the robust reweighting wrapper.
    Exp { gamma: f64 },
}

/// Meta-learning composition task: inner shards are support sets, outer
/// shards are query sets.
pub struct MamlTask {
    dim: usize,
    inner_step: f64,
    outer: MamlOuter,
    shards: Vec<ClientShard<BaseSample>>,
    clamp_events: AtomicU64,
}

impl MamlTask {
    pub fn new(
        dim: usize,
        inner_step: f64,
        outer: MamlOuter,
        shards: Vec<ClientShard<BaseSample>>,
    ) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::validation("shards", "need at least one task"));
        }
        if !(inner_step >= 0.0 && inner_step.is_finite()) {
            return Err(Error::validation("eta_in", "must be finite and ≥ 0"));
        }
        if let MamlOuter::Exp { gamma } = outer {
            if gamma <= 0.0 {
                return Err(Error::validation("gamma", "must be > 0"));
            }
        }
        for (i, s) in shards.iter().enumerate() {
            if s.inner.is_empty() || s.outer.is_empty() {
                return Err(Error::validation(
                    "shards",
                    format!("task {i} needs nonempty support and query sets"),
                ));
            }
        }
        Ok(MamlTask {
            dim,
            inner_step,
            outer,
            shards,
            clamp_events: AtomicU64::new(0),
        })
    }

    pub fn inner_step(&self) -> f64 {
        self.inner_step
    }

    /// Full query-batch base loss at an arbitrary point.
    pub fn query_loss(&self, client: usize, at: &ParamVec) -> Result<f64> {
        let shard = &self.shards[client];
        Ok(Self::batch_value(
            &shard.outer,
            &crate::tasks::full_batch(shard.outer.len()),
            at.as_slice(),
        ))
    }

    /// Full support-batch base gradient at an arbitrary point.
    pub fn support_grad(&self, client: usize, at: &ParamVec) -> Result<ParamVec> {
        let shard = &self.shards[client];
        Ok(ParamVec::from(Self::batch_grad(
            &shard.inner,
            &crate::tasks::full_batch(shard.inner.len()),
            at.as_slice(),
            self.dim,
        )))
    }

    fn exp_clamped(&self, t: f64) -> f64 {
        if t > EXP_CLAMP {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
            EXP_CLAMP.exp()
        } else {
            t.exp()
        }
    }

    fn batch_grad(samples: &[BaseSample], batch: &[usize], w: &[f64], dim: usize) -> Vec<f64> {
        let mut g = vec![0.0; dim];
        let coeff = 1.0 / batch.len() as f64;
        for &j in batch {
            samples[j].add_grad(w, coeff, &mut g);
        }
        g
    }

    fn batch_value(samples: &[BaseSample], batch: &[usize], w: &[f64]) -> f64 {
        batch.iter().map(|&j| samples[j].value(w)).sum::<f64>() / batch.len() as f64
    }

    /// One-step adaptation y = w − η_in·∇f_i(w; batch).
    pub fn adapt(&self, client: usize, w: &ParamVec, batch: &[usize]) -> Result<ParamVec> {
        let shard = &self.shards[client];
        validate_batch(batch, shard.inner.len(), "adapt")?;
        let grad = Self::batch_grad(&shard.inner, batch, w.as_slice(), self.dim);
        let mut y = w.clone();
        y.add_scaled(-self.inner_step, &ParamVec::from(grad))?;
        Ok(y)
    }

    /// (I − η_in·∇²f_i(w; batch))·v. The batch-mean Hessian is symmetric, so
    /// this is both the Jacobian-vector and the transposed-Jacobian product.
    pub fn adapt_vjp(
        &self,
        client: usize,
        w: &ParamVec,
        batch: &[usize],
        v: &ParamVec,
    ) -> Result<ParamVec> {
        let shard = &self.shards[client];
        validate_batch(batch, shard.inner.len(), "adapt_vjp")?;
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "adapt_vjp",
                left: v.len(),
                right: self.dim,
            });
        }
        let mut hv = vec![0.0; self.dim];
        let coeff = 1.0 / batch.len() as f64;
        for &j in batch {
            shard.inner[j].add_hvp(w.as_slice(), v.as_slice(), coeff, &mut hv);
        }
        let mut out = v.clone();
        out.add_scaled(-self.inner_step, &ParamVec::from(hv))?;
        Ok(out)
    }

    /// Outer gradient coefficient and query-batch gradient at the adapted
    /// point, shared by `outer_grad` and the fused estimator.
    fn outer_parts(&self, client: usize, y: &[f64], batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        let shard = &self.shards[client];
        validate_batch(batch, shard.outer.len(), "outer_grad")?;
        let grad = Self::batch_grad(&shard.outer, batch, y, self.dim);
        let coeff = match self.outer {
            MamlOuter::Plain => 1.0,
            MamlOuter::Exp { gamma } => {
                let f = Self::batch_value(&shard.outer, batch, y);
                self.exp_clamped(f / gamma) / gamma
            }
        };
        Ok((coeff, grad))
    }
}

impl CompositionTask for MamlTask {
    fn clients(&self) -> usize {
        self.shards.len()
    }

    fn param_dim(&self) -> usize {
        self.dim
    }

    fn inner_dim(&self) -> usize {
        self.dim
    }

    fn inner_len(&self, client: usize) -> usize {
        self.shards[client].inner.len()
    }

    fn outer_len(&self, client: usize) -> usize {
        self.shards[client].outer.len()
    }

    fn outer_stochastic(&self) -> bool {
        true
    }

    fn inner_value(&self, client: usize, w: &ParamVec, batch: &[usize]) -> Result<InnerVec> {
        self.adapt(client, w, batch)
    }

    fn inner_vjp(
        &self,
        client: usize,
        w: &ParamVec,
        batch: &[usize],
        v: &InnerVec,
    ) -> Result<ParamVec> {
        self.adapt_vjp(client, w, batch, v)
    }

    fn outer_grad(&self, client: usize, y: &InnerVec, batch: &[usize]) -> Result<InnerVec> {
        let (coeff, grad) = self.outer_parts(client, y.as_slice(), batch)?;
        Ok(InnerVec::from(grad).scaled(coeff))
    }

    fn outer_value(&self, client: usize, y: &InnerVec, batch: &[usize]) -> Result<f64> {
        let shard = &self.shards[client];
        validate_batch(batch, shard.outer.len(), "outer_value")?;
        let f = Self::batch_value(&shard.outer, batch, y.as_slice());
        Ok(match self.outer {
            MamlOuter::Plain => f,
            MamlOuter::Exp { gamma } => self.exp_clamped(f / gamma),
        })
    }

    fn inner_jacobian_frob(&self, client: usize, w: &ParamVec, batch: &[usize]) -> Result<f64> {
        let shard = &self.shards[client];
        validate_batch(batch, shard.inner.len(), "inner_jacobian_frob")?;
        let d = self.dim;
        let mut hess = vec![0.0; d * d];
        let coeff = 1.0 / batch.len() as f64;
        for &j in batch {
            shard.inner[j].add_hessian(w.as_slice(), coeff, &mut hess);
        }
        let mut sum = 0.0;
        for i in 0..d {
            for j in 0..d {
                let jac = if i == j { 1.0 } else { 0.0 } - self.inner_step * hess[i * d + j];
                sum += jac * jac;
            }
        }
        Ok(sum.sqrt())
    }

    fn client_loss(&self, client: usize, w: &ParamVec) -> Result<f64> {
        let shard = &self.shards[client];
        let y = self.adapt(client, w, &crate::tasks::full_batch(shard.inner.len()))?;
        Ok(Self::batch_value(
            &shard.outer,
            &crate::tasks::full_batch(shard.outer.len()),
            y.as_slice(),
        ))
    }

    fn plain_grad(&self, client: usize, w: &ParamVec, batch: &[usize]) -> Result<ParamVec> {
        let shard = &self.shards[client];
        validate_batch(batch, shard.inner.len(), "plain_grad")?;
        Ok(ParamVec::from(Self::batch_grad(
            &shard.inner,
            batch,
            w.as_slice(),
            self.dim,
        )))
    }

    fn client_grad_full(&self, client: usize, w: &ParamVec) -> Result<ParamVec> {
        // direct route: y = w − η∇f(w); u = (I − η∇²f(w))·[g'·∇f(y)]
        let shard = &self.shards[client];
        let inner_full = crate::tasks::full_batch(shard.inner.len());
        let outer_full = crate::tasks::full_batch(shard.outer.len());
        let y = self.adapt(client, w, &inner_full)?;
        let (coeff, grad_y) = self.outer_parts(client, y.as_slice(), &outer_full)?;
        let pulled = Vector::from(grad_y).scaled(coeff);
        self.adapt_vjp(client, w, &inner_full, &pulled)
    }

    fn estimator_with_norms(
        &self,
        client: usize,
        w: &ParamVec,
        inner_batch: &[usize],
        outer_batch: &[usize],
    ) -> Result<EstimatorOutput> {
        let y = self.adapt(client, w, inner_batch)?;
        let (coeff, grad_y) = self.outer_parts(client, y.as_slice(), outer_batch)?;
        let v = Vector::from(grad_y).scaled(coeff);
        let u = self.adapt_vjp(client, w, inner_batch, &v)?;
        let jac = self.inner_jacobian_frob(client, w, inner_batch)?;
        Ok(EstimatorOutput {
            outer_grad_norm: v.norm(),
            inner_jac_frob: jac,
            u,
        })
    }

    fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }
}
