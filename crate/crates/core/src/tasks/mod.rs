//! Two-level composition tasks over finite client shards.
//!
//! A task exposes, per client i, the stochastic inner mapping f^i (value and
//! vector-Jacobian product over a sample batch) and the stochastic outer
//! function g^i (value and gradient), plus exact full-batch versions of each
//! for diagnostics. The per-client gradient estimator
//!
//! ```text
//! u = (∇f^i_B(w))ᵀ ∇g^i_B̃(f^i_B(w))
//! ```
//!
//! reuses the same inner batch B for the inner value and the inner Jacobian,
//! which makes it biased for minibatches when g is nonlinear and exact for
//! full batches.

pub mod maml;
pub mod scalar;
pub mod synth;

pub use maml::{BaseSample, MamlOuter, MamlTask};
pub use scalar::{SampleLoss, ScalarOuter, ScalarTask};

use crate::error::{Error, Result};
use crate::vec::{InnerVec, ParamVec};

/// Exponent cap for the robust exp(·/γ) wrapper. Each client only sees its
/// own loss, so no cross-client normalization is possible inside the local
/// loop; clamping preserves the update direction and every clamp is counted
/// in telemetry.
pub const EXP_CLAMP: f64 = 40.0;

/// Finite local sample sets standing for the two per-client distributions.
/// `inner` is always nonempty; `outer` is empty exactly when the task family
/// has a deterministic outer function.
#[derive(Clone, Debug)]
pub struct ClientShard<S> {
    pub client_id: usize,
    pub inner: Vec<S>,
    pub outer: Vec<S>,
}

/// A pluggable two-level composition task.
pub trait CompositionTask: Send + Sync {
    fn clients(&self) -> usize;
    /// Model parameter dimension d.
    fn param_dim(&self) -> usize;
    /// Inner output dimension p (1 for scalar-loss tasks, d for MAML tasks).
    fn inner_dim(&self) -> usize;
    fn inner_len(&self, client: usize) -> usize;
    /// Outer sample count; 0 when the outer function is deterministic.
    fn outer_len(&self, client: usize) -> usize;
    /// Whether the outer function is an expectation over outer samples.
    fn outer_stochastic(&self) -> bool;

    /// Batch-mean inner value (1/|B|) Σ_j f^i(w; ξ_j). Full batch ⇒ exact f^i(w).
    fn inner_value(&self, client: usize, w: &ParamVec, batch: &[usize]) -> Result<InnerVec>;

    /// (∇f^i_B(w))ᵀ v for the batch-mean Jacobian.
    fn inner_vjp(
        &self,
        client: usize,
        w: &ParamVec,
        batch: &[usize],
        v: &InnerVec,
    ) -> Result<ParamVec>;

    /// Batch-mean outer gradient (1/|B̃|) Σ_j ∇g^i(y; ζ_j). The batch is
    /// ignored when the outer function is deterministic.
    fn outer_grad(&self, client: usize, y: &InnerVec, batch: &[usize]) -> Result<InnerVec>;

    /// Batch-mean outer value g^i(y).
    fn outer_value(&self, client: usize, y: &InnerVec, batch: &[usize]) -> Result<f64>;

    /// Frobenius norm of the batch-mean inner Jacobian at w.
    fn inner_jacobian_frob(&self, client: usize, w: &ParamVec, batch: &[usize]) -> Result<f64>;

    /// The scalar per-client loss used for reweighting diagnostics: the
    /// argument of the exp(·/γ) wrapper where one exists, the raw full-batch
    /// loss otherwise. For MAML tasks this is the post-adaptation base loss.
    fn client_loss(&self, client: usize, w: &ParamVec) -> Result<f64>;

    /// Gradient of the plain single-level per-client loss over a batch; what
    /// a non-compositional local-SGD baseline descends.
    fn plain_grad(&self, client: usize, w: &ParamVec, batch: &[usize]) -> Result<ParamVec>;

    /// Closed-form full-batch ∇F^i(w) = (∇g^i(f^i(w)))ᵀ∇f^i(w), written as a
    /// direct per-family expression so it is an independent route from the
    /// estimator composition.
    fn client_grad_full(&self, client: usize, w: &ParamVec) -> Result<ParamVec>;

    /// Gradient estimator plus the norms observed along the way (batch-mean
    /// Jacobian Frobenius norm, outer gradient norm), computed in one pass.
    fn estimator_with_norms(
        &self,
        client: usize,
        w: &ParamVec,
        inner_batch: &[usize],
        outer_batch: &[usize],
    ) -> Result<EstimatorOutput> {
        let y = self.inner_value(client, w, inner_batch)?;
        let v = self.outer_grad(client, &y, outer_batch)?;
        let u = self.inner_vjp(client, w, inner_batch, &v)?;
        let jac = self.inner_jacobian_frob(client, w, inner_batch)?;
        Ok(EstimatorOutput {
            outer_grad_norm: v.norm(),
            inner_jac_frob: jac,
            u,
        })
    }

    /// Cumulative count of clamped exponent evaluations.
    fn clamp_events(&self) -> u64 {
        0
    }
}

/// Estimator value with the norm observations used for constant estimation.
#[derive(Clone, Debug)]
pub struct EstimatorOutput {
    pub u: ParamVec,
    pub inner_jac_frob: f64,
    pub outer_grad_norm: f64,
}

/// Indices 0..len, the deterministic full batch.
pub fn full_batch(len: usize) -> Vec<usize> {
    (0..len).collect()
}

pub(crate) fn validate_batch(batch: &[usize], len: usize, what: &'static str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch(what));
    }
    if let Some(&bad) = batch.iter().find(|&&j| j >= len) {
        return Err(Error::validation(
            what,
            format!("sample index {bad} out of range (shard has {len})"),
        ));
    }
    Ok(())
}

/// The biased stochastic gradient estimator u of one local step: outer
/// gradient at the batch inner value, pulled back through the batch inner
/// Jacobian. The same `inner_batch` feeds both the value and the Jacobian.
pub fn client_grad_estimator(
    task: &dyn CompositionTask,
    client: usize,
    w: &ParamVec,
    inner_batch: &[usize],
    outer_batch: &[usize],
) -> Result<ParamVec> {
    let y = task.inner_value(client, w, inner_batch)?;
    let v = task.outer_grad(client, &y, outer_batch)?;
    task.inner_vjp(client, w, inner_batch, &v)
}

fn full_outer_batch(task: &dyn CompositionTask, client: usize) -> Vec<usize> {
    if task.outer_stochastic() {
        full_batch(task.outer_len(client))
    } else {
        vec![0] // ignored by deterministic outer functions
    }
}

/// Exact F^i(w) with full batches everywhere.
pub fn client_objective_full(
    task: &dyn CompositionTask,
    client: usize,
    w: &ParamVec,
) -> Result<f64> {
    let y = task.inner_value(client, w, &full_batch(task.inner_len(client)))?;
    task.outer_value(client, &y, &full_outer_batch(task, client))
}

/// Exact full-batch ∇F^i(w) via the estimator composition.
pub fn client_grad_estimator_full(
    task: &dyn CompositionTask,
    client: usize,
    w: &ParamVec,
) -> Result<ParamVec> {
    client_grad_estimator(
        task,
        client,
        w,
        &full_batch(task.inner_len(client)),
        &full_outer_batch(task, client),
    )
}

/// Exact deterministic F(w) = (1/n) Σ_i g^i(f^i(w)), full batches everywhere.
pub fn full_objective(task: &dyn CompositionTask, w: &ParamVec) -> Result<f64> {
    let n = task.clients();
    let mut sum = 0.0;
    for i in 0..n {
        sum += client_objective_full(task, i, w)?;
    }
    Ok(sum / n as f64)
}

/// Exact ∇F(w) = (1/n) Σ_i ∇F^i(w), full batches, fixed client order.
pub fn full_gradient(task: &dyn CompositionTask, w: &ParamVec) -> Result<ParamVec> {
    let n = task.clients();
    let mut acc = ParamVec::zeros(task.param_dim());
    for i in 0..n {
        let g = client_grad_estimator_full(task, i, w)?;
        acc.add_scaled(1.0, &g)?;
    }
    acc.scale(1.0 / n as f64);
    Ok(acc)
}

