//! Probability paths, training objectives, and analytic oracles for
//! rectified flow and the variance-preserving (VP) diffusion baseline.
//!
//! Convention throughout: t = 0 is data, t = 1 is prior noise; samplers
//! integrate t from 1 down to 0.

use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid path spec: {0}")]
    BadPathSpec(String),
    #[error("time {0} outside [0, 1]")]
    BadTime(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Rectified,
    Vp,
}

/// Probability-path family. For VP, the linear schedule
/// β(t) = beta_min + t·(beta_max − beta_min) integrates to
/// β̄_t = beta_min·t + ½(beta_max − beta_min)·t².
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PathSpec {
    pub kind: PathKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl PathSpec {
    pub fn rectified() -> PathSpec {
        PathSpec { kind: PathKind::Rectified, beta_min: 0.0, beta_max: 0.0 }
    }

    /// Standard VP schedule range.
    pub fn vp_default() -> PathSpec {
        PathSpec::vp(0.1, 20.0).expect("default range is valid")
    }

    pub fn vp(beta_min: f64, beta_max: f64) -> Result<PathSpec> {
        if !(beta_min > 0.0 && beta_min <= beta_max) {
            return Err(FlowError::BadPathSpec(format!(
                "need 0 < beta_min <= beta_max, got ({}, {})",
                beta_min, beta_max
            )));
        }
        Ok(PathSpec { kind: PathKind::Vp, beta_min, beta_max })
    }

    pub fn beta_bar(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }
}

/// A point on a probability path.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub x_t: Tensor,
    pub t: f64,
}

impl FlowState {
    pub fn new(x_t: Tensor, t: f64) -> Result<FlowState> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FlowError::BadTime(t));
        }
        Ok(FlowState { x_t, t })
    }
}

/// Straight-line interpolant x_t = (1−t)·x0 + t·x1.
pub fn rf_interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    Ok(x0.scale(1.0 - t).add(&x1.scale(t))?)
}

/// Time-invariant straight-path velocity target u = x1 − x0.
pub fn rf_target(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    Ok(x1.sub(x0)?)
}

/// (α_t, σ_t) of the VP path: α = e^{−β̄/2}, σ = √(1 − e^{−β̄}).
pub fn vp_schedule(spec: &PathSpec, t: f64) -> (f64, f64) {
    let bb = spec.beta_bar(t);
    let alpha = (-0.5 * bb).exp();
    let sigma = (1.0 - (-bb).exp()).sqrt();
    (alpha, sigma)
}

/// Curved interpolant x_t = α_t·x0 + σ_t·x1.
pub fn vp_interpolate(x0: &Tensor, x1: &Tensor, spec: &PathSpec, t: f64) -> Result<Tensor> {
    let (alpha, sigma) = vp_schedule(spec, t);
    Ok(x0.scale(alpha).add(&x1.scale(sigma))?)
}

/// Analytic testbed: data N(mu, s²I), prior N(0, I).
#[derive(Clone, Debug)]
pub struct GaussianTestbed {
    pub mu: Vec<f64>,
    pub s: f64,
}

impl GaussianTestbed {
    pub fn new(mu: Vec<f64>, s: f64) -> Result<GaussianTestbed> {
        if !(s > 0.0) {
            return Err(FlowError::BadPathSpec(format!("testbed needs s > 0, got {}", s)));
        }
        Ok(GaussianTestbed { mu, s })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// One (data, noise) endpoint pair.
    pub fn sample_pair<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let x0 = self
            .mu
            .iter()
            .map(|&m| m + self.s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x1 = (0..self.dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x0, x1)
    }

    /// Marginal straight-path velocity u(x, t) = E[x1 − x0 | x_t = x].
    ///
    /// Derived by Gaussian conditioning: with D = (1−t)²s² + t²,
    ///   E[x1 | x_t=x] = (t/D)·(x − (1−t)mu)
    ///   E[x0 | x_t=x] = mu + ((1−t)s²/D)·(x − (1−t)mu)
    /// hence u = (t − (1−t)s²)/D · (x − (1−t)mu) − mu, which satisfies the
    /// t=0 / t=1 limits and the tower property E[u(x_t)] = −mu. (Verified
    /// against the Monte-Carlo binned regression in the tests.)
    pub fn marginal_velocity(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let omt = 1.0 - t;
        let s2 = self.s * self.s;
        let d = omt * omt * s2 + t * t;
        let k = (t - omt * s2) / d;
        x.iter()
            .zip(&self.mu)
            .map(|(&xi, &mi)| k * (xi - omt * mi) - mi)
            .collect()
    }
}

/// Batched velocity field: maps rows of x (B × d) at per-row times to
/// velocities of the same shape.
pub trait BatchVelocity {
    fn eval(&self, x: &Tensor, t: &[f64]) -> crate::tensor::Result<Tensor>;
}

impl<F> BatchVelocity for F
where
    F: Fn(&Tensor, &[f64]) -> crate::tensor::Result<Tensor>,
{
    fn eval(&self, x: &Tensor, t: &[f64]) -> crate::tensor::Result<Tensor> {
        self(x, t)
    }
}

fn check_batch(x: &Tensor, t: &[f64]) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 || s[0] != t.len() {
        return Err(FlowError::Tensor(TensorError::ShapeMismatch {
            op: "flow-batch",
            detail: format!("expected ({}, d) batch, got {:?}", t.len(), s),
        }));
    }
    Ok((s[0], s[1]))
}

/// Flow-matching loss against the closed-form marginal field:
/// mean over batch of ‖v_θ(x_t, t) − u(x_t, t)‖₂².
pub fn fm_loss<M: BatchVelocity>(
    model: &M,
    tb: &GaussianTestbed,
    x_t: &Tensor,
    t: &[f64],
) -> Result<Tensor> {
    let (b, d) = check_batch(x_t, t)?;
    let mut target = Vec::with_capacity(b * d);
    {
        let xd = x_t.data();
        for (i, &ti) in t.iter().enumerate() {
            target.extend(tb.marginal_velocity(ti, &xd[i * d..(i + 1) * d]));
        }
    }
    let target = Tensor::from_vec(target, x_t.shape())?;
    let out = model.eval(x_t, t)?;
    let r = out.sub(&target)?;
    Ok(r.mul(&r)?.sum_all().scale(1.0 / b as f64))
}

/// Conditional flow-matching loss on endpoint pairs:
/// mean over batch of ‖v_θ(x_t, t) − (x1 − x0)‖₂², x_t on the straight path.
pub fn cfm_loss<M: BatchVelocity>(
    model: &M,
    x0: &Tensor,
    x1: &Tensor,
    t: &[f64],
) -> Result<Tensor> {
    let (b, d) = check_batch(x0, t)?;
    check_batch(x1, t)?;
    if x0.shape() != x1.shape() {
        return Err(FlowError::Tensor(TensorError::ShapeMismatch {
            op: "cfm-loss",
            detail: format!("x0 {:?} vs x1 {:?}", x0.shape(), x1.shape()),
        }));
    }
    // Per-row interpolation weights as constant tensors.
    let mut w0 = Vec::with_capacity(b * d);
    let mut w1 = Vec::with_capacity(b * d);
    for &ti in t {
        w0.extend(std::iter::repeat(1.0 - ti).take(d));
        w1.extend(std::iter::repeat(ti).take(d));
    }
    let w0 = Tensor::from_vec(w0, x0.shape())?;
    let w1 = Tensor::from_vec(w1, x0.shape())?;
    let x_t = x0.mul(&w0)?.add(&x1.mul(&w1)?)?;
    let target = rf_target(x0, x1)?;
    let out = model.eval(&x_t, t)?;
    let r = out.sub(&target)?;
    Ok(r.mul(&r)?.sum_all().scale(1.0 / b as f64))
}

/// Conditional rectified-flow inversion loss for one sample: L1 between the
/// model's velocity (given the seismic condition) and the straight-path
/// target x1 − v_true, with x_t = (1−t)·v_true + t·x1. Returns the mean
/// absolute residual (elementwise mean), differentiable through `model`.
pub fn crf_loss<F>(
    model: F,
    v_true: &Tensor,
    seis: &Tensor,
    x1: &Tensor,
    t: f64,
) -> Result<Tensor>
where
    F: FnOnce(&Tensor, f64, &Tensor) -> crate::tensor::Result<Tensor>,
{
    if v_true.shape() != x1.shape() {
        return Err(FlowError::Tensor(TensorError::ShapeMismatch {
            op: "crf-loss",
            detail: format!("v_true {:?} vs x1 {:?}", v_true.shape(), x1.shape()),
        }));
    }
    let x_t = rf_interpolate(v_true, x1, t)?;
    let out = model(&x_t, t, seis)?;
    let target = rf_target(v_true, x1)?;
    Ok(out.sub(&target)?.abs_op().mean_all())
}
