//! Few-step and many-step generation: rectified-flow Euler integration plus
//! DDPM / DDIM / DPM-Solver-2 diffusion baselines, with exact NFE accounting.
//!
//! All samplers integrate t from 1 (noise) down to 0 (data) and are pure
//! functions of (model, x1, cond, seed).

use crate::flowcore::{vp_schedule, PathKind, PathSpec};
use crate::tensor::{self, no_grad, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler spec: {0}")]
    BadSpec(String),
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    RfEuler,
    Ddpm,
    Ddim,
    DpmSolver2,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] =
        [SamplerKind::RfEuler, SamplerKind::Ddpm, SamplerKind::Ddim, SamplerKind::DpmSolver2];

    pub fn token(self) -> &'static str {
        match self {
            SamplerKind::RfEuler => "rf-euler",
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
            SamplerKind::DpmSolver2 => "dpm-solver2",
        }
    }

    pub fn parse(s: &str) -> Option<SamplerKind> {
        SamplerKind::ALL.into_iter().find(|k| k.token() == s)
    }

    /// Model forward evaluations implied by `steps` integration steps.
    pub fn nfe_for_steps(self, steps: usize) -> usize {
        match self {
            SamplerKind::DpmSolver2 => 2 * steps,
            _ => steps,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub steps: usize,
    pub rng_seed: u64,
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, steps: usize, rng_seed: u64) -> Result<SamplerSpec> {
        if steps == 0 {
            return Err(SamplerError::BadSpec("steps must be >= 1".into()));
        }
        Ok(SamplerSpec { kind, steps, rng_seed })
    }
}

/// Counts model forward evaluations during sampling.
#[derive(Clone, Copy, Debug, Default)]
pub struct NfeCounter {
    count: usize,
}

impl NfeCounter {
    pub fn bump(&mut self) {
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub x: Tensor,
    pub nfe: usize,
}

/// Conditional velocity field v(x, t, cond) for rectified-flow sampling.
pub trait VelocityModel {
    fn velocity(&self, x: &Tensor, t: f64, cond: &Tensor) -> tensor::Result<Tensor>;
}

impl<F> VelocityModel for F
where
    F: Fn(&Tensor, f64, &Tensor) -> tensor::Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64, cond: &Tensor) -> tensor::Result<Tensor> {
        self(x, t, cond)
    }
}

/// Conditional noise predictor ε(x, t, cond) for the diffusion baselines.
pub trait NoiseModel {
    fn predict_noise(&self, x: &Tensor, t: f64, cond: &Tensor) -> tensor::Result<Tensor>;
}

impl<F> NoiseModel for F
where
    F: Fn(&Tensor, f64, &Tensor) -> tensor::Result<Tensor>,
{
    fn predict_noise(&self, x: &Tensor, t: f64, cond: &Tensor) -> tensor::Result<Tensor> {
        self(x, t, cond)
    }
}

fn expect_kind(spec: &SamplerSpec, want: SamplerKind) -> Result<()> {
    if spec.kind != want {
        return Err(SamplerError::BadSpec(format!(
            "sampler is {}, spec says {}",
            want.token(),
            spec.kind.token()
        )));
    }
    Ok(())
}

fn expect_vp(path: &PathSpec) -> Result<()> {
    if path.kind != PathKind::Vp {
        return Err(SamplerError::BadSpec("diffusion samplers need a VP path".into()));
    }
    Ok(())
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SamplerError::NonFinite { step })
    }
}

fn randn_like(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(data, shape).expect("length matches shape")
}

/// Explicit Euler on the velocity field: N uniform steps of
/// x ← x − Δt·v(x, t) from t = 1 to t = 0. NFE = N.
pub fn rf_euler_sample<M: VelocityModel>(
    model: &M,
    x1: &Tensor,
    cond: &Tensor,
    spec: &SamplerSpec,
) -> Result<SampleOutput> {
    expect_kind(spec, SamplerKind::RfEuler)?;
    no_grad(|| {
        let n = spec.steps;
        let dt = 1.0 / n as f64;
        let mut counter = NfeCounter::default();
        let mut x = x1.detach();
        for step in 0..n {
            let t = 1.0 - step as f64 * dt;
            let v = model.velocity(&x, t, cond)?;
            counter.bump();
            x = x.sub(&v.scale(dt))?;
            check_finite(&x, step)?;
        }
        Ok(SampleOutput { x, nfe: counter.count() })
    })
}

/// Ancestral VP sampling over N uniform times: posterior mean from the
/// predicted noise plus posterior-scaled Gaussian noise (none at the final
/// step). NFE = N.
pub fn ddpm_sample<M: NoiseModel>(
    model: &M,
    x1: &Tensor,
    cond: &Tensor,
    spec: &SamplerSpec,
    path: &PathSpec,
) -> Result<SampleOutput> {
    expect_kind(spec, SamplerKind::Ddpm)?;
    expect_vp(path)?;
    no_grad(|| {
        let n = spec.steps;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let mut counter = NfeCounter::default();
        let mut x = x1.detach();
        for step in 0..n {
            let i = n - step;
            let t_cur = i as f64 / n as f64;
            let t_next = (i - 1) as f64 / n as f64;
            let (a_c, s_c) = vp_schedule(path, t_cur);
            let (a_n, s_n) = vp_schedule(path, t_next);
            let eps = model.predict_noise(&x, t_cur, cond)?;
            counter.bump();
            // Per-step ratio A = ᾱ_cur/ᾱ_next and its complement B, with
            // 1 − ᾱ written as σ² for stability near t = 0.
            let a = (a_c / a_n) * (a_c / a_n);
            let b = 1.0 - a;
            let s_c2 = s_c * s_c;
            let x0p = x.sub(&eps.scale(s_c))?.scale(1.0 / a_c);
            let mean = x0p
                .scale(a_n * b / s_c2)
                .add(&x.scale((a_c / a_n) * s_n * s_n / s_c2))?;
            x = if i > 1 {
                let std = ((s_n * s_n / s_c2) * b).sqrt();
                let noise = randn_like(x1.shape(), &mut rng);
                mean.add(&noise.scale(std))?
            } else {
                mean
            };
            check_finite(&x, step)?;
        }
        Ok(SampleOutput { x, nfe: counter.count() })
    })
}

/// Deterministic DDIM (η = 0) over N uniform times: predict x0 from the
/// noise estimate, re-project onto the next (α, σ) pair. NFE = N.
pub fn ddim_sample<M: NoiseModel>(
    model: &M,
    x1: &Tensor,
    cond: &Tensor,
    spec: &SamplerSpec,
    path: &PathSpec,
) -> Result<SampleOutput> {
    expect_kind(spec, SamplerKind::Ddim)?;
    expect_vp(path)?;
    no_grad(|| {
        let n = spec.steps;
        let mut counter = NfeCounter::default();
        let mut x = x1.detach();
        for step in 0..n {
            let i = n - step;
            let t_cur = i as f64 / n as f64;
            let t_next = (i - 1) as f64 / n as f64;
            let (a_c, s_c) = vp_schedule(path, t_cur);
            let (a_n, s_n) = vp_schedule(path, t_next);
            let eps = model.predict_noise(&x, t_cur, cond)?;
            counter.bump();
            let x0p = x.sub(&eps.scale(s_c))?.scale(1.0 / a_c);
            x = x0p.scale(a_n).add(&eps.scale(s_n))?;
            check_finite(&x, step)?;
        }
        Ok(SampleOutput { x, nfe: counter.count() })
    })
}

/// log-SNR λ(t) = log(α/σ) = −½·log(e^β̄ − 1) for the VP path.
fn log_snr(path: &PathSpec, t: f64) -> f64 {
    -0.5 * path.beta_bar(t).exp_m1().ln()
}

/// Inverse of `log_snr`: β̄ = ln(1 + e^{−2λ}), then solve the quadratic
/// β̄ = beta_min·t + ½(beta_max − beta_min)·t².
fn t_of_log_snr(path: &PathSpec, lambda: f64) -> f64 {
    let z = -2.0 * lambda;
    let bb = if z > 30.0 { z } else { z.exp().ln_1p() };
    let t = if path.beta_max == path.beta_min {
        bb / path.beta_min
    } else {
        let d = path.beta_max - path.beta_min;
        ((path.beta_min * path.beta_min + 2.0 * d * bb).sqrt() - path.beta_min) / d
    };
    t.clamp(0.0, 1.0)
}

/// Second-order exponential-integrator (midpoint) sampling on a uniform
/// log-SNR grid from t = 1 down to t_end = 1e-8, then a final rescale by
/// 1/α(t_end). Two model evaluations per step: NFE = 2N.
pub fn dpm_solver2_sample<M: NoiseModel>(
    model: &M,
    x1: &Tensor,
    cond: &Tensor,
    spec: &SamplerSpec,
    path: &PathSpec,
) -> Result<SampleOutput> {
    expect_kind(spec, SamplerKind::DpmSolver2)?;
    expect_vp(path)?;
    no_grad(|| {
        let n = spec.steps;
        let t_end = 1e-8;
        let l0 = log_snr(path, 1.0);
        let l1 = log_snr(path, t_end);
        let lam = |i: usize| l0 + (l1 - l0) * i as f64 / n as f64;
        let mut times = Vec::with_capacity(n + 1);
        times.push(1.0);
        for i in 1..n {
            times.push(t_of_log_snr(path, lam(i)));
        }
        times.push(t_end);

        let mut counter = NfeCounter::default();
        let mut x = x1.detach();
        for step in 0..n {
            let t_s = times[step];
            let t_t = times[step + 1];
            let l_m = 0.5 * (lam(step) + lam(step + 1));
            let t_m = t_of_log_snr(path, l_m);
            let (a_s, s_s) = vp_schedule(path, t_s);
            let (a_t, s_t) = vp_schedule(path, t_t);
            let (a_m, s_m) = vp_schedule(path, t_m);

            let eps1 = model.predict_noise(&x, t_s, cond)?;
            counter.bump();
            // σ_target·(e^h − 1) expanded to α_target·σ_s/α_s − σ_target,
            // which stays finite for large h.
            let c_half = a_m * s_s / a_s - s_m;
            let u = x.scale(a_m / a_s).sub(&eps1.scale(c_half))?;
            let eps2 = model.predict_noise(&u, t_m, cond)?;
            counter.bump();
            let c_full = a_t * s_s / a_s - s_t;
            x = x.scale(a_t / a_s).sub(&eps2.scale(c_full))?;
            check_finite(&x, step)?;
        }
        let (a_end, _) = vp_schedule(path, t_end);
        Ok(SampleOutput { x: x.scale(1.0 / a_end), nfe: counter.count() })
    })
}

/// Richardson-style local truncation error proxy at (x, t): the gap between
/// one Euler step of size dt and two of size dt/2, i.e.
/// (dt/2)·‖v(x, t) − v(x − (dt/2)v, t − dt/2)‖₂.
pub fn lte_estimate<M: VelocityModel>(
    model: &M,
    x: &Tensor,
    t: f64,
    dt: f64,
    cond: &Tensor,
) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(SamplerError::BadSpec(format!("lte needs dt > 0, got {}", dt)));
    }
    if t - dt < 0.0 {
        return Err(SamplerError::BadSpec(format!("lte needs t - dt >= 0, got t={} dt={}", t, dt)));
    }
    no_grad(|| {
        let v1 = model.velocity(x, t, cond)?;
        let xh = x.sub(&v1.scale(0.5 * dt))?;
        let v2 = model.velocity(&xh, t - 0.5 * dt, cond)?;
        let diff = v1.sub(&v2)?;
        let d = diff.data();
        Ok(0.5 * dt * d.iter().map(|v| v * v).sum::<f64>().sqrt())
    })
}
