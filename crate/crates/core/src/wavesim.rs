//! 2-D acoustic finite-difference forward modeling and synthetic velocity
//! model generation.
//!
//! Solves p_tt = v²(p_xx + p_zz) with 2nd-order centered differences on a
//! small grid: free surface on top, Cerjan-style sponge taper on the other
//! three sides. The source is injected scaled by the local v² so that the
//! discrete propagator is symmetric, which preserves source/receiver
//! reciprocity to high accuracy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Absorbing-layer width in cells (left/right/bottom).
pub const SPONGE_WIDTH: usize = 8;
/// Cerjan taper coefficient: amplitude factor exp(-(0.015 d)²) at depth d.
pub const SPONGE_COEFF: f64 = 0.015;
/// Hard velocity bounds for generated models, m/s.
pub const V_FLOOR: f64 = 1500.0;
pub const V_CEIL: f64 = 4500.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("time step {dt} exceeds CFL bound {bound}")]
    CflViolation { dt: f64, bound: f64 },
    #[error("wavefield blew up (non-finite pressure) at step {step}")]
    FieldBlowUp { step: usize },
    #[error("invalid survey geometry: {0}")]
    BadGeometry(String),
}

/// Gridded subsurface velocity in m/s, row-major (nz × nx), row 0 = surface.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    pub grid: Vec<f64>,
    pub nz: usize,
    pub nx: usize,
    /// Spatial step in meters, uniform in z and x.
    pub dx: f64,
}

impl VelocityModel {
    pub fn new(grid: Vec<f64>, nz: usize, nx: usize, dx: f64) -> VelocityModel {
        assert_eq!(grid.len(), nz * nx);
        VelocityModel { grid, nz, nx, dx }
    }

    pub fn homogeneous(v: f64, nz: usize, nx: usize, dx: f64) -> VelocityModel {
        VelocityModel::new(vec![v; nz * nx], nz, nx, dx)
    }

    pub fn at(&self, z: usize, x: usize) -> f64 {
        self.grid[z * self.nx + x]
    }

    pub fn v_min(&self) -> f64 {
        self.grid.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn v_max(&self) -> f64 {
        self.grid.iter().cloned().fold(0.0, f64::max)
    }

    /// Worst-column two-way vertical traveltime, seconds.
    pub fn two_way_time(&self) -> f64 {
        let mut worst = 0.0f64;
        for x in 0..self.nx {
            let t: f64 = (0..self.nz).map(|z| 2.0 * self.dx / self.at(z, x)).sum();
            worst = worst.max(t);
        }
        worst
    }

    pub fn in_bounds(&self) -> bool {
        self.grid.iter().all(|&v| (V_FLOOR..=V_CEIL).contains(&v))
    }
}

/// Acquisition layout: surface sources and receivers plus time sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct SurveyGeometry {
    pub shot_columns: Vec<usize>,
    pub receiver_columns: Vec<usize>,
    pub nt: usize,
    /// Time step, seconds.
    pub dt: f64,
    /// Ricker peak frequency, Hz.
    pub f0: f64,
}

impl Default for SurveyGeometry {
    /// Desk-scale survey: 3 shots, every surface column instrumented.
    fn default() -> SurveyGeometry {
        SurveyGeometry {
            shot_columns: vec![4, 16, 28],
            receiver_columns: (0..32).collect(),
            nt: 300,
            dt: 1.0e-3,
            f0: 15.0,
        }
    }
}

impl SurveyGeometry {
    /// Full-scale preset mirroring the published acquisition: 70-wide grid,
    /// 5 shots, 1000 time samples.
    pub fn paper_preset() -> SurveyGeometry {
        SurveyGeometry {
            shot_columns: vec![7, 21, 35, 49, 63],
            receiver_columns: (0..70).collect(),
            nt: 1000,
            dt: 1.0e-3,
            f0: 15.0,
        }
    }

    /// Source delay: one dominant period.
    pub fn t0(&self) -> f64 {
        1.0 / self.f0
    }

    pub fn n_shots(&self) -> usize {
        self.shot_columns.len()
    }

    pub fn n_receivers(&self) -> usize {
        self.receiver_columns.len()
    }

    /// Index-range and record-length checks against a concrete model.
    /// The record must cover the two-way vertical travel to the bottom.
    pub fn validate(&self, vel: &VelocityModel) -> Result<(), SimError> {
        for &c in self.shot_columns.iter().chain(&self.receiver_columns) {
            if c >= vel.nx {
                return Err(SimError::BadGeometry(format!(
                    "column {} outside grid width {}",
                    c, vel.nx
                )));
            }
        }
        if self.nt == 0 || self.dt <= 0.0 || self.f0 <= 0.0 {
            return Err(SimError::BadGeometry(
                "nt, dt, f0 must be positive".into(),
            ));
        }
        let bound = cfl_bound(vel.v_max(), vel.dx);
        if self.dt > bound {
            return Err(SimError::CflViolation { dt: self.dt, bound });
        }
        let record = self.nt as f64 * self.dt;
        let needed = vel.two_way_time();
        if record < needed {
            return Err(SimError::BadGeometry(format!(
                "record length {:.4}s shorter than two-way travel {:.4}s",
                record, needed
            )));
        }
        Ok(())
    }
}

/// Ricker wavelet: w[i] = (1 − 2π²f0²τ²)·exp(−π²f0²τ²), τ = i·dt − t0.
pub fn ricker(f0: f64, dt: f64, nt: usize, t0: f64) -> Vec<f64> {
    assert!(f0 > 0.0 && dt > 0.0 && t0 >= 0.0);
    (0..nt)
        .map(|i| {
            let tau = i as f64 * dt - t0;
            let a = (std::f64::consts::PI * f0 * tau).powi(2);
            (1.0 - 2.0 * a) * (-a).exp()
        })
        .collect()
}

/// Stability bound of the 2nd-order 2-D scheme.
pub fn cfl_bound(v_max: f64, dx: f64) -> f64 {
    dx / (v_max * std::f64::consts::SQRT_2)
}

pub fn cfl_check(vel: &VelocityModel, dt: f64) -> bool {
    dt <= cfl_bound(vel.v_max(), vel.dx)
}

/// One shot gather (nt × n_receivers, row-major over time).
pub fn simulate_shot(
    vel: &VelocityModel,
    shot_col: usize,
    geom: &SurveyGeometry,
) -> Result<Vec<f64>, SimError> {
    let wavelet = ricker(geom.f0, geom.dt, geom.nt, geom.t0());
    simulate_shot_with_wavelet(vel, shot_col, geom, &wavelet)
}

/// One shot gather driven by an arbitrary source wavelet (length nt).
/// Receivers sample the pressure field at the start of each step, so
/// trace[0] is identically zero.
pub fn simulate_shot_with_wavelet(
    vel: &VelocityModel,
    shot_col: usize,
    geom: &SurveyGeometry,
    wavelet: &[f64],
) -> Result<Vec<f64>, SimError> {
    geom.validate(vel)?;
    if shot_col >= vel.nx {
        return Err(SimError::BadGeometry(format!(
            "shot column {} outside grid width {}",
            shot_col, vel.nx
        )));
    }
    if wavelet.len() != geom.nt {
        return Err(SimError::BadGeometry(format!(
            "wavelet length {} != nt {}",
            wavelet.len(),
            geom.nt
        )));
    }

    let (nz, nx) = (vel.nz, vel.nx);
    let s = SPONGE_WIDTH;
    // Extended grid: sponge on left/right/bottom, free surface at top.
    let (ez, ex) = (nz + s, nx + 2 * s);
    let cell = |z: usize, x: usize| z * ex + x;

    // Edge-replicated v² and per-cell sponge taper.
    let mut v2 = vec![0.0; ez * ex];
    let mut damp = vec![1.0; ez * ex];
    for z in 0..ez {
        let iz = z.min(nz - 1);
        for x in 0..ex {
            let ix = x.saturating_sub(s).min(nx - 1);
            let v = vel.at(iz, ix);
            v2[cell(z, x)] = v * v;
            let dz = z.saturating_sub(nz - 1); // cells below interior
            let dxl = s.saturating_sub(x); // cells left of interior
            let dxr = x.saturating_sub(s + nx - 1);
            let d = dz.max(dxl).max(dxr);
            if d > 0 {
                let a = SPONGE_COEFF * d as f64;
                damp[cell(z, x)] = (-a * a).exp();
            }
        }
    }

    let dt2 = geom.dt * geom.dt;
    let inv_dx2 = 1.0 / (vel.dx * vel.dx);
    let src = cell(0, shot_col + s);

    let mut p_prev = vec![0.0; ez * ex];
    let mut p_cur = vec![0.0; ez * ex];
    let mut p_next = vec![0.0; ez * ex];
    let n_recv = geom.n_receivers();
    let mut gather = vec![0.0; geom.nt * n_recv];

    for n in 0..geom.nt {
        for (r, &rc) in geom.receiver_columns.iter().enumerate() {
            gather[n * n_recv + r] = p_cur[cell(0, rc + s)];
        }

        // Out-of-grid neighbors are zero: Dirichlet ghost above the free
        // surface and beyond the sponge.
        let mut blew_up = false;
        for z in 0..ez {
            for x in 0..ex {
                let i = cell(z, x);
                let c = p_cur[i];
                let up = if z > 0 { p_cur[i - ex] } else { 0.0 };
                let down = if z + 1 < ez { p_cur[i + ex] } else { 0.0 };
                let left = if x > 0 { p_cur[i - 1] } else { 0.0 };
                let right = if x + 1 < ex { p_cur[i + 1] } else { 0.0 };
                let lap = (up + down + left + right - 4.0 * c) * inv_dx2;
                p_next[i] = 2.0 * c - p_prev[i] + dt2 * v2[i] * lap;
            }
        }
        p_next[src] += dt2 * v2[src] * wavelet[n];

        for i in 0..ez * ex {
            p_next[i] *= damp[i];
            p_cur[i] *= damp[i];
            blew_up |= !p_next[i].is_finite();
        }
        if blew_up {
            return Err(SimError::FieldBlowUp { step: n });
        }

        std::mem::swap(&mut p_prev, &mut p_cur);
        std::mem::swap(&mut p_cur, &mut p_next);
    }
    Ok(gather)
}

/// Analytic-signal magnitude of a trace (discrete Hilbert transform via a
/// direct DFT; traces are short). First arrivals are picked on this
/// envelope, which is insensitive to the phase rotation the 2-D Green's
/// function applies to the wavelet.
pub fn trace_envelope(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    let w0 = -2.0 * std::f64::consts::PI / n as f64;
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for (j, &xj) in x.iter().enumerate() {
            let (s, c) = (w0 * (k * j % n) as f64).sin_cos();
            sr += xj * c;
            si += xj * s;
        }
        re[k] = sr;
        im[k] = si;
    }
    // One-sided spectrum of the analytic signal.
    let half = n / 2;
    for k in 0..n {
        let factor = if k == 0 || (n % 2 == 0 && k == half) {
            1.0
        } else if k < half || (n % 2 == 1 && k == half) {
            2.0
        } else {
            0.0
        };
        re[k] *= factor;
        im[k] *= factor;
    }
    let mut env = vec![0.0; n];
    let winv = 2.0 * std::f64::consts::PI / n as f64;
    for (j, e) in env.iter_mut().enumerate() {
        let (mut zr, mut zi) = (0.0, 0.0);
        for k in 0..n {
            let (s, c) = (winv * (k * j % n) as f64).sin_cos();
            zr += re[k] * c - im[k] * s;
            zi += re[k] * s + im[k] * c;
        }
        *e = (zr * zr + zi * zi).sqrt() / n as f64;
    }
    env
}

/// Index of the envelope maximum inside a window centered on a predicted
/// arrival. Windowing keeps late sponge-edge reverberation (which the
/// deliberately thin absorber lets through) from hijacking the pick.
pub fn windowed_peak(env: &[f64], center: usize, half_width: usize) -> usize {
    let lo = center.saturating_sub(half_width);
    let hi = (center + half_width + 1).min(env.len());
    (lo..hi)
        .max_by(|&a, &b| env[a].partial_cmp(&env[b]).unwrap())
        .expect("window must be non-empty")
}

/// Worst first-arrival timing error, in time steps, over every receiver of
/// a homogeneous-medium survey run near the CFL limit (Courant ≈ 0.5,
/// where the 2nd-order scheme's group-velocity error is smallest). Arrivals
/// are picked as the envelope peak in a half-period window around the
/// analytic traveltime.
pub fn homogeneous_first_arrival_worst_error() -> f64 {
    let v = VelocityModel::homogeneous(2000.0, 32, 32, 10.0);
    let shot = 4usize;
    let geom = SurveyGeometry {
        shot_columns: vec![shot],
        receiver_columns: (0..32).collect(),
        nt: 184,
        dt: 2.5e-3,
        f0: 12.0,
    };
    let v0 = v.at(0, 0);
    let g = simulate_shot(&v, shot, &geom).expect("scenario is CFL-stable");
    let nr = geom.n_receivers();
    let half_window = (0.5 / geom.f0 / geom.dt).ceil() as usize;
    let mut worst = 0.0f64;
    for (r, &rc) in geom.receiver_columns.iter().enumerate() {
        let offset = (rc as f64 - shot as f64).abs() * v.dx;
        let expected = (geom.t0() + offset / v0) / geom.dt;
        let trace: Vec<f64> = (0..geom.nt).map(|n| g[n * nr + r]).collect();
        let env = trace_envelope(&trace);
        let peak = windowed_peak(&env, expected.round() as usize, half_window);
        worst = worst.max((peak as f64 - expected).abs());
    }
    worst
}

/// Multi-shot record (n_shots × nt × n_receivers).
#[derive(Clone, Debug, PartialEq)]
pub struct SeismicRecord {
    pub data: Vec<f64>,
    pub n_shots: usize,
    pub nt: usize,
    pub n_receivers: usize,
}

impl SeismicRecord {
    pub fn shot(&self, s: usize) -> &[f64] {
        let len = self.nt * self.n_receivers;
        &self.data[s * len..(s + 1) * len]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

pub fn simulate_survey(
    vel: &VelocityModel,
    geom: &SurveyGeometry,
) -> Result<SeismicRecord, SimError> {
    let mut data = Vec::with_capacity(geom.n_shots() * geom.nt * geom.n_receivers());
    for &col in &geom.shot_columns {
        data.extend(simulate_shot(vel, col, geom)?);
    }
    Ok(SeismicRecord {
        data,
        n_shots: geom.n_shots(),
        nt: geom.nt,
        n_receivers: geom.n_receivers(),
    })
}

/// Structural families for synthetic models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelStyle {
    Layered,
    Fault,
}

impl std::str::FromStr for ModelStyle {
    type Err = String;
    fn from_str(s: &str) -> Result<ModelStyle, String> {
        match s {
            "layered" => Ok(ModelStyle::Layered),
            "fault" => Ok(ModelStyle::Fault),
            other => Err(format!("unknown model style '{}'", other)),
        }
    }
}

impl ModelStyle {
    pub fn token(self) -> &'static str {
        match self {
            ModelStyle::Layered => "layered",
            ModelStyle::Fault => "fault",
        }
    }
}

/// Deterministic synthetic model on the default 32×32 grid, guaranteed
/// compatible with the default survey's record length.
pub fn generate_velocity_model(style: ModelStyle, seed: u64) -> VelocityModel {
    let geom = SurveyGeometry::default();
    generate_velocity_model_sized(style, 32, 32, 10.0, seed, Some(geom.nt as f64 * geom.dt))
}

/// Layered: 3–6 flat layers with velocities increasing with depth.
/// Fault: a layered model sheared across a dipping line (dip 20°–70°)
/// with a vertical throw of 2–6 cells.
///
/// With `max_two_way` set, candidates are redrawn (still deterministically
/// from the seed) until the two-way vertical traveltime fits the budget, so
/// every emitted model can be recorded fully by the paired survey.
pub fn generate_velocity_model_sized(
    style: ModelStyle,
    nz: usize,
    nx: usize,
    dx: f64,
    seed: u64,
    max_two_way: Option<f64>,
) -> VelocityModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0.. {
        assert!(attempt < 10_000, "model constraints unreachable");
        let model = draw_model(style, nz, nx, dx, &mut rng);
        if let Some(budget) = max_two_way {
            if model.two_way_time() > budget {
                continue;
            }
        }
        // A fault must actually break some row; redraw shears that stay
        // inside a single layer.
        if style == ModelStyle::Fault {
            let broken = (0..nz).any(|z| {
                let row = &model.grid[z * nx..(z + 1) * nx];
                row.iter().any(|&v| v != row[0])
            });
            if !broken {
                continue;
            }
        }
        return model;
    }
    unreachable!()
}

fn draw_model(style: ModelStyle, nz: usize, nx: usize, dx: f64, rng: &mut ChaCha8Rng) -> VelocityModel {
    let n_layers = rng.random_range(3..=6usize);

    // Distinct interior interface depths, sorted.
    let mut interfaces: Vec<usize> = Vec::new();
    while interfaces.len() < n_layers - 1 {
        let z = rng.random_range(1..nz);
        if !interfaces.contains(&z) {
            interfaces.push(z);
        }
    }
    interfaces.sort_unstable();

    let mut vels: Vec<f64> = (0..n_layers)
        .map(|_| rng.random_range(V_FLOOR..V_CEIL))
        .collect();
    vels.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Per-depth layer profile.
    let mut profile = vec![0.0; nz];
    let mut layer = 0;
    for (z, p) in profile.iter_mut().enumerate() {
        while layer < interfaces.len() && z >= interfaces[layer] {
            layer += 1;
        }
        *p = vels[layer];
    }

    let mut grid = vec![0.0; nz * nx];
    match style {
        ModelStyle::Layered => {
            for z in 0..nz {
                for x in 0..nx {
                    grid[z * nx + x] = profile[z];
                }
            }
        }
        ModelStyle::Fault => {
            let dip_deg = rng.random_range(20.0..70.0f64);
            let slope = dip_deg.to_radians().tan();
            let sign = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
            let x0 = rng.random_range(nx / 4..3 * nx / 4) as f64;
            let z0 = rng.random_range(nz / 4..3 * nz / 4) as f64;
            let throw = rng.random_range(2..=6usize);
            for z in 0..nz {
                for x in 0..nx {
                    // Hanging side of the dipping line is shifted up by `throw`.
                    let downthrown = (z as f64 - z0) < sign * slope * (x as f64 - x0);
                    let zz = if downthrown { z.saturating_sub(throw) } else { z };
                    grid[z * nx + x] = profile[zz];
                }
            }
        }
    }
    VelocityModel::new(grid, nz, nx, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ricker_peak_and_sign_structure() {
        let (f0, dt, t0) = (10.0, 1.0e-3, 0.1);
        let w = ricker(f0, dt, 300, t0);
        assert!((w[100] - 1.0).abs() < 1e-15, "peak at τ=0 must be 1");
        // Positive lobe strictly inside ±1/(√2 π f0), negative just outside.
        let tz = 1.0 / (std::f64::consts::SQRT_2 * std::f64::consts::PI * f0);
        for (i, &wi) in w.iter().enumerate() {
            let tau = (i as f64 * dt - t0).abs();
            if tau < tz - dt {
                assert!(wi > 0.0, "w must be positive at |τ|={}", tau);
            } else if tau > tz + dt && tau < 2.0 * tz {
                assert!(wi < 0.0, "w must be negative at |τ|={}", tau);
            }
        }
    }

    #[test]
    fn ricker_integrates_to_zero() {
        // Long window fully covering both tails: the zero-mean property
        // survives discretization to far below the tolerance.
        let (f0, dt, t0, nt) = (15.0, 1.0e-3, 0.15, 600);
        let w = ricker(f0, dt, nt, t0);
        let integral: f64 = w.iter().sum::<f64>() * dt;
        assert!(integral.abs() < 1e-6, "discrete integral {}", integral);
    }

    #[test]
    fn cfl_examples() {
        let bound = cfl_bound(4000.0, 10.0);
        assert!((bound - 1.767_766_952_966_368_9e-3).abs() < 1e-12);
        let v = VelocityModel::homogeneous(4000.0, 32, 32, 10.0);
        assert!(cfl_check(&v, 1.0e-3));
        assert!(cfl_check(&v, 0.0));
        let slow = VelocityModel::homogeneous(V_FLOOR, 32, 32, 10.0);
        assert!(!cfl_check(&slow, 1.0));
    }

    #[test]
    fn zero_source_gives_zero_gather() {
        let v = VelocityModel::homogeneous(3000.0, 32, 32, 10.0);
        let geom = SurveyGeometry::default();
        let g = simulate_shot_with_wavelet(&v, 16, &geom, &vec![0.0; geom.nt]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn doubling_source_doubles_gather() {
        let v = generate_velocity_model(ModelStyle::Layered, 3);
        let geom = SurveyGeometry::default();
        let w = ricker(geom.f0, geom.dt, geom.nt, geom.t0());
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let g1 = simulate_shot_with_wavelet(&v, 16, &geom, &w).unwrap();
        let g2 = simulate_shot_with_wavelet(&v, 16, &geom, &w2).unwrap();
        let num: f64 = g1
            .iter()
            .zip(&g2)
            .map(|(a, b)| (2.0 * a - b) * (2.0 * a - b))
            .sum();
        let den: f64 = g2.iter().map(|b| b * b).sum();
        assert!((num / den).sqrt() < 1e-10);
    }

    #[test]
    fn first_arrival_matches_analytic_traveltime() {
        let worst = homogeneous_first_arrival_worst_error();
        assert!(worst <= 2.0, "worst first-arrival error {:.2} steps", worst);
    }

    #[test]
    fn reciprocity_source_receiver_swap() {
        let v = generate_velocity_model(ModelStyle::Fault, 7);
        let geom = SurveyGeometry::default();
        let (a, b) = (4usize, 25usize);
        let ga = simulate_shot(&v, a, &geom).unwrap();
        let gb = simulate_shot(&v, b, &geom).unwrap();
        let nr = geom.n_receivers();
        let tr_ab: Vec<f64> = (0..geom.nt).map(|n| ga[n * nr + b]).collect();
        let tr_ba: Vec<f64> = (0..geom.nt).map(|n| gb[n * nr + a]).collect();
        let num: f64 = tr_ab.iter().zip(&tr_ba).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = tr_ab.iter().map(|x| x * x).sum();
        assert!(
            (num / den).sqrt() < 1e-3,
            "reciprocity violation {:.2e}",
            (num / den).sqrt()
        );
    }

    #[test]
    fn stability_over_generator_seeds() {
        let geom = SurveyGeometry::default();
        for seed in 0..100u64 {
            let style = if seed % 2 == 0 { ModelStyle::Layered } else { ModelStyle::Fault };
            let v = generate_velocity_model(style, seed);
            let g = simulate_shot(&v, 16, &geom).unwrap();
            let peak = g.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            assert!(peak.is_finite() && peak < 1e6, "seed {}: peak {}", seed, peak);
        }
    }

    #[test]
    fn determinism_bitwise() {
        let v = generate_velocity_model(ModelStyle::Layered, 11);
        let v2 = generate_velocity_model(ModelStyle::Layered, 11);
        assert_eq!(v.grid, v2.grid);
        let geom = SurveyGeometry::default();
        let g1 = simulate_survey(&v, &geom).unwrap();
        let g2 = simulate_survey(&v, &geom).unwrap();
        assert_eq!(g1.data, g2.data);
    }

    #[test]
    fn survey_shape_and_shot_permutation() {
        let v = generate_velocity_model(ModelStyle::Layered, 5);
        let geom = SurveyGeometry::default();
        let rec = simulate_survey(&v, &geom).unwrap();
        assert_eq!(
            (rec.n_shots, rec.nt, rec.n_receivers),
            (3, geom.nt, 32)
        );
        let mut permuted = geom.clone();
        permuted.shot_columns = vec![28, 4, 16];
        let rec_p = simulate_survey(&v, &permuted).unwrap();
        assert_eq!(rec.shot(0), rec_p.shot(1));
        assert_eq!(rec.shot(1), rec_p.shot(2));
        assert_eq!(rec.shot(2), rec_p.shot(0));
    }

    #[test]
    fn different_models_give_different_records() {
        let geom = SurveyGeometry::default();
        let r1 = simulate_survey(&generate_velocity_model(ModelStyle::Layered, 1), &geom).unwrap();
        let r2 = simulate_survey(&generate_velocity_model(ModelStyle::Layered, 2), &geom).unwrap();
        let diff: f64 = r1.data.iter().zip(&r2.data).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(diff.sqrt() > 0.0);
    }

    #[test]
    fn generator_style_structure() {
        for seed in 0..20u64 {
            let lay = generate_velocity_model(ModelStyle::Layered, seed);
            assert!(lay.in_bounds());
            for z in 0..lay.nz {
                let row = &lay.grid[z * lay.nx..(z + 1) * lay.nx];
                assert!(row.iter().all(|&v| v == row[0]), "layered rows constant");
            }
            // Depth trend: bottom-half mean ≥ top-half mean.
            let half = lay.nz / 2;
            let top: f64 = lay.grid[..half * lay.nx].iter().sum::<f64>();
            let bottom: f64 = lay.grid[half * lay.nx..].iter().sum::<f64>();
            assert!(bottom >= top);

            let flt = generate_velocity_model(ModelStyle::Fault, seed);
            assert!(flt.in_bounds());
            let broken = (0..flt.nz).any(|z| {
                let row = &flt.grid[z * flt.nx..(z + 1) * flt.nx];
                row.iter().any(|&v| v != row[0])
            });
            assert!(broken, "fault model seed {} has no lateral break", seed);
        }
    }

    #[test]
    fn geometry_validation_errors() {
        let v = VelocityModel::homogeneous(3000.0, 32, 32, 10.0);
        let mut geom = SurveyGeometry::default();
        geom.shot_columns = vec![40];
        assert!(matches!(
            simulate_shot(&v, 40, &geom),
            Err(SimError::BadGeometry(_))
        ));
        let mut fast = SurveyGeometry::default();
        fast.dt = 5.0e-3;
        assert!(matches!(
            simulate_shot(&v, 16, &fast),
            Err(SimError::CflViolation { .. })
        ));
        // Slow medium: 0.3 s record cannot cover two-way travel.
        let slow = VelocityModel::homogeneous(1500.0, 32, 32, 10.0);
        assert!(matches!(
            simulate_shot(&slow, 16, &SurveyGeometry::default()),
            Err(SimError::BadGeometry(_))
        ));
    }
}
