//! Dataset generation and persistence, training (flow and diffusion
//! objectives), inversion, the NFE benchmark, ablations, attention export,
//! and checkpoint plumbing behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowcore::{self, FlowError, PathKind, PathSpec};
use crate::metrics::{self, MetricError, MetricReport};
use crate::nets::{
    self, ChannelGateMode, EncoderConfig, EncoderToggles, Fusion, Injection, NetError, UNetConfig,
    VelocityNet,
};
use crate::samplers::{
    ddim_sample, ddpm_sample, dpm_solver2_sample, rf_euler_sample, SampleOutput, SamplerError,
    SamplerKind, SamplerSpec,
};
use crate::tensor::{self, no_grad, Tensor, TensorError};
use crate::wavesim::{
    generate_velocity_model, simulate_survey, ModelStyle, SimError, SurveyGeometry, V_CEIL, V_FLOOR,
};

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad-arg: {0}")]
    BadArg(String),
    #[error("data: {0}")]
    Data(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("selftest failed: {0}")]
    Selftest(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

// ---------------------------------------------------------------------------
// f32 blob IO
// ---------------------------------------------------------------------------

pub fn write_f32_blob(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32_blob(path: &Path, expect_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expect_len * 4 {
        return Err(PipelineError::Data(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect_len * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// On-disk dataset description. Blobs store raw (un-normalized) values as
/// little-endian f32; normalization constants live here.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n_samples: usize,
    /// (n, nz, nx), m/s.
    pub velocity_shape: [usize; 3],
    pub velocity_file: String,
    /// (n, shots, nt, receivers), raw amplitude.
    pub seismic_shape: [usize; 4],
    pub seismic_file: String,
    /// Global velocity range over the whole set, m/s.
    pub v_min: f64,
    pub v_max: f64,
    /// Per-record max |amplitude| for seismic normalization.
    pub seis_max_abs: Vec<f64>,
    pub seed: u64,
    pub styles: Vec<String>,
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub velocity: Vec<f32>,
    pub seismic: Vec<f32>,
    pub dir: PathBuf,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid_hw(&self) -> (usize, usize) {
        (self.manifest.velocity_shape[1], self.manifest.velocity_shape[2])
    }

    /// Velocity grid in m/s.
    pub fn velocity_ms(&self, i: usize) -> Vec<f64> {
        let n = self.manifest.velocity_shape[1] * self.manifest.velocity_shape[2];
        self.velocity[i * n..(i + 1) * n].iter().map(|&v| v as f64).collect()
    }

    /// Velocity grid affinely mapped to [-1, 1] by the global range.
    pub fn velocity_norm(&self, i: usize) -> Vec<f64> {
        let (lo, hi) = (self.manifest.v_min, self.manifest.v_max);
        self.velocity_ms(i).iter().map(|&v| norm_velocity(v, lo, hi)).collect()
    }

    /// Seismic record scaled by its max-abs, as a (shots, nt, receivers)
    /// tensor.
    pub fn seismic_norm(&self, i: usize) -> Tensor {
        let [_, s, t, r] = self.manifest.seismic_shape;
        let n = s * t * r;
        let scale = 1.0 / self.manifest.seis_max_abs[i].max(1e-30);
        let data: Vec<f64> = self.seismic[i * n..(i + 1) * n]
            .iter()
            .map(|&v| v as f64 * scale)
            .collect();
        Tensor::from_vec(data, &[s, t, r]).expect("manifest shape consistent")
    }
}

pub fn norm_velocity(v_ms: f64, v_min: f64, v_max: f64) -> f64 {
    2.0 * (v_ms - v_min) / (v_max - v_min) - 1.0
}

/// Inverse of [`norm_velocity`], clipped to the physical range.
pub fn denorm_velocity(x: f64, v_min: f64, v_max: f64) -> f64 {
    (v_min + 0.5 * (x + 1.0) * (v_max - v_min)).clamp(V_FLOOR, V_CEIL)
}

/// Generate `n` (velocity, shot-gather) pairs with the default survey and
/// write `manifest.json`, `velocity.f32`, `seismic.f32` into `out_dir`.
/// Fully deterministic in (`n`, `styles`, `seed`).
pub fn gen_data(
    n: usize,
    styles: &[ModelStyle],
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n == 0 || styles.is_empty() {
        return Err(PipelineError::BadArg("need n >= 1 and at least one style".into()));
    }
    let geom = SurveyGeometry::default();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut velocity = Vec::new();
    let mut seismic = Vec::new();
    let mut seis_max_abs = Vec::with_capacity(n);
    let (mut v_min, mut v_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut nz_nx = (0usize, 0usize);
    for i in 0..n {
        let style = styles[i % styles.len()];
        let model_seed: u64 = master.random();
        let vel = generate_velocity_model(style, model_seed);
        nz_nx = (vel.nz, vel.nx);
        v_min = v_min.min(vel.v_min());
        v_max = v_max.max(vel.v_max());
        let rec = simulate_survey(&vel, &geom)?;
        seis_max_abs.push(rec.max_abs());
        velocity.extend(vel.grid.iter().map(|&v| v as f32));
        seismic.extend(rec.data.iter().map(|&v| v as f32));
    }
    if !(v_min < v_max) {
        return Err(PipelineError::Data(format!(
            "degenerate velocity range [{}, {}]",
            v_min, v_max
        )));
    }
    fs::create_dir_all(out_dir)?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        n_samples: n,
        velocity_shape: [n, nz_nx.0, nz_nx.1],
        velocity_file: "velocity.f32".into(),
        seismic_shape: [n, geom.n_shots(), geom.nt, geom.n_receivers()],
        seismic_file: "seismic.f32".into(),
        v_min,
        v_max,
        seis_max_abs,
        seed,
        styles: styles.iter().map(|s| s.token().to_string()).collect(),
    };
    write_f32_blob(&out_dir.join(&manifest.velocity_file), &velocity)?;
    write_f32_blob(&out_dir.join(&manifest.seismic_file), &seismic)?;
    fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.version != DATASET_VERSION {
        return Err(PipelineError::Data(format!(
            "dataset version {} unsupported",
            manifest.version
        )));
    }
    if !(manifest.v_min < manifest.v_max) {
        return Err(PipelineError::Data("manifest velocity range is degenerate".into()));
    }
    if manifest.seis_max_abs.len() != manifest.n_samples
        || manifest.velocity_shape[0] != manifest.n_samples
        || manifest.seismic_shape[0] != manifest.n_samples
    {
        return Err(PipelineError::Data("manifest shape/sample-count mismatch".into()));
    }
    let velocity = read_f32_blob(
        &dir.join(&manifest.velocity_file),
        manifest.velocity_shape.iter().product(),
    )?;
    let seismic = read_f32_blob(
        &dir.join(&manifest.seismic_file),
        manifest.seismic_shape.iter().product(),
    )?;
    Ok(Dataset { manifest, velocity, seismic, dir: dir.to_path_buf() })
}

// ---------------------------------------------------------------------------
// Training configuration and checkpoint format
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Rectified-flow velocity regression with an L1 loss.
    CrfL1,
    /// Noise prediction on the VP path with an L2 loss.
    EpsL2,
}

impl Objective {
    pub fn token(self) -> &'static str {
        match self {
            Objective::CrfL1 => "crf-l1",
            Objective::EpsL2 => "eps-l2",
        }
    }

    pub fn parse(s: &str) -> Option<Objective> {
        match s {
            "crf-l1" => Some(Objective::CrfL1),
            "eps-l2" => Some(Objective::EpsL2),
            _ => None,
        }
    }

    pub fn path(self) -> PathSpec {
        match self {
            Objective::CrfL1 => PathSpec::rectified(),
            Objective::EpsL2 => PathSpec::vp_default(),
        }
    }

    /// Which samplers a model trained on this objective supports.
    pub fn supports(self, kind: SamplerKind) -> bool {
        match self {
            Objective::CrfL1 => kind == SamplerKind::RfEuler,
            Objective::EpsL2 => kind != SamplerKind::RfEuler,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(objective: Objective, seed: u64) -> TrainConfig {
        TrainConfig { objective, batch_size: 16, epochs: 60, lr: 3e-4, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || !(self.lr > 0.0) {
            return Err(PipelineError::BadArg(
                "batch_size, epochs, lr must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub objective: Objective,
    pub encoder: EncoderConfig,
    pub toggles: EncoderToggles,
    pub unet: UNetConfig,
    pub path: PathSpec,
    pub train: TrainConfig,
    pub params_file: String,
    pub params: Vec<ParamEntry>,
    /// Mean training loss per epoch.
    pub loss_log: Vec<f64>,
    /// Seed the parameter tensors were initialized from; reload rebuilds
    /// the same architecture and overwrites the values.
    pub init_seed: u64,
    pub steps_taken: usize,
}

pub struct LoadedCheckpoint {
    pub model: VelocityNet,
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint(dir: &Path, model: &VelocityNet, meta: &mut CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = model.params();
    let mut blob: Vec<f32> = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    let mut seen = std::collections::HashSet::new();
    for (name, p) in &params {
        if !seen.insert(name.clone()) {
            return Err(PipelineError::Data(format!("duplicate parameter name {}", name)));
        }
        let offset = blob.len();
        blob.extend(p.to_vec().iter().map(|&v| v as f32));
        entries.push(ParamEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset,
            len: p.numel(),
        });
    }
    meta.params = entries;
    meta.params_file = "params.f32".into();
    write_f32_blob(&dir.join(&meta.params_file), &blob)?;
    fs::write(dir.join("checkpoint.json"), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let meta: CheckpointMeta =
        serde_json::from_slice(&fs::read(dir.join("checkpoint.json"))?)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(PipelineError::Data(format!(
            "checkpoint version {} unsupported",
            meta.version
        )));
    }
    let total: usize = meta.params.iter().map(|e| e.len).sum();
    let blob = read_f32_blob(&dir.join(&meta.params_file), total)?;
    let model = VelocityNet::with_toggles(meta.encoder, meta.toggles, meta.unet, meta.init_seed)?;
    let live = model.params();
    if live.len() != meta.params.len() {
        return Err(PipelineError::Data(format!(
            "checkpoint has {} parameters, model expects {}",
            meta.params.len(),
            live.len()
        )));
    }
    for ((name, p), entry) in live.iter().zip(&meta.params) {
        if *name != entry.name || p.shape() != entry.shape.as_slice() {
            return Err(PipelineError::Data(format!(
                "parameter mismatch: model {} {:?} vs checkpoint {} {:?}",
                name,
                p.shape(),
                entry.name,
                entry.shape
            )));
        }
        let src = &blob[entry.offset..entry.offset + entry.len];
        p.update_data(|d| {
            for (dv, sv) in d.iter_mut().zip(src) {
                *dv = *sv as f64;
            }
        });
    }
    Ok(LoadedCheckpoint { model, meta })
}

// ---------------------------------------------------------------------------
// AdamW with cosine learning-rate annealing
// ---------------------------------------------------------------------------

pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamW {
    pub fn new(params: &[(String, Tensor)]) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam step using each tensor's accumulated
    /// gradient; parameters without gradients are skipped.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) {
        let ones = vec![1.0; params.len()];
        self.step_scaled(params, lr, &ones);
    }

    /// Like `step`, with a per-parameter learning-rate multiplier
    /// (`scales[i]` applies to `params[i]`). Weight decay follows the scaled
    /// rate so decay stays proportional to the effective step size.
    pub fn step_scaled(&mut self, params: &[(String, Tensor)], lr: f64, scales: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            let plr = lr * scales[i];
            p.update_data(|d| {
                for j in 0..d.len() {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    d[j] -= plr * (mh / (vh.sqrt() + eps) + wd * d[j]);
                }
            });
        }
    }
}

/// Per-group learning-rate multiplier. The conditioning branch (seismic
/// encoder and in-trunk fusion layers) sits behind long, gate-attenuated
/// gradient paths and trains far slower than the trunk at desk-scale step
/// budgets; boosting it keeps the generator from converging to an
/// effectively unconditional field first.
pub fn param_lr_scale(name: &str) -> f64 {
    if name.starts_with("enc.") {
        8.0
    } else if name.contains(".fuse.") {
        2.0
    } else {
        1.0
    }
}

/// Cosine annealing from `lr` at step 0 to 0 at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

pub struct TrainedModel {
    pub model: VelocityNet,
    pub meta: CheckpointMeta,
}

fn net_to_tensor_err(e: NetError) -> TensorError {
    match e {
        NetError::Tensor(t) => t,
        // Unreachable once shapes are validated; keep the failure visible.
        NetError::BadConfig(_) => TensorError::NonFinite { op: "net-config" },
    }
}

fn randn_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    Tensor::from_vec(data, shape).expect("shape consistent")
}

/// Train a model on `indices` of `ds`. Deterministic given the config seed:
/// parameter init, data order, times, and noise all derive from it.
pub fn train(
    ds: &Dataset,
    indices: &[usize],
    tcfg: &TrainConfig,
    ecfg: EncoderConfig,
    toggles: EncoderToggles,
    ucfg: UNetConfig,
    mut progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<TrainedModel> {
    tcfg.validate()?;
    if indices.is_empty() {
        return Err(PipelineError::BadArg("empty training index set".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(PipelineError::BadArg(format!("index {} outside dataset", bad)));
    }
    let (h, w) = ds.grid_hw();
    let path = tcfg.objective.path();
    let model = VelocityNet::with_toggles(ecfg, toggles, ucfg, tcfg.seed)?;
    let params = model.params();
    let lr_scales: Vec<f64> = params.iter().map(|(n, _)| param_lr_scale(n)).collect();
    let mut opt = AdamW::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x9E37_79B9_7F4A_7C15);

    let steps_per_epoch = indices.len().div_ceil(tcfg.batch_size);
    let total_steps = tcfg.epochs * steps_per_epoch;
    let mut gstep = 0usize;
    let mut loss_log = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let mut order = indices.to_vec();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut sum = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            for &idx in chunk {
                let t: f64 = rng.random();
                let x1 = randn_tensor(&mut rng, &[1, h, w]);
                let v_true = Tensor::from_vec(ds.velocity_norm(idx), &[1, h, w])?;
                let seis = ds.seismic_norm(idx);
                let loss = match tcfg.objective {
                    Objective::CrfL1 => flowcore::crf_loss(
                        |x, tt, c| model.forward(x, tt, c).map_err(net_to_tensor_err),
                        &v_true,
                        &seis,
                        &x1,
                        t,
                    )?,
                    Objective::EpsL2 => {
                        let x_t = flowcore::vp_interpolate(&v_true, &x1, &path, t)?;
                        let out = model.forward(&x_t, t, &seis)?;
                        let r = out.sub(&x1)?;
                        r.mul(&r)?.mean_all()
                    }
                };
                let lv = loss.item();
                if !lv.is_finite() {
                    return Err(PipelineError::NonFiniteLoss { step: gstep });
                }
                loss.scale(1.0 / chunk.len() as f64).backward()?;
                sum += lv;
            }
            opt.step_scaled(&params, cosine_lr(tcfg.lr, gstep, total_steps), &lr_scales);
            for (_, p) in &params {
                p.zero_grad();
            }
            gstep += 1;
        }
        let epoch_mean = sum / order.len() as f64;
        loss_log.push(epoch_mean);
        if let Some(cb) = progress.as_mut() {
            cb(epoch, epoch_mean);
        }
    }

    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        objective: tcfg.objective,
        encoder: ecfg,
        toggles,
        unet: ucfg,
        path,
        train: *tcfg,
        params_file: String::new(),
        params: Vec::new(),
        loss_log,
        init_seed: tcfg.seed,
        steps_taken: gstep,
    };
    Ok(TrainedModel { model, meta })
}

// ---------------------------------------------------------------------------
// Inversion
// ---------------------------------------------------------------------------

/// Decorrelates the prior draw from any internal sampler noise stream
/// seeded by the same user-facing seed.
const PRIOR_SALT: u64 = 0xC3D2_E1F0_A5B4_8796;

pub struct InvertOutput {
    /// Predicted velocity grid, m/s, clipped to the physical range.
    pub grid_ms: Vec<f64>,
    pub nfe: usize,
    pub report: Option<MetricReport>,
}

/// Run the configured sampler from pure noise given precomputed
/// conditioning features. The prior draw is seeded from the sampler seed.
pub fn sample_velocity(
    model: &VelocityNet,
    meta: &CheckpointMeta,
    cond: &Tensor,
    shape_hw: (usize, usize),
    spec: &SamplerSpec,
) -> Result<SampleOutput> {
    if !meta.objective.supports(spec.kind) {
        return Err(PipelineError::Mismatch(format!(
            "objective {} does not drive sampler {}",
            meta.objective.token(),
            spec.kind.token()
        )));
    }
    let mut prior_rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ PRIOR_SALT);
    let x1 = randn_tensor(&mut prior_rng, &[1, shape_hw.0, shape_hw.1]);
    let net = |x: &Tensor, t: f64, c: &Tensor| {
        model.unet.forward(x, t, c).map_err(net_to_tensor_err)
    };
    let out = no_grad(|| match spec.kind {
        SamplerKind::RfEuler => rf_euler_sample(&net, &x1, cond, spec),
        SamplerKind::Ddpm => ddpm_sample(&net, &x1, cond, spec, &meta.path),
        SamplerKind::Ddim => ddim_sample(&net, &x1, cond, spec, &meta.path),
        SamplerKind::DpmSolver2 => dpm_solver2_sample(&net, &x1, cond, spec, &meta.path),
    })?;
    Ok(out)
}

/// Encode one record and invert it; computes metrics against the stored
/// ground truth.
pub fn invert_record(
    ckpt: &LoadedCheckpoint,
    ds: &Dataset,
    index: usize,
    spec: &SamplerSpec,
    gate_mode: ChannelGateMode,
) -> Result<InvertOutput> {
    if index >= ds.len() {
        return Err(PipelineError::BadArg(format!("index {} outside dataset", index)));
    }
    let seis = ds.seismic_norm(index);
    let cond = no_grad(|| ckpt.model.encoder.encode_with_mode(&seis, gate_mode))?.0;
    let (h, w) = ds.grid_hw();
    let out = sample_velocity(&ckpt.model, &ckpt.meta, &cond.map, (h, w), spec)?;
    let (lo, hi) = (ds.manifest.v_min, ds.manifest.v_max);
    let grid_ms: Vec<f64> = out.x.to_vec().iter().map(|&x| denorm_velocity(x, lo, hi)).collect();
    let truth = ds.velocity_ms(index);
    let report = metrics::report(&grid_ms, &truth, lo, hi, h, w)?;
    Ok(InvertOutput { grid_ms, nfe: out.nfe, report: Some(report) })
}

// ---------------------------------------------------------------------------
// NFE benchmark
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct BenchCell {
    pub ssim: f64,
    pub mae: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub nfe: usize,
    pub cells: Vec<(SamplerKind, BenchCell)>,
    pub best: SamplerKind,
}

/// Steps needed for `kind` to spend exactly `nfe` model evaluations.
pub fn steps_for_nfe(kind: SamplerKind, nfe: usize) -> Result<usize> {
    match kind {
        SamplerKind::DpmSolver2 => {
            if nfe % 2 != 0 {
                return Err(PipelineError::BadArg(format!(
                    "dpm-solver2 needs an even evaluation budget, got {}",
                    nfe
                )));
            }
            Ok(nfe / 2)
        }
        _ => Ok(nfe),
    }
}

/// Compare samplers across evaluation budgets on a test subset. The flow
/// checkpoint drives rf-euler; the noise checkpoint drives the other three.
pub fn bench_nfe(
    rf: &LoadedCheckpoint,
    eps: &LoadedCheckpoint,
    ds: &Dataset,
    indices: &[usize],
    nfe_list: &[usize],
    seed: u64,
) -> Result<(Vec<BenchRow>, String)> {
    if indices.is_empty() || nfe_list.is_empty() {
        return Err(PipelineError::BadArg("need at least one record and one budget".into()));
    }
    if rf.meta.objective != Objective::CrfL1 || eps.meta.objective != Objective::EpsL2 {
        return Err(PipelineError::Mismatch(
            "bench-nfe expects a crf-l1 and an eps-l2 checkpoint".into(),
        ));
    }
    for nfe in nfe_list {
        steps_for_nfe(SamplerKind::DpmSolver2, *nfe)?;
    }
    let (h, w) = ds.grid_hw();
    let (lo, hi) = (ds.manifest.v_min, ds.manifest.v_max);

    // Conditioning features are model-dependent but sampler-independent:
    // encode each record once per checkpoint.
    let encode_all = |ckpt: &LoadedCheckpoint| -> Result<Vec<Tensor>> {
        indices
            .iter()
            .map(|&i| {
                let seis = ds.seismic_norm(i);
                Ok(no_grad(|| ckpt.model.encoder.encode(&seis))?.map)
            })
            .collect()
    };
    let conds_rf = encode_all(rf)?;
    let conds_eps = encode_all(eps)?;

    let truths: Vec<Vec<f64>> = indices.iter().map(|&i| ds.velocity_ms(i)).collect();
    let mut rows = Vec::with_capacity(nfe_list.len());
    for &nfe in nfe_list {
        let mut cells = Vec::new();
        for kind in SamplerKind::ALL {
            let steps = steps_for_nfe(kind, nfe)?;
            let (ckpt, conds) = if kind == SamplerKind::RfEuler {
                (rf, &conds_rf)
            } else {
                (eps, &conds_eps)
            };
            let started = Instant::now();
            let mut ssim_sum = 0.0;
            let mut mae_sum = 0.0;
            for (k, &index) in indices.iter().enumerate() {
                let spec =
                    SamplerSpec::new(kind, steps, seed ^ (index as u64).wrapping_mul(0x9E37))?;
                let out = sample_velocity(&ckpt.model, &ckpt.meta, &conds[k], (h, w), &spec)?;
                let grid: Vec<f64> =
                    out.x.to_vec().iter().map(|&x| denorm_velocity(x, lo, hi)).collect();
                debug_assert_eq!(out.nfe, nfe);
                let rep = metrics::report(&grid, &truths[k], lo, hi, h, w)?;
                ssim_sum += rep.ssim;
                mae_sum += rep.mae;
            }
            let seconds = started.elapsed().as_secs_f64();
            cells.push((
                kind,
                BenchCell {
                    ssim: ssim_sum / indices.len() as f64,
                    mae: mae_sum / indices.len() as f64,
                    seconds,
                },
            ));
        }
        let best = cells
            .iter()
            .max_by(|a, b| a.1.ssim.total_cmp(&b.1.ssim))
            .map(|(k, _)| *k)
            .expect("cells nonempty");
        rows.push(BenchRow { nfe, cells, best });
    }

    let mut csv = String::new();
    csv.push_str(
        "# sampler comparison at fixed model-evaluation budgets (NFE)\n\
         # ssim columns: mean structural similarity on the test subset (quality metric; \
         unlabeled-metric assumption: SSIM)\n\
         # mae columns: mean absolute error, m/s; seconds: wall-clock for the subset\n",
    );
    csv.push_str(&format!("# records={} seed={}\n", indices.len(), seed));
    csv.push_str("nfe");
    for kind in SamplerKind::ALL {
        let tok = kind.token();
        csv.push_str(&format!(",{}_ssim,{}_mae,{}_seconds", tok, tok, tok));
    }
    csv.push_str(",best\n");
    for row in &rows {
        csv.push_str(&format!("{}", row.nfe));
        for (_, cell) in &row.cells {
            csv.push_str(&format!(",{:.6},{:.3},{:.3}", cell.ssim, cell.mae, cell.seconds));
        }
        csv.push_str(&format!(",{}\n", row.best.token()));
    }
    Ok((rows, csv))
}

/// Coefficient of determination of the least-squares line through
/// (x, y) pairs; used to check that sampler wall-clock is linear in NFE.
pub fn linear_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    (sxy * sxy) / (sxx * syy)
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateVariant {
    Conditioning { injection: Injection, fusion: Fusion },
    Encoder(EncoderToggles),
}

impl AblateVariant {
    pub fn token(&self) -> String {
        match self {
            AblateVariant::Conditioning { injection, fusion } => {
                format!("{}+{}", injection.token(), fusion.token())
            }
            AblateVariant::Encoder(t) => format!("enc-{}", t.bits()),
        }
    }

    pub fn parse(s: &str) -> Option<AblateVariant> {
        if let Some(bits) = s.strip_prefix("enc-") {
            return EncoderToggles::from_bits(bits).map(AblateVariant::Encoder);
        }
        let (inj, fus) = s.split_once('+')?;
        Some(AblateVariant::Conditioning {
            injection: Injection::parse(inj)?,
            fusion: Fusion::parse(fus)?,
        })
    }
}

/// Expand a comma-separated variant list. `conditioning-set` is the
/// injection/fusion comparison, `encoder-set` the 2^3 toggle design, `all`
/// both.
pub fn expand_variants(spec: &str) -> Result<Vec<AblateVariant>> {
    let conditioning = || {
        vec![
            AblateVariant::Conditioning { injection: Injection::Layerwise, fusion: Fusion::Mlp },
            AblateVariant::Conditioning { injection: Injection::Early, fusion: Fusion::Mlp },
            AblateVariant::Conditioning { injection: Injection::Layerwise, fusion: Fusion::Adain },
            AblateVariant::Conditioning { injection: Injection::Layerwise, fusion: Fusion::Adagn },
        ]
    };
    let encoder = || {
        (0..8u8)
            .map(|bits| {
                AblateVariant::Encoder(EncoderToggles {
                    temporal: bits & 4 != 0,
                    spatial: bits & 2 != 0,
                    aggregate: bits & 1 != 0,
                })
            })
            .collect::<Vec<_>>()
    };
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        match part {
            "" => continue,
            "conditioning-set" => out.extend(conditioning()),
            "encoder-set" => out.extend(encoder()),
            "all" => {
                out.extend(conditioning());
                out.extend(encoder());
            }
            key => out.push(
                AblateVariant::parse(key)
                    .ok_or_else(|| PipelineError::BadArg(format!("unknown variant key '{}'", key)))?,
            ),
        }
    }
    if out.is_empty() {
        return Err(PipelineError::BadArg("no variants requested".into()));
    }
    Ok(out)
}

/// Reduced training budget shared by every ablation run so comparisons are
/// fair and desk-scale.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AblateProfile {
    pub epochs: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub enc_channels: usize,
    pub base_channels: usize,
    pub out_hw: usize,
    pub sampler_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AblateProfile {
    fn default() -> Self {
        AblateProfile {
            epochs: 30,
            train_count: 128,
            eval_count: 32,
            enc_channels: 16,
            base_channels: 16,
            out_hw: 16,
            sampler_steps: 5,
            batch_size: 16,
            lr: 3e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblateRow {
    pub token: String,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub per_seed_ssim: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train each variant with each seed under the shared reduced profile and
/// evaluate on a held-out slice with the flow sampler.
pub fn ablate(
    ds: &Dataset,
    variants: &[AblateVariant],
    seeds: &[u64],
    profile: &AblateProfile,
    mut progress: Option<&mut dyn FnMut(&str, u64, f64)>,
) -> Result<(Vec<AblateRow>, String)> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(PipelineError::BadArg("need at least one variant and one seed".into()));
    }
    if profile.train_count + profile.eval_count > ds.len() {
        return Err(PipelineError::BadArg(format!(
            "dataset too small: {} train + {} eval > {}",
            profile.train_count,
            profile.eval_count,
            ds.len()
        )));
    }
    let [_, s, t, r] = ds.manifest.seismic_shape;
    let train_idx: Vec<usize> = (0..profile.train_count).collect();
    let eval_idx: Vec<usize> =
        (profile.train_count..profile.train_count + profile.eval_count).collect();

    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let (toggles, injection, fusion) = match *variant {
            AblateVariant::Conditioning { injection, fusion } => {
                (EncoderToggles::default(), injection, fusion)
            }
            AblateVariant::Encoder(tg) => (tg, Injection::Layerwise, Fusion::Mlp),
        };
        let ecfg = EncoderConfig {
            n_shots: s,
            in_time: t,
            in_receivers: r,
            temporal_kernel: 11,
            channels: profile.enc_channels,
            out_hw: profile.out_hw,
        };
        let ucfg = UNetConfig {
            levels: 3,
            base_channels: profile.base_channels,
            time_embed_dim: 64,
            injection,
            fusion,
        };
        let mut ssims = Vec::with_capacity(seeds.len());
        let mut maes = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let tcfg = TrainConfig {
                objective: Objective::CrfL1,
                batch_size: profile.batch_size,
                epochs: profile.epochs,
                lr: profile.lr,
                seed,
            };
            let trained = train(ds, &train_idx, &tcfg, ecfg, toggles, ucfg, None)?;
            let ckpt = LoadedCheckpoint { model: trained.model, meta: trained.meta };
            let spec = SamplerSpec::new(SamplerKind::RfEuler, profile.sampler_steps, seed)?;
            let mut ssim_sum = 0.0;
            let mut mae_sum = 0.0;
            for &i in &eval_idx {
                let out = invert_record(&ckpt, ds, i, &spec, ChannelGateMode::Learned)?;
                let rep = out.report.expect("truth available");
                ssim_sum += rep.ssim;
                mae_sum += rep.mae;
            }
            let ssim = ssim_sum / eval_idx.len() as f64;
            ssims.push(ssim);
            maes.push(mae_sum / eval_idx.len() as f64);
            if let Some(cb) = progress.as_mut() {
                cb(&variant.token(), seed, ssim);
            }
        }
        let (sm, ss) = mean_std(&ssims);
        let (mm, ms) = mean_std(&maes);
        rows.push(AblateRow {
            token: variant.token(),
            ssim_mean: sm,
            ssim_std: ss,
            mae_mean: mm,
            mae_std: ms,
            per_seed_ssim: ssims,
        });
    }

    let mut csv = String::new();
    csv.push_str("# architecture ablations: mean +/- std over seeds of held-out mean ssim / mae\n");
    csv.push_str(&format!(
        "# profile: epochs={} train={} eval={} enc_channels={} base_channels={} steps={}\n",
        profile.epochs,
        profile.train_count,
        profile.eval_count,
        profile.enc_channels,
        profile.base_channels,
        profile.sampler_steps
    ));
    csv.push_str(&format!("# seeds={:?}\n", seeds));
    csv.push_str("variant,ssim_mean,ssim_std,mae_mean,mae_std,n_seeds\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.3},{:.3},{}\n",
            row.token,
            row.ssim_mean,
            row.ssim_std,
            row.mae_mean,
            row.mae_std,
            seeds.len()
        ));
    }
    Ok((rows, csv))
}

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

/// Binary 8-bit PGM (P5). Values expected in [0, 1]; clipped otherwise.
pub fn write_pgm(path: &Path, data01: &[f64], h: usize, w: usize) -> Result<()> {
    if data01.len() != h * w {
        return Err(PipelineError::BadArg(format!(
            "pgm: {} values for {}x{}",
            data01.len(),
            h,
            w
        )));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend(data01.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

pub struct AttnExport {
    pub files: Vec<PathBuf>,
    /// (config label, mean SSIM) for learned / top-10% mask / uniform
    /// channel gates.
    pub gate_ssim: Vec<(String, f64)>,
}

/// Write attention diagnostics for one record: per-shot channel energy
/// fractions (CSV), spatial masks (PGM), channel gates (CSV), and SSIM
/// under the three channel-gate configurations.
pub fn export_attn(
    ckpt: &LoadedCheckpoint,
    ds: &Dataset,
    index: usize,
    out_dir: &Path,
    sampler_seed: u64,
) -> Result<AttnExport> {
    if index >= ds.len() {
        return Err(PipelineError::BadArg(format!("index {} outside dataset", index)));
    }
    fs::create_dir_all(out_dir)?;
    let seis = ds.seismic_norm(index);
    let (_, maps) = no_grad(|| ckpt.model.encoder.encode_with_mode(&seis, ChannelGateMode::Learned))?;
    let mut files = Vec::new();

    let mut energy_csv =
        String::from("# per-shot temporal channel energy fractions (sum to 1 per shot)\nshot,channel,fraction\n");
    let mut gates_csv = String::from("# learned channel-attention gates\nshot,channel,gate\n");
    for (shot, m) in maps.iter().enumerate() {
        let total: f64 = m.channel_energy.iter().sum::<f64>().max(1e-30);
        for (c, e) in m.channel_energy.iter().enumerate() {
            energy_csv.push_str(&format!("{},{},{:.9}\n", shot, c, e / total));
        }
        for (c, g) in m.channel_gate.iter().enumerate() {
            gates_csv.push_str(&format!("{},{},{:.9}\n", shot, c, g));
        }
        let pgm = out_dir.join(format!("attn_shot{}.pgm", shot));
        write_pgm(&pgm, &m.spatial_mask, m.mask_hw.0, m.mask_hw.1)?;
        files.push(pgm);
    }
    let energy_path = out_dir.join("temporal_energy.csv");
    fs::write(&energy_path, energy_csv)?;
    files.push(energy_path);
    let gates_path = out_dir.join("channel_gates.csv");
    fs::write(&gates_path, gates_csv)?;
    files.push(gates_path);

    // Channel-gate perturbation experiment.
    let spec = match ckpt.meta.objective {
        Objective::CrfL1 => SamplerSpec::new(SamplerKind::RfEuler, 5, sampler_seed)?,
        Objective::EpsL2 => SamplerSpec::new(SamplerKind::Ddim, 10, sampler_seed)?,
    };
    let configs = [
        ("learned", ChannelGateMode::Learned),
        ("top10-mask", ChannelGateMode::TopFrac(0.1)),
        ("uniform", ChannelGateMode::Uniform),
    ];
    let mut gate_ssim = Vec::new();
    let mut gate_csv = String::from("# inversion quality under channel-gate configurations\nconfig,ssim\n");
    for (label, mode) in configs {
        let out = invert_record(ckpt, ds, index, &spec, mode)?;
        let ssim = out.report.expect("truth available").ssim;
        gate_csv.push_str(&format!("{},{:.6}\n", label, ssim));
        gate_ssim.push((label.to_string(), ssim));
    }
    let gate_path = out_dir.join("gate_ssim.csv");
    fs::write(&gate_path, gate_csv)?;
    files.push(gate_path);

    Ok(AttnExport { files, gate_ssim })
}

// ---------------------------------------------------------------------------
// Selftest
// ---------------------------------------------------------------------------

fn check(cond: bool, label: &str, detail: String) -> Result<String> {
    if cond {
        Ok(format!("ok {}", label))
    } else {
        Err(PipelineError::Selftest(format!("{}: {}", label, detail)))
    }
}

/// Fast oracle battery behind the `selftest` subcommand: autodiff against
/// finite differences, schedule identities, integrator exactness, wave
/// first arrivals, metric identities, and evaluation accounting.
pub fn selftest() -> Result<Vec<String>> {
    let mut lines = Vec::new();

    // Autodiff through a representative composite graph.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn_tensor(&mut rng, &[2, 6, 6]);
    let k = randn_tensor(&mut rng, &[3, 2, 3, 3]).scale(0.4);
    let wsum = randn_tensor(&mut rng, &[27]);
    let err = tensor::grad_check(
        |p: &[Tensor]| {
            let h = p[0].conv2d(&p[1], (1, 1), (1, 1))?.silu();
            let h = h.group_norm(3, 1e-5)?.max_pool2d((2, 2), (2, 2))?;
            Ok(h.flatten().mul(&wsum)?.sum_all())
        },
        &[x, k],
        1e-5,
    )?;
    lines.push(check(err < 1e-5, "autodiff-composite", format!("rel err {}", err))?);

    // VP schedule identity.
    let path = PathSpec::vp_default();
    let worst = (0..=1000)
        .map(|i| {
            let (a, s) = flowcore::vp_schedule(&path, i as f64 / 1000.0);
            (a * a + s * s - 1.0).abs()
        })
        .fold(0.0f64, f64::max);
    lines.push(check(worst < 1e-12, "vp-identity", format!("max dev {}", worst))?);

    // Straight-path exactness of the flow integrator.
    let field = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.0], &[4]).unwrap();
    let fconst = {
        let f = field.clone();
        move |_x: &Tensor, _t: f64, _c: &Tensor| Ok(f.clone())
    };
    let x1 = Tensor::from_vec(vec![1.0, 2.0, -3.0, 0.5], &[4]).unwrap();
    let cond = Tensor::zeros(&[1]);
    let a = rf_euler_sample(&fconst, &x1, &cond, &SamplerSpec::new(SamplerKind::RfEuler, 1, 0)?)?;
    let b = rf_euler_sample(&fconst, &x1, &cond, &SamplerSpec::new(SamplerKind::RfEuler, 97, 0)?)?;
    let dev = a
        .x
        .to_vec()
        .iter()
        .zip(b.x.to_vec())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f64, f64::max);
    lines.push(check(dev < 1e-12, "rf-exactness", format!("N=1 vs N=97 dev {}", dev))?);
    lines.push(check(
        a.nfe == 1 && b.nfe == 97,
        "nfe-accounting",
        format!("{} {}", a.nfe, b.nfe),
    )?);

    // Wave simulator first arrivals on a homogeneous medium.
    let steps = crate::wavesim::homogeneous_first_arrival_worst_error();
    lines.push(check(steps <= 2.0, "first-arrival", format!("worst {} steps", steps))?);

    // Metric identities.
    let img: Vec<f64> = (0..1024).map(|i| (i as f64 * 0.37).sin().abs()).collect();
    let s_self = metrics::ssim(&img, &img, 32, 32)?;
    lines.push(check((s_self - 1.0).abs() < 1e-9, "ssim-self", format!("{}", s_self))?);
    let (p, q) = (0.5, 0.25);
    let expect = (2.0 * p * q + 1e-4) / (p * p + q * q + 1e-4);
    let s_const = metrics::ssim(&vec![p; 1024], &vec![q; 1024], 32, 32)?;
    lines.push(check(
        (s_const - expect).abs() < 1e-6,
        "ssim-constant",
        format!("{} vs {}", s_const, expect),
    )?);
    let other: Vec<f64> = img.iter().map(|v| 1.0 - v).collect();
    let (m, r) = (metrics::mae(&img, &other)?, metrics::rmse(&img, &other)?);
    lines.push(check(r >= m, "rmse-ge-mae", format!("{} vs {}", r, m))?);

    Ok(lines)
}
