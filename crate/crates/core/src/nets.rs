//! The conditional velocity-field network: seismic encoder, conditional
//! U-Net backbone, and the conditioning variants used in the ablations.

use crate::tensor::{concat, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid net config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetError>;

const GN_EPS: f64 = 1e-5;
const GN_GROUPS: usize = 8;

/// Seismic encoder geometry and width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub n_shots: usize,
    pub in_time: usize,
    pub in_receivers: usize,
    pub temporal_kernel: usize,
    pub channels: usize,
    pub out_hw: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_shots: 3,
            in_time: 300,
            in_receivers: 32,
            temporal_kernel: 11,
            channels: 32,
            out_hw: 32,
        }
    }
}

impl EncoderConfig {
    /// Field-scale preset (5 shots, 1000 samples, 70 receivers, 70x70 grid).
    pub fn field_preset() -> Self {
        EncoderConfig {
            n_shots: 5,
            in_time: 1000,
            in_receivers: 70,
            temporal_kernel: 11,
            channels: 64,
            out_hw: 70,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel % 2 == 0 || self.temporal_kernel == 0 {
            return Err(NetError::BadConfig(format!(
                "temporal_kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if self.n_shots == 0 || self.in_time == 0 || self.in_receivers == 0 || self.out_hw == 0 {
            return Err(NetError::BadConfig("all encoder dims must be positive".into()));
        }
        if self.channels < 4 {
            return Err(NetError::BadConfig(
                "encoder needs >= 4 channels for the attention bottleneck".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Injection {
    Early,
    Layerwise,
}

impl Injection {
    pub fn token(self) -> &'static str {
        match self {
            Injection::Early => "early",
            Injection::Layerwise => "layerwise",
        }
    }

    pub fn parse(s: &str) -> Option<Injection> {
        match s {
            "early" => Some(Injection::Early),
            "layerwise" => Some(Injection::Layerwise),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Mlp,
    Adain,
    Adagn,
}

impl Fusion {
    pub fn token(self) -> &'static str {
        match self {
            Fusion::Mlp => "mlp",
            Fusion::Adain => "adain",
            Fusion::Adagn => "adagn",
        }
    }

    pub fn parse(s: &str) -> Option<Fusion> {
        match s {
            "mlp" => Some(Fusion::Mlp),
            "adain" => Some(Fusion::Adain),
            "adagn" => Some(Fusion::Adagn),
            _ => None,
        }
    }
}

/// U-Net depth, width, and conditioning wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub time_embed_dim: usize,
    pub injection: Injection,
    pub fusion: Fusion,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 3,
            base_channels: 32,
            time_embed_dim: 64,
            injection: Injection::Layerwise,
            fusion: Fusion::Mlp,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(NetError::BadConfig(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.base_channels % GN_GROUPS != 0 {
            return Err(NetError::BadConfig(format!(
                "base_channels must be a positive multiple of {}, got {}",
                GN_GROUPS, self.base_channels
            )));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(NetError::BadConfig(format!(
                "time_embed_dim must be even and >= 4, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

/// Which encoder components run in learned form. A disabled component is
/// replaced by a parameter-light baseline: temporal off = average pooling
/// plus a 1x1 channel lift, spatial off = plain convolutions without
/// attention, aggregate off = channel mean across shots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderToggles {
    pub temporal: bool,
    pub spatial: bool,
    pub aggregate: bool,
}

impl Default for EncoderToggles {
    fn default() -> Self {
        EncoderToggles { temporal: true, spatial: true, aggregate: true }
    }
}

impl EncoderToggles {
    pub fn all_off() -> Self {
        EncoderToggles { temporal: false, spatial: false, aggregate: false }
    }

    /// Compact "tsa" bit string, e.g. "101" = temporal on, spatial off,
    /// aggregate on.
    pub fn bits(&self) -> String {
        format!(
            "{}{}{}",
            self.temporal as u8, self.spatial as u8, self.aggregate as u8
        )
    }

    pub fn from_bits(s: &str) -> Option<EncoderToggles> {
        let b: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<_>>()?;
        (b.len() == 3).then(|| EncoderToggles { temporal: b[0], spatial: b[1], aggregate: b[2] })
    }
}

/// How the encoder's channel attention is applied at inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChannelGateMode {
    /// Multiply by the learned sigmoid gates.
    Learned,
    /// Keep only the top fraction of channels ranked by gate-weighted L2
    /// energy; zero the rest.
    TopFrac(f64),
    /// Replace all gates by their mean (no per-channel reweighting).
    Uniform,
}

/// Encoder output: conditioning feature map (channels x out_hw x out_hw).
#[derive(Clone, Debug)]
pub struct CondFeatures {
    pub map: Tensor,
}

/// Attention byproducts of one shot's spatial block, for export.
#[derive(Clone, Debug)]
pub struct AttnMaps {
    pub channel_gate: Vec<f64>,
    pub channel_energy: Vec<f64>,
    pub spatial_mask: Vec<f64>,
    pub mask_hw: (usize, usize),
}

fn randn_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Replicate a channel vector (C) into a (C, h, w) map.
fn expand_channels(v: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let c = v.numel();
    Ok(v.reshape(&[c, 1, 1])?.adaptive_avg_pool2d((h, w))?)
}

/// Replicate a (1, H, W) map across `c` channels.
fn expand_mask(mask: &Tensor, c: usize) -> Result<Tensor> {
    let refs: Vec<&Tensor> = std::iter::repeat_n(mask, c).collect();
    Ok(concat(&refs, 0)?)
}

struct Conv2dLayer {
    w: Tensor,
    b: Option<Tensor>,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl Conv2dLayer {
    fn new(
        cin: usize,
        cout: usize,
        k: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k.0 * k.1;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::leaf(randn_vec(rng, cout * fan_in, std), &[cout, cin, k.0, k.1])
            .expect("conv weight shape");
        let b = bias.then(|| Tensor::leaf(vec![0.0; cout], &[cout]).expect("conv bias shape"));
        Conv2dLayer { w, b, stride, pad }
    }

    fn zeros(cin: usize, cout: usize, k: (usize, usize), pad: (usize, usize), bias: bool) -> Self {
        let w = Tensor::leaf(vec![0.0; cout * cin * k.0 * k.1], &[cout, cin, k.0, k.1])
            .expect("conv weight shape");
        let b = bias.then(|| Tensor::leaf(vec![0.0; cout], &[cout]).expect("conv bias shape"));
        Conv2dLayer { w, b, stride: (1, 1), pad }
    }

    /// He init scaled by `gain`; used for residual-path layers that should
    /// start with damped (but nonzero) influence so their gradient signal is
    /// alive from the first step.
    fn new_scaled(
        cin: usize,
        cout: usize,
        k: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Self {
        let fan_in = cin * k.0 * k.1;
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let w = Tensor::leaf(randn_vec(rng, cout * fan_in, std), &[cout, cin, k.0, k.1])
            .expect("conv weight shape");
        let b = bias.then(|| Tensor::leaf(vec![0.0; cout], &[cout]).expect("conv bias shape"));
        Conv2dLayer { w, b, stride, pad }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, self.stride, self.pad)?;
        Ok(match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}.w", prefix), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{}.b", prefix), b.clone()));
        }
    }
}

struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    fn new(din: usize, dout: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / din as f64).sqrt();
        let w = Tensor::leaf(randn_vec(rng, din * dout, std), &[din, dout])
            .expect("linear weight shape");
        let b = bias.then(|| Tensor::leaf(vec![0.0; dout], &[1, dout]).expect("linear bias shape"));
        Linear { w, b }
    }

    fn zeros(din: usize, dout: usize, bias: bool) -> Self {
        let w = Tensor::leaf(vec![0.0; din * dout], &[din, dout]).expect("linear weight shape");
        let b = bias.then(|| Tensor::leaf(vec![0.0; dout], &[1, dout]).expect("linear bias shape"));
        Linear { w, b }
    }

    /// He init scaled by `gain` (see `Conv2dLayer::new_scaled`).
    fn new_scaled(din: usize, dout: usize, bias: bool, rng: &mut ChaCha8Rng, gain: f64) -> Self {
        let std = gain * (2.0 / din as f64).sqrt();
        let w = Tensor::leaf(randn_vec(rng, din * dout, std), &[din, dout])
            .expect("linear weight shape");
        let b = bias.then(|| Tensor::leaf(vec![0.0; dout], &[1, dout]).expect("linear bias shape"));
        Linear { w, b }
    }

    /// x: (1, din) -> (1, dout)
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w)?;
        Ok(match &self.b {
            Some(b) => y.add(b)?,
            None => y,
        })
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}.w", prefix), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{}.b", prefix), b.clone()));
        }
    }
}

/// Squeeze-excite style channel gate: global pool, bottleneck MLP, sigmoid.
struct SeGate {
    fc1: Linear,
    fc2: Linear,
}

impl SeGate {
    fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = (channels / 4).max(1);
        SeGate { fc1: Linear::new(channels, mid, true, rng), fc2: Linear::new(mid, channels, true, rng) }
    }

    /// feat: (C, H, W) -> gate (C) in (0, 1).
    fn gate(&self, feat: &Tensor) -> Result<Tensor> {
        let c = feat.shape()[0];
        let pooled = feat.adaptive_avg_pool2d((1, 1))?.reshape(&[1, c])?;
        let g = self.fc2.forward(&self.fc1.forward(&pooled)?.silu())?.sigmoid();
        Ok(g.reshape(&[c])?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.push_params(&format!("{}.fc1", prefix), out);
        self.fc2.push_params(&format!("{}.fc2", prefix), out);
    }
}

/// Strided large-kernel temporal convolutions with a channel gate.
/// (1, in_time, R) -> (channels, out_hw, R). Convs are bias-free so zero
/// input maps to zero output.
struct TemporalBlock {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    gate: SeGate,
    out_hw: usize,
}

impl TemporalBlock {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = cfg.temporal_kernel;
        let pad = ((k - 1) / 2, 0);
        TemporalBlock {
            conv1: Conv2dLayer::new(1, cfg.channels, (k, 1), (4, 1), pad, false, rng),
            conv2: Conv2dLayer::new(cfg.channels, cfg.channels, (k, 1), (4, 1), pad, false, rng),
            gate: SeGate::new(cfg.channels, rng),
            out_hw: cfg.out_hw,
        }
    }

    fn forward(&self, shot: &Tensor) -> Result<Tensor> {
        let receivers = shot.shape()[2];
        let h = self.conv1.forward(shot)?.silu();
        let h = self.conv2.forward(&h)?.silu();
        let h = h.adaptive_avg_pool2d((self.out_hw, receivers))?;
        let g = self.gate.gate(&h)?;
        Ok(h.mul(&expand_channels(&g, self.out_hw, receivers)?)?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.push_params(&format!("{}.conv1", prefix), out);
        self.conv2.push_params(&format!("{}.conv2", prefix), out);
        self.gate.push_params(&format!("{}.gate", prefix), out);
    }
}

/// 2D refinement with channel attention and a spatial attention mask built
/// from the per-pixel channel average and maximum. Replicate padding keeps
/// constant inputs spatially constant.
struct SpatialBlock {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    gate: SeGate,
    attn_conv: Conv2dLayer,
    out_hw: usize,
}

impl SpatialBlock {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        SpatialBlock {
            conv1: Conv2dLayer::new(c, c, (3, 3), (1, 1), (0, 0), true, rng),
            conv2: Conv2dLayer::new(c, c, (3, 3), (1, 1), (0, 0), true, rng),
            gate: SeGate::new(c, rng),
            attn_conv: Conv2dLayer::new(2, 1, (7, 7), (1, 1), (0, 0), true, rng),
            out_hw: cfg.out_hw,
        }
    }

    /// feat: (C, out_hw, R) -> ((C, out_hw, out_hw), attention maps).
    fn forward(&self, feat: &Tensor, mode: ChannelGateMode) -> Result<(Tensor, AttnMaps)> {
        let c = feat.shape()[0];
        let h = self.conv1.forward(&feat.replicate_pad2d((1, 1))?)?.silu();
        let h = self.conv2.forward(&h.replicate_pad2d((1, 1))?)?.silu();
        let h = h.adaptive_avg_pool2d((self.out_hw, self.out_hw))?;
        let (hh, hw) = (self.out_hw, self.out_hw);

        let learned = self.gate.gate(&h)?;
        let gate_data = learned.to_vec();
        let energies = channel_energies(&h, &gate_data);
        let applied = match mode {
            ChannelGateMode::Learned => learned,
            ChannelGateMode::TopFrac(frac) => {
                let keep = ((frac * c as f64).ceil() as usize).clamp(1, c);
                let mut order: Vec<usize> = (0..c).collect();
                order.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]));
                let mut mask = vec![0.0; c];
                for &ci in order.iter().take(keep) {
                    mask[ci] = 1.0;
                }
                Tensor::from_vec(mask, &[c])?
            }
            ChannelGateMode::Uniform => {
                let mean = gate_data.iter().sum::<f64>() / c as f64;
                Tensor::full(&[c], mean)
            }
        };
        let h = h.mul(&expand_channels(&applied, hh, hw)?)?;

        // Per-pixel channel statistics via pooling over a (1, C, H*W) view.
        let flat = h.reshape(&[1, c, hh * hw])?;
        let avg = flat.avg_pool2d((c, 1), (c, 1))?.reshape(&[1, hh, hw])?;
        let max = flat.max_pool2d((c, 1), (c, 1))?.reshape(&[1, hh, hw])?;
        let stack = concat(&[&avg, &max], 0)?;
        let mask = self.attn_conv.forward(&stack.replicate_pad2d((3, 3))?)?.sigmoid();
        let out = h.mul(&expand_mask(&mask, c)?)?;

        let maps = AttnMaps {
            channel_gate: gate_data,
            channel_energy: energies,
            spatial_mask: mask.to_vec(),
            mask_hw: (hh, hw),
        };
        Ok((out, maps))
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.push_params(&format!("{}.conv1", prefix), out);
        self.conv2.push_params(&format!("{}.conv2", prefix), out);
        self.gate.push_params(&format!("{}.gate", prefix), out);
        self.attn_conv.push_params(&format!("{}.attn", prefix), out);
    }
}

/// Gate-weighted L2 energy per channel of a (C, H, W) map.
fn channel_energies(feat: &Tensor, gate: &[f64]) -> Vec<f64> {
    let s = feat.shape();
    let (c, spatial) = (s[0], s[1] * s[2]);
    let d = feat.data();
    (0..c)
        .map(|ci| {
            let block = &d[ci * spatial..(ci + 1) * spatial];
            gate[ci] * block.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect()
}

/// Spatial refinement with no attention: the ablation baseline.
struct PlainSpatial {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    out_hw: usize,
}

impl PlainSpatial {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        PlainSpatial {
            conv1: Conv2dLayer::new(c, c, (3, 3), (1, 1), (0, 0), true, rng),
            conv2: Conv2dLayer::new(c, c, (3, 3), (1, 1), (0, 0), true, rng),
            out_hw: cfg.out_hw,
        }
    }

    fn forward(&self, feat: &Tensor) -> Result<(Tensor, AttnMaps)> {
        let c = feat.shape()[0];
        let h = self.conv1.forward(&feat.replicate_pad2d((1, 1))?)?.silu();
        let h = self.conv2.forward(&h.replicate_pad2d((1, 1))?)?.silu();
        let h = h.adaptive_avg_pool2d((self.out_hw, self.out_hw))?;
        let ones = vec![1.0; c];
        let maps = AttnMaps {
            channel_energy: channel_energies(&h, &ones),
            channel_gate: ones,
            spatial_mask: vec![1.0; self.out_hw * self.out_hw],
            mask_hw: (self.out_hw, self.out_hw),
        };
        Ok((h, maps))
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.push_params(&format!("{}.conv1", prefix), out);
        self.conv2.push_params(&format!("{}.conv2", prefix), out);
    }
}

enum TemporalStage {
    Learned(TemporalBlock),
    /// Average-pool the time axis to out_hw, then lift 1 -> channels with a
    /// bias-free 1x1 conv.
    Pooled { lift: Conv2dLayer, out_hw: usize },
}

impl TemporalStage {
    fn forward(&self, shot: &Tensor) -> Result<Tensor> {
        match self {
            TemporalStage::Learned(b) => b.forward(shot),
            TemporalStage::Pooled { lift, out_hw } => {
                let receivers = shot.shape()[2];
                let pooled = shot.adaptive_avg_pool2d((*out_hw, receivers))?;
                lift.forward(&pooled)
            }
        }
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            TemporalStage::Learned(b) => b.push_params(prefix, out),
            TemporalStage::Pooled { lift, .. } => {
                lift.push_params(&format!("{}.lift", prefix), out)
            }
        }
    }
}

enum SpatialStage {
    Attentive(SpatialBlock),
    Plain(PlainSpatial),
}

impl SpatialStage {
    fn forward(&self, feat: &Tensor, mode: ChannelGateMode) -> Result<(Tensor, AttnMaps)> {
        match self {
            SpatialStage::Attentive(b) => b.forward(feat, mode),
            SpatialStage::Plain(b) => b.forward(feat),
        }
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            SpatialStage::Attentive(b) => b.push_params(prefix, out),
            SpatialStage::Plain(b) => b.push_params(prefix, out),
        }
    }
}

enum AggregateStage {
    Positional(ShotAggregate),
    Mean,
}

impl AggregateStage {
    fn forward(&self, shots: &[Tensor]) -> Result<Tensor> {
        match self {
            AggregateStage::Positional(agg) => agg.forward(shots),
            AggregateStage::Mean => {
                let mut acc = shots[0].clone();
                for s in &shots[1..] {
                    acc = acc.add(s)?;
                }
                Ok(acc.scale(1.0 / shots.len() as f64))
            }
        }
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let AggregateStage::Positional(agg) = self {
            agg.push_params(prefix, out);
        }
    }
}

/// Positional 1x1-conv aggregation of the per-shot feature stacks.
struct ShotAggregate {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
}

impl ShotAggregate {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        ShotAggregate {
            conv1: Conv2dLayer::new(cfg.n_shots * c, c, (1, 1), (1, 1), (0, 0), true, rng),
            conv2: Conv2dLayer::new(c, c, (1, 1), (1, 1), (0, 0), true, rng),
        }
    }

    fn forward(&self, shots: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = shots.iter().collect();
        let stacked = concat(&refs, 0)?;
        let h = self.conv1.forward(&stacked)?.silu();
        Ok(self.conv2.forward(&h)?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.push_params(&format!("{}.conv1", prefix), out);
        self.conv2.push_params(&format!("{}.conv2", prefix), out);
    }
}

/// The full seismic encoder: per-shot temporal and spatial blocks, then
/// positional aggregation into one conditioning map.
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub toggles: EncoderToggles,
    temporal: TemporalStage,
    spatial: SpatialStage,
    aggregate: AggregateStage,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Encoder> {
        Encoder::with_toggles(cfg, EncoderToggles::default(), rng)
    }

    pub fn with_toggles(
        cfg: EncoderConfig,
        toggles: EncoderToggles,
        rng: &mut ChaCha8Rng,
    ) -> Result<Encoder> {
        cfg.validate()?;
        let temporal = if toggles.temporal {
            TemporalStage::Learned(TemporalBlock::new(&cfg, rng))
        } else {
            TemporalStage::Pooled {
                lift: Conv2dLayer::new(1, cfg.channels, (1, 1), (1, 1), (0, 0), false, rng),
                out_hw: cfg.out_hw,
            }
        };
        let spatial = if toggles.spatial {
            SpatialStage::Attentive(SpatialBlock::new(&cfg, rng))
        } else {
            SpatialStage::Plain(PlainSpatial::new(&cfg, rng))
        };
        let aggregate = if toggles.aggregate {
            AggregateStage::Positional(ShotAggregate::new(&cfg, rng))
        } else {
            AggregateStage::Mean
        };
        Ok(Encoder { cfg, toggles, temporal, spatial, aggregate })
    }

    pub fn encode(&self, seis: &Tensor) -> Result<CondFeatures> {
        Ok(self.encode_with_mode(seis, ChannelGateMode::Learned)?.0)
    }

    pub fn encode_with_mode(
        &self,
        seis: &Tensor,
        mode: ChannelGateMode,
    ) -> Result<(CondFeatures, Vec<AttnMaps>)> {
        let s = seis.shape();
        if s.len() != 3 || s[0] != self.cfg.n_shots {
            return Err(NetError::BadConfig(format!(
                "expected ({}, T, R) seismic input, got {:?}",
                self.cfg.n_shots, s
            )));
        }
        let (n_shots, t, r) = (s[0], s[1], s[2]);
        let mut maps = Vec::with_capacity(n_shots);
        let mut feats = Vec::with_capacity(n_shots);
        for shot in 0..n_shots {
            // Differentiable shot slice: 1x1 conv with a one-hot kernel.
            let mut sel = vec![0.0; n_shots];
            sel[shot] = 1.0;
            let sel = Tensor::from_vec(sel, &[1, n_shots, 1, 1])?;
            let view = seis.conv2d(&sel, (1, 1), (0, 0))?.reshape(&[1, t, r])?;
            let tf = self.temporal.forward(&view)?;
            let (sf, m) = self.spatial.forward(&tf, mode)?;
            feats.push(sf);
            maps.push(m);
        }
        let map = self.aggregate.forward(&feats)?;
        // Standardize the whole feature stack (one group, so per-channel
        // means stay record-dependent for the pooled-vector fusion paths).
        // The attention gates shrink raw feature magnitudes well below
        // trunk scale, which starves the fusion layers (and, transitively,
        // this encoder) of gradient; emitting unit-scale features keeps
        // record-to-record differences visible to the generator from the
        // first optimizer step.
        let map = map.group_norm(1, GN_EPS)?;
        Ok((CondFeatures { map }, maps))
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.temporal.push_params("enc.temporal", &mut out);
        self.spatial.push_params("enc.spatial", &mut out);
        self.aggregate.push_params("enc.aggregate", &mut out);
        out
    }
}

/// Raw sinusoidal embedding: dim/2 geometric frequencies in [1, 1e4],
/// sin components first, then cos.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freq = |k: usize| {
        if half > 1 {
            // black_box keeps the exponent opaque so every inlined copy
            // evaluates powf through the same runtime path; LLVM's
            // compile-time folding rounds differently from libm, which
            // otherwise breaks bitwise run-to-run reproducibility.
            10f64.powf(std::hint::black_box(4.0 * k as f64 / (half - 1) as f64))
        } else {
            1.0
        }
    };
    for k in 0..half {
        out.push((freq(k) * t).sin());
    }
    for k in 0..half {
        out.push((freq(k) * t).cos());
    }
    out
}

struct TimeEmbed {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbed {
    fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        TimeEmbed { dim, fc1: Linear::new(dim, dim, true, rng), fc2: Linear::new(dim, dim, true, rng) }
    }

    /// -> (1, dim)
    fn embed(&self, t: f64) -> Result<Tensor> {
        let raw = Tensor::from_vec(sinusoidal_embed(t, self.dim), &[1, self.dim])?;
        Ok(self.fc2.forward(&self.fc1.forward(&raw)?.silu())?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.push_params(&format!("{}.fc1", prefix), out);
        self.fc2.push_params(&format!("{}.fc2", prefix), out);
    }
}

/// Additive conditioning: resized spatial projection of the cond map plus a
/// channel recalibration vector from two fully-connected layers. The output
/// layers start at zero so fusion begins as the identity.
struct MlpFuse {
    proj: Conv2dLayer,
    fc1: Linear,
    fc2: Linear,
}

impl MlpFuse {
    fn new(cond_ch: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        // Output layers start at half-strength He rather than zero: the
        // conditioning branch has to influence the trunk within a few
        // hundred optimizer steps at desk scale, and a dead start leaves
        // the generator effectively unconditional for a short run.
        MlpFuse {
            proj: Conv2dLayer::new_scaled(cond_ch, c, (1, 1), (1, 1), (0, 0), true, rng, 0.5),
            fc1: Linear::new(cond_ch, cond_ch, true, rng),
            fc2: Linear::new_scaled(cond_ch, c, true, rng, 0.5),
        }
    }

    fn forward(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (hh, hw) = (h.shape()[1], h.shape()[2]);
        let cond_ch = cond.shape()[0];
        let resized = cond.adaptive_avg_pool2d((hh, hw))?;
        let spatial = self.proj.forward(&resized)?;
        let pooled = cond.adaptive_avg_pool2d((1, 1))?.reshape(&[1, cond_ch])?;
        let vec = self.fc2.forward(&self.fc1.forward(&pooled)?.silu())?;
        let c = h.shape()[0];
        Ok(h.add(&spatial)?.broadcast_add(&vec.reshape(&[c])?)?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.proj.push_params(&format!("{}.proj", prefix), out);
        self.fc1.push_params(&format!("{}.fc1", prefix), out);
        self.fc2.push_params(&format!("{}.fc2", prefix), out);
    }
}

/// Statistic modulation: normalize h, then scale by (1 + γ) and shift by β
/// where (γ, β) come from the pooled cond vector. `groups` = channel count
/// gives instance norm (adain); 8 gives group norm (adagn).
struct ModFuse {
    groups_all: bool,
    fc1: Linear,
    fc_gamma: Linear,
    fc_beta: Linear,
}

impl ModFuse {
    fn new(cond_ch: usize, c: usize, instance: bool, rng: &mut ChaCha8Rng) -> Self {
        // Small nonzero init: (γ, β) perturb the normalized trunk from the
        // first step (|γ| ≪ 1 keeps the scale 1+γ positive) so the branch
        // trains at short desk-scale budgets; exact zeros would leave the
        // conditioning inert for hundreds of steps.
        ModFuse {
            groups_all: instance,
            fc1: Linear::new(cond_ch, cond_ch, true, rng),
            fc_gamma: Linear::new_scaled(cond_ch, c, true, rng, 0.1),
            fc_beta: Linear::new_scaled(cond_ch, c, true, rng, 0.1),
        }
    }

    fn forward(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let c = h.shape()[0];
        let (hh, hw) = (h.shape()[1], h.shape()[2]);
        let groups = if self.groups_all { c } else { GN_GROUPS };
        let normed = h.group_norm(groups, GN_EPS)?;
        let cond_ch = cond.shape()[0];
        let pooled = cond.adaptive_avg_pool2d((1, 1))?.reshape(&[1, cond_ch])?;
        let hcond = self.fc1.forward(&pooled)?.silu();
        let gamma = self.fc_gamma.forward(&hcond)?.reshape(&[c])?;
        let beta = self.fc_beta.forward(&hcond)?.reshape(&[c])?;
        let scale = gamma.add(&Tensor::full(&[c], 1.0))?;
        Ok(normed.mul(&expand_channels(&scale, hh, hw)?)?.broadcast_add(&beta)?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.push_params(&format!("{}.fc1", prefix), out);
        self.fc_gamma.push_params(&format!("{}.gamma", prefix), out);
        self.fc_beta.push_params(&format!("{}.beta", prefix), out);
    }
}

enum FuseOp {
    Mlp(MlpFuse),
    Adain(ModFuse),
    Adagn(ModFuse),
}

impl FuseOp {
    fn new(kind: Fusion, cond_ch: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            Fusion::Mlp => FuseOp::Mlp(MlpFuse::new(cond_ch, c, rng)),
            Fusion::Adain => FuseOp::Adain(ModFuse::new(cond_ch, c, true, rng)),
            Fusion::Adagn => FuseOp::Adagn(ModFuse::new(cond_ch, c, false, rng)),
        }
    }

    fn forward(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        match self {
            FuseOp::Mlp(f) => f.forward(h, cond),
            FuseOp::Adain(f) | FuseOp::Adagn(f) => f.forward(h, cond),
        }
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            FuseOp::Mlp(f) => f.push_params(prefix, out),
            FuseOp::Adain(f) | FuseOp::Adagn(f) => f.push_params(prefix, out),
        }
    }
}

/// Pre-activation residual block with a per-channel time bias and optional
/// layerwise conditioning.
struct ResBlock {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    time_proj: Linear,
    skip: Option<Conv2dLayer>,
    fuse: Option<FuseOp>,
    cin: usize,
    cout: usize,
}

impl ResBlock {
    fn new(
        cin: usize,
        cout: usize,
        temb_dim: usize,
        fuse: Option<(Fusion, usize)>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ResBlock {
            conv1: Conv2dLayer::new(cin, cout, (3, 3), (1, 1), (1, 1), true, rng),
            conv2: Conv2dLayer::new(cout, cout, (3, 3), (1, 1), (1, 1), true, rng),
            time_proj: Linear::new(temb_dim, cout, true, rng),
            skip: (cin != cout)
                .then(|| Conv2dLayer::new(cin, cout, (1, 1), (1, 1), (0, 0), false, rng)),
            fuse: fuse.map(|(kind, cond_ch)| FuseOp::new(kind, cond_ch, cout, rng)),
            cin,
            cout,
        }
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let h = x.group_norm(GN_GROUPS.min(self.cin), GN_EPS)?.silu();
        let h = self.conv1.forward(&h)?;
        let tb = self.time_proj.forward(temb)?.reshape(&[self.cout])?;
        let mut h = h.broadcast_add(&tb)?;
        if let (Some(f), Some(c)) = (&self.fuse, cond) {
            h = f.forward(&h, c)?;
        }
        let h = h.group_norm(GN_GROUPS, GN_EPS)?.silu();
        let h = self.conv2.forward(&h)?;
        let sk = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok(h.add(&sk)?)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.push_params(&format!("{}.conv1", prefix), out);
        self.conv2.push_params(&format!("{}.conv2", prefix), out);
        self.time_proj.push_params(&format!("{}.time", prefix), out);
        if let Some(s) = &self.skip {
            s.push_params(&format!("{}.skip", prefix), out);
        }
        if let Some(f) = &self.fuse {
            f.push_params(&format!("{}.fuse", prefix), out);
        }
    }
}

/// Conditional U-Net over the velocity grid. Downsampling halves the grid
/// per level; upsampling resizes back to the skip's size (nearest-duplicate
/// for even dims), so odd grid sizes also work.
pub struct UNet {
    pub cfg: UNetConfig,
    cond_channels: usize,
    temb: TimeEmbed,
    stem: Conv2dLayer,
    down_blocks: Vec<ResBlock>,
    down_convs: Vec<Conv2dLayer>,
    mid: ResBlock,
    up_convs: Vec<Conv2dLayer>,
    up_blocks: Vec<ResBlock>,
    head: Conv2dLayer,
}

impl UNet {
    pub fn new(cfg: UNetConfig, cond_channels: usize, rng: &mut ChaCha8Rng) -> Result<UNet> {
        cfg.validate()?;
        if cond_channels == 0 {
            return Err(NetError::BadConfig("cond_channels must be positive".into()));
        }
        let widths: Vec<usize> = (0..cfg.levels).map(|l| cfg.base_channels << l).collect();
        let layer_fuse = |_l: usize| {
            (cfg.injection == Injection::Layerwise).then_some((cfg.fusion, cond_channels))
        };
        let in_ch = 1 + if cfg.injection == Injection::Early { cond_channels } else { 0 };
        let temb_dim = cfg.time_embed_dim;

        let temb = TimeEmbed::new(temb_dim, rng);
        let stem = Conv2dLayer::new(in_ch, widths[0], (3, 3), (1, 1), (1, 1), true, rng);
        let mut down_blocks = Vec::new();
        let mut down_convs = Vec::new();
        for l in 0..cfg.levels {
            down_blocks.push(ResBlock::new(widths[l], widths[l], temb_dim, layer_fuse(l), rng));
            if l + 1 < cfg.levels {
                down_convs.push(Conv2dLayer::new(
                    widths[l],
                    widths[l + 1],
                    (3, 3),
                    (1, 1),
                    (1, 1),
                    true,
                    rng,
                ));
            }
        }
        let deepest = cfg.levels - 1;
        let mid = ResBlock::new(widths[deepest], widths[deepest], temb_dim, layer_fuse(deepest), rng);
        let mut up_convs = Vec::new();
        let mut up_blocks = Vec::new();
        for l in (0..cfg.levels - 1).rev() {
            up_convs.push(Conv2dLayer::new(
                widths[l + 1],
                widths[l],
                (3, 3),
                (1, 1),
                (1, 1),
                true,
                rng,
            ));
            up_blocks.push(ResBlock::new(2 * widths[l], widths[l], temb_dim, layer_fuse(l), rng));
        }
        let head = Conv2dLayer::zeros(widths[0], 1, (3, 3), (1, 1), true);
        Ok(UNet {
            cfg,
            cond_channels,
            temb,
            stem,
            down_blocks,
            down_convs,
            mid,
            up_convs,
            up_blocks,
            head,
        })
    }

    /// x_t: (1, H, W), cond: (cond_channels, Hc, Wc) -> (1, H, W).
    pub fn forward(&self, x_t: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        let s = x_t.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(NetError::BadConfig(format!("expected (1, H, W) state, got {:?}", s)));
        }
        if cond.shape().len() != 3 || cond.shape()[0] != self.cond_channels {
            return Err(NetError::BadConfig(format!(
                "expected ({}, Hc, Wc) cond, got {:?}",
                self.cond_channels,
                cond.shape()
            )));
        }
        let (hh, ww) = (s[1], s[2]);
        let temb = self.temb.embed(t)?;

        let x = match self.cfg.injection {
            Injection::Early => {
                let resized = if cond.shape()[1] == hh && cond.shape()[2] == ww {
                    cond.clone()
                } else {
                    cond.adaptive_avg_pool2d((hh, ww))?
                };
                concat(&[x_t, &resized], 0)?
            }
            Injection::Layerwise => x_t.clone(),
        };
        let layerwise = self.cfg.injection == Injection::Layerwise;
        let cond_at = |h: &Tensor| -> Result<Option<Tensor>> {
            if !layerwise {
                return Ok(None);
            }
            let (lh, lw) = (h.shape()[1], h.shape()[2]);
            Ok(Some(if cond.shape()[1] == lh && cond.shape()[2] == lw {
                cond.clone()
            } else {
                cond.adaptive_avg_pool2d((lh, lw))?
            }))
        };

        let mut h = self.stem.forward(&x)?;
        let mut skips = Vec::new();
        for l in 0..self.cfg.levels {
            let c_l = cond_at(&h)?;
            h = self.down_blocks[l].forward(&h, &temb, c_l.as_ref())?;
            if l + 1 < self.cfg.levels {
                skips.push(h.clone());
                h = self.down_convs[l].forward(&h.avg_pool2d((2, 2), (2, 2))?)?;
            }
        }
        let c_m = cond_at(&h)?;
        h = self.mid.forward(&h, &temb, c_m.as_ref())?;
        for (i, l) in (0..self.cfg.levels - 1).rev().enumerate() {
            let skip = skips[l].clone();
            let (sh, sw) = (skip.shape()[1], skip.shape()[2]);
            h = h.adaptive_avg_pool2d((sh, sw))?;
            h = self.up_convs[i].forward(&h)?;
            let cat = concat(&[&skip, &h], 0)?;
            let c_l = cond_at(&cat)?;
            h = self.up_blocks[i].forward(&cat, &temb, c_l.as_ref())?;
        }
        let h = h.group_norm(GN_GROUPS, GN_EPS)?.silu();
        Ok(self.head.forward(&h)?)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.temb.push_params("unet.temb", &mut out);
        self.stem.push_params("unet.stem", &mut out);
        for (l, b) in self.down_blocks.iter().enumerate() {
            b.push_params(&format!("unet.down{}", l), &mut out);
        }
        for (l, c) in self.down_convs.iter().enumerate() {
            c.push_params(&format!("unet.downconv{}", l), &mut out);
        }
        self.mid.push_params("unet.mid", &mut out);
        for (i, c) in self.up_convs.iter().enumerate() {
            c.push_params(&format!("unet.upconv{}", i), &mut out);
        }
        for (i, b) in self.up_blocks.iter().enumerate() {
            b.push_params(&format!("unet.up{}", i), &mut out);
        }
        self.head.push_params("unet.head", &mut out);
        out
    }
}

/// Encoder + U-Net: the conditional velocity field v(x_t, t, seis), also
/// usable as a noise predictor when trained with the ε-objective.
pub struct VelocityNet {
    pub encoder: Encoder,
    pub unet: UNet,
}

impl VelocityNet {
    pub fn new(ecfg: EncoderConfig, ucfg: UNetConfig, seed: u64) -> Result<VelocityNet> {
        VelocityNet::with_toggles(ecfg, EncoderToggles::default(), ucfg, seed)
    }

    pub fn with_toggles(
        ecfg: EncoderConfig,
        toggles: EncoderToggles,
        ucfg: UNetConfig,
        seed: u64,
    ) -> Result<VelocityNet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::with_toggles(ecfg, toggles, &mut rng)?;
        let unet = UNet::new(ucfg, ecfg.channels, &mut rng)?;
        Ok(VelocityNet { encoder, unet })
    }

    /// Full forward: encode the gather, then run the U-Net.
    pub fn forward(&self, x_t: &Tensor, t: f64, seis: &Tensor) -> Result<Tensor> {
        let cond = self.encoder.encode(seis)?;
        self.unet.forward(x_t, t, &cond.map)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.params();
        out.extend(self.unet.params());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }
}
