//! U-Net sub-networks and the two-stage enhancement pipeline.
//!
//! Feature maps are `N×C×F×T` with `F` the frequency axis (the Nyquist bin
//! dropped, so 256 bins for 512-sample frames) and `T` the frame axis.
//! Each encoder level halves `F` with a stride-2 convolution; the time axis
//! is never resampled, so both networks accept any number of frames.
//!
//! The magnitude network (S2S) maps a normalized log-magnitude to a
//! log-magnitude through `tanh(·)·g`, where the gain `g` is predicted from
//! the pooled bottleneck. The complex network (RI2RI) maps real/imaginary
//! planes to real/imaginary planes with a linear head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{softplus_inv, Attention, Graph, ParamId, ParamStore, Precision, Tensor, Var};
use crate::error::{from_json, Error, Result};
use crate::stft::{decompose, istft, recombine, stft, MagPhase, Spectrogram, StftConfig, Waveform, DEFAULT_FLOOR};
use num_complex::Complex64;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Gain used by [`UNet::set_identity`] so that `g·tanh(x/g) ≈ x`.
pub const IDENTITY_GAIN: f64 = 1000.0;
const BUNDLE_FORMAT: &str = "derevb-bundle";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    TanhGain,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// `(freq, time)` kernel size; both odd.
    pub kernel: (usize, usize),
    pub use_self_attention: bool,
    /// Width of the query/key/value projections.
    pub attention_dim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub output_activation: OutputActivation,
    pub n_freq: usize,
    /// Starting value of the learned output gain (tanh head only).
    pub initial_gain: f64,
    /// Read the two channels of input and output as real/imaginary planes
    /// and return `x·(1 + y)`: the network learns a complex correction of its
    /// input that scales with the local input energy.
    #[serde(default)]
    pub complex_correction: bool,
}

impl UNetConfig {
    pub fn s2s(depth: usize, base_channels: usize) -> Self {
        Self {
            depth,
            base_channels,
            kernel: (3, 3),
            use_self_attention: true,
            attention_dim: 32,
            in_channels: 1,
            out_channels: 1,
            output_activation: OutputActivation::TanhGain,
            n_freq: 256,
            initial_gain: 4.0,
            complex_correction: false,
        }
    }

    pub fn ri2ri(depth: usize, base_channels: usize) -> Self {
        Self {
            use_self_attention: false,
            in_channels: 2,
            out_channels: 2,
            output_activation: OutputActivation::Linear,
            complex_correction: true,
            ..Self::s2s(depth, base_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.depth == 0 || self.base_channels == 0 {
            return bad("depth and base_channels must be at least 1".into());
        }
        if self.kernel.0 % 2 == 0 || self.kernel.1 % 2 == 0 {
            return bad(format!("kernel {:?} must have odd sizes", self.kernel));
        }
        if self.depth >= usize::BITS as usize || self.n_freq == 0 || self.n_freq % (1 << self.depth) != 0 {
            return bad(format!(
                "n_freq {} must be divisible by 2^depth = 2^{}",
                self.n_freq, self.depth
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.use_self_attention && self.attention_dim == 0 {
            return bad("attention_dim must be positive".into());
        }
        if self.complex_correction
            && (self.in_channels != 2 || self.out_channels != 2 || self.output_activation != OutputActivation::Linear)
        {
            return bad("a complex correction needs 2 in/out channels and a linear head".into());
        }
        if !(self.initial_gain > 0.0 && self.initial_gain.is_finite()) {
            return bad(format!("initial_gain {} must be positive", self.initial_gain));
        }
        Ok(())
    }

    /// Channels produced by encoder level `i` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Feature width of one bottleneck frame.
    pub fn bottleneck_features(&self) -> usize {
        self.channels(self.depth) * (self.n_freq >> self.depth)
    }
}

#[derive(Debug, Clone, Copy)]
struct Level {
    w: ParamId,
    b: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
struct Ids {
    enc: Vec<Level>,
    /// `dec[i - 1]` is decoder level `i`.
    dec: Vec<Level>,
    attention: Option<[ParamId; 4]>,
    out_w: ParamId,
    out_b: ParamId,
    gain: Option<(ParamId, ParamId)>,
}

/// Nodes exposed by a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct UNetForward {
    pub output: Var,
    pub attention: Option<Attention>,
    /// `tanh` output before scaling (tanh head only).
    pub pre_gain: Option<Var>,
    /// Per-example gain, shape `N×1×1×1` (tanh head only).
    pub gain: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl UNet {
    pub fn new(config: UNetConfig, precision: Precision, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(precision);
        let (kf, kt) = config.kernel;
        let mut conv = |store: &mut ParamStore, name: &str, c_out: usize, c_in: usize, kf: usize, kt: usize| {
            let fan_in = (c_in * kf * kt) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..c_out * c_in * kf * kt).map(|_| normal.sample(&mut rng)).collect();
            let w = store.add(
                format!("{name}.w"),
                Tensor::from_vec(vec![c_out, c_in, kf, kt], w).expect("sized"),
            );
            let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
            (w, b)
        };
        let norm = |store: &mut ParamStore, name: &str, c: usize| {
            (
                store.add(format!("{name}.ln.gamma"), Tensor::full(&[c], 1.0)),
                store.add(format!("{name}.ln.beta"), Tensor::zeros(&[c])),
            )
        };
        let mut enc = Vec::new();
        for i in 1..=config.depth {
            let c_in = if i == 1 { config.in_channels } else { config.channels(i - 1) };
            let name = format!("enc{i}");
            let (w, b) = conv(&mut store, &name, config.channels(i), c_in, kf, kt);
            let ln = norm(&mut store, &name, config.channels(i));
            enc.push(Level { w, b, norm: Some(ln) });
        }
        let mut dec = Vec::new();
        for i in 1..=config.depth {
            let skip = if i == 1 { config.in_channels } else { config.channels(i - 1) };
            let c_out = if i == 1 { config.base_channels } else { config.channels(i - 1) };
            let name = format!("dec{i}");
            let (w, b) = conv(&mut store, &name, c_out, config.channels(i) + skip, kf, kt);
            let ln = (i > 1).then(|| norm(&mut store, &name, c_out));
            dec.push(Level { w, b, norm: ln });
        }
        let attention = config.use_self_attention.then(|| {
            let (d, a) = (config.bottleneck_features(), config.attention_dim);
            let mut proj = |name: &str, rows: usize, cols: usize| {
                let normal = Normal::new(0.0, (1.0 / rows as f64).sqrt()).expect("positive std");
                let v: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
                store.add(name, Tensor::from_vec(vec![rows, cols], v).expect("sized"))
            };
            [
                proj("attn.wq", d, a),
                proj("attn.wk", d, a),
                proj("attn.wv", d, a),
                proj("attn.wo", a, d),
            ]
        });
        let normal = Normal::new(0.0, (1.0 / config.base_channels as f64).sqrt()).expect("positive std");
        let out_w: Vec<f64> = (0..config.out_channels * config.base_channels)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let out_w = store.add(
            "out.w",
            Tensor::from_vec(vec![config.out_channels, config.base_channels, 1, 1], out_w)?,
        );
        let out_b = store.add("out.b", Tensor::zeros(&[config.out_channels]));
        let gain = (config.output_activation == OutputActivation::TanhGain).then(|| {
            (
                store.add("gain.w", Tensor::zeros(&[config.channels(config.depth), 1])),
                store.add("gain.b", Tensor::full(&[1], softplus_inv(config.initial_gain))),
            )
        });
        Ok(Self {
            config,
            params: store,
            ids: Ids {
                enc,
                dec,
                attention,
                out_w,
                out_b,
                gain,
            },
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<UNetForward> {
        self.forward_with(&self.params, g, x)
    }

    /// Forward pass reading parameters from `store`, which must have the
    /// layout of `self.params` (e.g. a perturbed copy).
    pub fn forward_with(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<UNetForward> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.n_freq || shape[3] == 0 {
            return Err(Error::shape(format!(
                "network expects N×{}×{}×T input, got {shape:?}",
                cfg.in_channels, cfg.n_freq
            )));
        }
        let level = |g: &mut Graph, h: Var, lvl: &Level, stride: usize| -> Result<Var> {
            let (w, b) = (g.param(store, lvl.w), g.param(store, lvl.b));
            let mut h = g.conv2d(h, w, b, stride)?;
            if let Some((gamma, beta)) = lvl.norm {
                let (gamma, beta) = (g.param(store, gamma), g.param(store, beta));
                h = g.layer_norm(h, gamma, beta, LAYER_NORM_EPS)?;
            }
            Ok(g.leaky_relu(h, LEAKY_SLOPE))
        };
        let mut skips = vec![x];
        let mut h = x;
        for lvl in &self.ids.enc {
            h = level(g, h, lvl, 2)?;
            skips.push(h);
        }
        let mut attention = None;
        if let Some(ids) = self.ids.attention {
            let (out, att) = self.self_attention(store, g, h, ids)?;
            h = out;
            attention = Some(att);
        }
        let bottleneck = h;
        for i in (1..=cfg.depth).rev() {
            let up = g.upsample_freq(h, 2)?;
            let cat = g.concat(&[up, skips[i - 1]], 1)?;
            h = level(g, cat, &self.ids.dec[i - 1], 1)?;
        }
        let (w, b) = (g.param(store, self.ids.out_w), g.param(store, self.ids.out_b));
        let mut out = g.conv2d(h, w, b, 1)?;
        if cfg.complex_correction {
            out = complex_correct(g, x, out)?;
        }
        match self.ids.gain {
            None => Ok(UNetForward {
                output: out,
                attention,
                pre_gain: None,
                gain: None,
            }),
            Some((gw, gb)) => {
                let n = shape[0];
                let c = cfg.channels(cfg.depth);
                let pooled = g.mean_axes(bottleneck, &[2, 3])?;
                let pooled = g.reshape(pooled, &[n, c])?;
                let (gw, gb) = (g.param(store, gw), g.param(store, gb));
                let z = g.matmul(pooled, gw)?;
                let z = g.add(z, gb)?;
                let gain = g.softplus(z);
                let gain = g.reshape(gain, &[n, 1, 1, 1])?;
                let pre = g.tanh(out);
                let output = g.mul(pre, gain)?;
                Ok(UNetForward {
                    output,
                    attention,
                    pre_gain: Some(pre),
                    gain: Some(gain),
                })
            }
        }
    }

    /// Residual single-head attention over time frames of `h: N×C×F'×T`.
    fn self_attention(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        h: Var,
        [wq, wk, wv, wo]: [ParamId; 4],
    ) -> Result<(Var, Attention)> {
        let s = g.shape(h).to_vec();
        let (n, c, f, t) = (s[0], s[1], s[2], s[3]);
        let tokens = g.transpose(h, 1, 3)?;
        let tokens = g.reshape(tokens, &[n, t, f * c])?;
        let project = |g: &mut Graph, id| -> Result<Var> {
            let w = g.param(store, id);
            g.matmul(tokens, w)
        };
        let q = project(g, wq)?;
        let k = project(g, wk)?;
        let v = project(g, wv)?;
        let att = g.scaled_dot_product_attention(q, k, v)?;
        let wo = g.param(store, wo);
        let mixed = g.matmul(att.output, wo)?;
        let mixed = g.reshape(mixed, &[n, t, f, c])?;
        let mixed = g.transpose(mixed, 1, 3)?;
        Ok((g.add(h, mixed)?, att))
    }

    /// Inference on one `C×F×T` example; no gradients are recorded.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("expected C×F×T input, got {s:?}")));
        }
        let mut frozen = self.params.clone();
        frozen.freeze_all(true);
        let mut g = Graph::new();
        let xv = g.constant(x.clone().reshaped(vec![1, s[0], s[1], s[2]])?);
        let out = self.forward_with(&frozen, &mut g, xv)?.output;
        let o = g.value(out);
        o.clone().reshaped(o.shape()[1..].to_vec())
    }

    /// Constructs weights under which the network reproduces its input:
    /// the last decoder level copies `±x` from the input skip and the output
    /// layer recombines `lrelu(x) − lrelu(−x) = (1 + slope)·x`. Needs
    /// `base_channels ≥ 2·in_channels` and `in_channels == out_channels`.
    /// A complex-correction network only needs a zero correction.
    pub fn set_identity(&mut self) -> Result<()> {
        let cfg = self.config;
        let (cin, base) = (cfg.in_channels, cfg.base_channels);
        if !cfg.complex_correction && (base < 2 * cin || cin != cfg.out_channels) {
            return Err(Error::invalid(format!(
                "identity weights need base_channels >= {} and matching in/out channels",
                2 * cin
            )));
        }
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let p = self.params.get(id);
            let fill = if p.name.ends_with(".ln.gamma") { 1.0 } else { 0.0 };
            let shape = p.value.shape().to_vec();
            self.params.set_value(id, Tensor::full(&shape, fill))?;
        }
        if cfg.complex_correction {
            return Ok(());
        }
        let (kf, kt) = cfg.kernel;
        let dec1 = self.ids.dec[0].w;
        let c_cat = cfg.channels(1) + cin;
        let w = self.params.value_mut(dec1);
        let at = |o: usize, i: usize| ((o * c_cat + i) * kf + kf / 2) * kt + kt / 2;
        for c in 0..cin {
            w[at(c, base + c)] = 1.0;
            w[at(cin + c, base + c)] = -1.0;
        }
        let head_gain = match self.ids.gain {
            Some((_, gb)) => {
                self.params.set_value(gb, Tensor::full(&[1], softplus_inv(IDENTITY_GAIN)))?;
                IDENTITY_GAIN
            }
            None => 1.0,
        };
        let scale = 1.0 / ((1.0 + LEAKY_SLOPE) * head_gain);
        let out = self.params.value_mut(self.ids.out_w);
        for c in 0..cin {
            out[c * base + c] = scale;
            out[c * base + cin + c] = -scale;
        }
        Ok(())
    }
}

/// `x + x·y` with channel 0 real and channel 1 imaginary.
fn complex_correct(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let (xr, xi) = (g.slice(x, 1, 0, 1)?, g.slice(x, 1, 1, 2)?);
    let (yr, yi) = (g.slice(y, 1, 0, 1)?, g.slice(y, 1, 1, 2)?);
    let (rr, ii) = (g.mul(xr, yr)?, g.mul(xi, yi)?);
    let (ri, ir) = (g.mul(xr, yi)?, g.mul(xi, yr)?);
    let re = g.sub(rr, ii)?;
    let im = g.add(ri, ir)?;
    let prod = g.concat(&[re, im], 1)?;
    g.add(x, prod)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide the S2S input by the STD of the noisy log-magnitude of the
    /// utterance; multiply the output by the same scalar.
    UtteranceStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleConfig {
    pub s2s: UNetConfig,
    pub ri2ri: UNetConfig,
    pub stft: StftConfig,
    pub normalization: Normalization,
    pub log_floor: f64,
}

impl BundleConfig {
    /// Depth 4, 16 base channels.
    pub fn reference() -> Self {
        Self::with_sizes(4, 16)
    }

    /// Depth 2, 8 base channels.
    pub fn desk() -> Self {
        Self::with_sizes(2, 8)
    }

    pub fn with_sizes(depth: usize, base_channels: usize) -> Self {
        Self {
            s2s: UNetConfig::s2s(depth, base_channels),
            ri2ri: UNetConfig::ri2ri(depth, base_channels),
            stft: StftConfig::default(),
            normalization: Normalization::UtteranceStd,
            log_floor: DEFAULT_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.s2s.validate()?;
        self.ri2ri.validate()?;
        let f = self.stft.n_bins - 1;
        let check = |name: &str, c: &UNetConfig, ch: usize, act: OutputActivation| {
            if c.n_freq != f || c.in_channels != ch || c.out_channels != ch || c.output_activation != act {
                Err(Error::Config {
                    path: name.to_string(),
                    message: format!(
                        "needs n_freq {f}, {ch} in/out channels and {act:?} output, got {} / {} / {} / {:?}",
                        c.n_freq, c.in_channels, c.out_channels, c.output_activation
                    ),
                })
            } else {
                Ok(())
            }
        };
        check("s2s", &self.s2s, 1, OutputActivation::TanhGain)?;
        check("ri2ri", &self.ri2ri, 2, OutputActivation::Linear)?;
        if self.ri2ri.use_self_attention {
            return Err(Error::Config {
                path: "ri2ri.use_self_attention".into(),
                message: "the complex network has no attention layer".into(),
            });
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config {
                path: "log_floor".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pretrained {
    pub s2s: bool,
    pub ri2ri: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    format: String,
    version: u32,
    config: BundleConfig,
    pretrained: Pretrained,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: BundleConfig,
    pub s2s: UNet,
    pub ri2ri: UNet,
    pub pretrained: Pretrained,
}

impl ModelBundle {
    pub fn new(config: BundleConfig, precision: Precision, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            s2s: UNet::new(config.s2s, precision, seed)?,
            ri2ri: UNet::new(config.ri2ri, precision, seed.wrapping_add(1))?,
            pretrained: Pretrained::default(),
        })
    }

    /// Both networks set to reproduce their inputs (see [`UNet::set_identity`]).
    pub fn identity(config: BundleConfig, precision: Precision) -> Result<Self> {
        let mut b = Self::new(config, precision, 0)?;
        b.s2s.set_identity()?;
        b.ri2ri.set_identity()?;
        Ok(b)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = BundleMeta {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            config: self.config,
            pretrained: self.pretrained,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        ck.push_store("s2s.", &self.s2s.params);
        ck.push_store("ri2ri.", &self.ri2ri.params);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, precision: Precision) -> Result<Self> {
        let meta: BundleMeta = from_json(&ck.meta.to_string(), "checkpoint.meta")?;
        if meta.format != BUNDLE_FORMAT || meta.version != BUNDLE_VERSION {
            return Err(Error::Config {
                path: "checkpoint.meta.format".into(),
                message: format!("unsupported bundle {} v{}", meta.format, meta.version),
            });
        }
        let mut b = Self::new(meta.config, precision, 0)?;
        let expected = b.s2s.params.len() + b.ri2ri.params.len();
        if ck.tensors.len() != expected {
            return Err(Error::invalid(format!(
                "checkpoint holds {} tensors, configuration needs {expected}",
                ck.tensors.len()
            )));
        }
        ck.load_store("s2s.", &mut b.s2s.params)?;
        ck.load_store("ri2ri.", &mut b.ri2ri.params)?;
        b.pretrained = meta.pretrained;
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, Precision::F32)
    }

    /// `1×F×T` normalized log-magnitude to `1×F×T` normalized estimate.
    pub fn s2s_forward(&self, log_mag: &Tensor) -> Result<Tensor> {
        check_planes(log_mag, 1, self.config.s2s.n_freq)?;
        self.s2s.infer(log_mag)
    }

    /// `2×F×T` real/imaginary planes to `2×F×T` estimate.
    pub fn ri2ri_forward(&self, ri: &Tensor) -> Result<Tensor> {
        check_planes(ri, 2, self.config.ri2ri.n_freq)?;
        self.ri2ri.infer(ri)
    }
}

fn check_planes(t: &Tensor, c: usize, f: usize) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != c || s[1] != f || s[2] == 0 {
        return Err(Error::shape(format!("expected {c}×{f}×T planes, got {s:?}")));
    }
    Ok(())
}

/// Frame-major `L×K` values to a frequency-major `F×L` plane without the
/// Nyquist bin.
fn to_plane(values: &[f64], n_frames: usize, n_bins: usize) -> Vec<f64> {
    let f = n_bins - 1;
    let mut out = vec![0.0; f * n_frames];
    for l in 0..n_frames {
        for k in 0..f {
            out[k * n_frames + l] = values[l * n_bins + k];
        }
    }
    out
}

/// Inverse of [`to_plane`]; the Nyquist bin is set to `nyquist`.
fn from_plane(plane: &[f64], n_frames: usize, n_bins: usize, nyquist: f64) -> Vec<f64> {
    let f = n_bins - 1;
    let mut out = vec![nyquist; n_frames * n_bins];
    for l in 0..n_frames {
        for k in 0..f {
            out[l * n_bins + k] = plane[k * n_frames + l];
        }
    }
    out
}

/// `1×F×L` log-magnitude planes.
pub fn log_mag_planes(mp: &MagPhase) -> Tensor {
    let f = mp.config.n_bins - 1;
    Tensor::from_vec(vec![1, f, mp.n_frames], to_plane(&mp.log_mag, mp.n_frames, mp.config.n_bins))
        .expect("sized")
}

/// Replaces the magnitude of `template` with `1×F×L` log-magnitude planes;
/// the Nyquist bin gets the floor.
pub fn with_log_mag(template: &MagPhase, planes: &Tensor, floor: f64) -> Result<MagPhase> {
    check_planes(planes, 1, template.config.n_bins - 1)?;
    if planes.shape()[2] != template.n_frames {
        return Err(Error::shape("frame count differs from template"));
    }
    Ok(MagPhase {
        log_mag: from_plane(planes.data(), template.n_frames, template.config.n_bins, floor.ln()),
        ..template.clone()
    })
}

/// `2×F×L` real/imaginary planes.
pub fn ri_planes(spec: &Spectrogram) -> Tensor {
    let (l, k) = (spec.n_frames, spec.n_bins());
    let re: Vec<f64> = spec.values.iter().map(|c| c.re).collect();
    let im: Vec<f64> = spec.values.iter().map(|c| c.im).collect();
    let mut data = to_plane(&re, l, k);
    data.extend(to_plane(&im, l, k));
    Tensor::from_vec(vec![2, k - 1, l], data).expect("sized")
}

/// Spectrogram from `2×F×L` planes with a zero Nyquist bin.
pub fn spectrogram_from_ri(planes: &Tensor, config: StftConfig, source_len: usize) -> Result<Spectrogram> {
    check_planes(planes, 2, config.n_bins - 1)?;
    let l = planes.shape()[2];
    let half = planes.len() / 2;
    let re = from_plane(&planes.data()[..half], l, config.n_bins, 0.0);
    let im = from_plane(&planes.data()[half..], l, config.n_bins, 0.0);
    let values = re.into_iter().zip(im).map(|(r, i)| Complex64::new(r, i)).collect();
    Spectrogram::new(values, l, config, source_len)
}

/// Population STD of all cells; 1 when the input is constant.
pub fn utterance_std(t: &Tensor) -> f64 {
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 1e-24 {
        var.sqrt()
    } else {
        1.0
    }
}

/// Intermediate and final signals of the two-stage pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Enhancement {
    /// S2S magnitude with the noisy phase.
    pub s2s_noisy_phase: Waveform,
    /// Output of the complex network.
    pub enhanced: Waveform,
}

pub fn enhance_stages(noisy: &Waveform, bundle: &ModelBundle) -> Result<Enhancement> {
    let cfg = &bundle.config;
    let sr = noisy.sample_rate_hz;
    let noisy_mp = decompose(&stft(noisy, &cfg.stft)?, cfg.log_floor)?;
    let x = log_mag_planes(&noisy_mp);
    let std = utterance_std(&x);
    let est = bundle.s2s_forward(&x.map(|v| v / std))?.map(|v| v * std);
    let enhanced_mp = with_log_mag(&noisy_mp, &est, cfg.log_floor)?;
    let s2s_spec = recombine(&enhanced_mp, &noisy_mp)?;
    let s2s_noisy_phase = istft(&s2s_spec, sr)?;
    let ri = bundle.ri2ri_forward(&ri_planes(&s2s_spec))?;
    let enhanced = istft(&spectrogram_from_ri(&ri, cfg.stft, noisy.len())?, sr)?;
    Ok(Enhancement {
        s2s_noisy_phase,
        enhanced,
    })
}

pub fn two_stage_enhance(noisy: &Waveform, bundle: &ModelBundle) -> Result<Waveform> {
    Ok(enhance_stages(noisy, bundle)?.enhanced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, GradCheckOptions};
    use crate::metrics::si_sdr;
    use crate::signal_model::pseudo_speech;

    fn toy(depth: usize, base: usize, sa: bool, n_freq: usize) -> UNetConfig {
        UNetConfig {
            use_self_attention: sa,
            attention_dim: 4,
            n_freq,
            ..UNetConfig::s2s(depth, base)
        }
    }

    fn ramp(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|i| (i as f64 * seed).sin()).collect()).unwrap()
    }

    #[test]
    fn shapes_are_preserved_for_any_frame_count() {
        let s2s = UNet::new(toy(2, 4, true, 16), Precision::F32, 1).unwrap();
        let ri = UNet::new(UNetConfig { n_freq: 16, ..UNetConfig::ri2ri(2, 4) }, Precision::F32, 1).unwrap();
        for t in [1, 2, 7] {
            assert_eq!(s2s.infer(&ramp(&[1, 16, t], 0.3)).unwrap().shape(), &[1, 16, t]);
            assert_eq!(ri.infer(&ramp(&[2, 16, t], 0.3)).unwrap().shape(), &[2, 16, t]);
        }
        assert_eq!(s2s.infer(&ramp(&[1, 8, 3], 0.3)).unwrap_err().kind(), "ShapeError");
    }

    #[test]
    fn zero_input_gives_finite_bounded_output() {
        let net = UNet::new(toy(2, 4, true, 16), Precision::F32, 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 16, 5]));
        let fwd = net.forward(&mut g, x).unwrap();
        assert!(g.value(fwd.output).all_finite());
        let gain = g.value(fwd.gain.unwrap()).item();
        assert!(gain > 0.0);
        assert!(g.value(fwd.pre_gain.unwrap()).data().iter().all(|v| v.abs() <= 1.0));
        assert!(g.value(fwd.output).data().iter().all(|v| v.abs() <= gain));
    }

    #[test]
    fn attention_rows_sum_to_one_and_single_frame_is_identity_weight() {
        let net = UNet::new(toy(1, 2, true, 8), Precision::F64, 2).unwrap();
        for t in [1, 4] {
            let mut g = Graph::new();
            let x = g.constant(ramp(&[1, 1, 8, t], 0.7));
            let att = net.forward(&mut g, x).unwrap().attention.unwrap();
            for row in g.value(att.weights).data().chunks(t) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_input_gives_uniform_attention() {
        // A frame-local time kernel keeps every bottleneck frame identical.
        let cfg = UNetConfig {
            kernel: (3, 1),
            ..toy(1, 2, true, 8)
        };
        let net = UNet::new(cfg, Precision::F64, 2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 8, 4], 0.5));
        let att = net.forward(&mut g, x).unwrap().attention.unwrap();
        assert!(g.value(att.weights).data().iter().all(|w| (w - 0.25).abs() < 1e-12));
    }

    #[test]
    fn attention_is_time_equivariant() {
        // depth 1 with a 1-frame time kernel keeps every layer frame-local
        // except attention, so permuting frames permutes the output.
        let cfg = UNetConfig {
            kernel: (3, 1),
            ..toy(1, 2, true, 8)
        };
        let net = UNet::new(cfg, Precision::F64, 5).unwrap();
        let x = ramp(&[1, 8, 3], 0.9);
        let perm = [2, 0, 1];
        let permute = |t: &Tensor| {
            let (c, f, n) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut out = vec![0.0; t.len()];
            for r in 0..c * f {
                for (j, &p) in perm.iter().enumerate() {
                    out[r * n + j] = t.data()[r * n + p];
                }
            }
            Tensor::from_vec(vec![c, f, n], out).unwrap()
        };
        let a = permute(&net.infer(&x).unwrap());
        let b = net.infer(&permute(&x)).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_block_gradients() {
        let net = UNet::new(toy(1, 4, true, 8), Precision::F64, 11).unwrap();
        let x = ramp(&[1, 1, 8, 3], 0.41);
        let report = check_gradients(&net.params, GradCheckOptions::default(), |g, store| {
            let xv = g.constant(x.clone());
            let out = net.forward_with(store, g, xv)?.output;
            let sq = g.square(out);
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{:?}", report.per_param);
    }

    #[test]
    fn identity_weights_reproduce_input() {
        for cfg in [toy(2, 4, true, 16), UNetConfig { n_freq: 16, ..UNetConfig::ri2ri(2, 4) }] {
            let mut net = UNet::new(cfg, Precision::F64, 1).unwrap();
            net.set_identity().unwrap();
            let x = ramp(&[cfg.in_channels, 16, 6], 0.37);
            let y = net.infer(&x).unwrap();
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-6, "{a} {b}");
            }
        }
    }

    #[test]
    fn untrained_bundle_runs_end_to_end() {
        let noisy = pseudo_speech(0.4, 16000, 1);
        let b = ModelBundle::new(BundleConfig::desk(), Precision::F32, 9).unwrap();
        let out = two_stage_enhance(&noisy, &b).unwrap();
        assert_eq!(out.len(), noisy.len());
        assert!(out.samples.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_bundle_preserves_signal() {
        let noisy = pseudo_speech(0.5, 16000, 1);
        let b = ModelBundle::identity(BundleConfig::desk(), Precision::F32).unwrap();
        let out = two_stage_enhance(&noisy, &b).unwrap();
        let score = si_sdr(&noisy.samples, &out.samples).unwrap();
        assert!(score > 40.0, "{score}");
    }

    #[test]
    fn bundle_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let mut b = ModelBundle::new(BundleConfig::desk(), Precision::F32, 4).unwrap();
        b.pretrained.s2s = true;
        b.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back.pretrained, b.pretrained);
        assert_eq!(back.config, b.config);
        assert_eq!(back.s2s.params.flat_values(), b.s2s.params.flat_values());
        assert_eq!(back.ri2ri.params.flat_values(), b.ri2ri.params.flat_values());
    }

    #[test]
    fn inconsistent_bundle_config_rejected() {
        let mut c = BundleConfig::desk();
        c.s2s.n_freq = 128;
        assert_eq!(c.validate().unwrap_err().kind(), "ConfigError");
        let mut c = BundleConfig::desk();
        c.ri2ri.use_self_attention = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn plane_layout_round_trips() {
        let s = pseudo_speech(0.2, 16000, 8);
        let cfg = StftConfig::default();
        let spec = stft(&s, &cfg).unwrap();
        let mut zeroed = spec.clone();
        for l in 0..spec.n_frames {
            zeroed.values[l * 257 + 256] = Complex64::new(0.0, 0.0);
        }
        let back = spectrogram_from_ri(&ri_planes(&spec), cfg, s.len()).unwrap();
        assert_eq!(back.values, zeroed.values);
        let mp = decompose(&spec, DEFAULT_FLOOR).unwrap();
        let lm = log_mag_planes(&mp);
        assert_eq!(lm.shape(), &[1, 256, spec.n_frames]);
        let rebuilt = with_log_mag(&mp, &lm, DEFAULT_FLOOR).unwrap();
        for l in 0..mp.n_frames {
            assert_eq!(rebuilt.log_mag[l * 257..l * 257 + 256], mp.log_mag[l * 257..l * 257 + 256]);
            assert_eq!(rebuilt.log_mag[l * 257 + 256], DEFAULT_FLOOR.ln());
        }
    }
}
