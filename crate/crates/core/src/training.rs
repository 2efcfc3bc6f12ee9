//! Objectives, augmentation and the staged training loop.
//!
//! Training runs in three stages: the magnitude network alone on the
//! log-magnitude MSE, the complex network alone on negative SI-SDR with
//! clean-magnitude/noisy-phase inputs, then a fine-tuning stage in which the
//! complex network consumes the (detached) magnitude estimate. Each active
//! network is always trained with its own loss.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, Precision, Tensor, Var};
use crate::error::{Error, Result};
use crate::manifest::Utterance;
use crate::metrics::{evaluate_pair, LpcFrameConfig, MetricsReport};
use crate::models::{
    enhance_stages, log_mag_planes, ri_planes, spectrogram_from_ri, utterance_std, BundleConfig, ModelBundle,
};
use crate::parallel::par_map;
use crate::report::Table;
use crate::stft::{decompose, istft, recombine, stft, StftConfig, Waveform};

pub const CONFIG_VERSION: u32 = 1;
/// Relative regularizer of the SI-SDR denominator; bounds the loss near −100 dB.
pub const SI_SDR_LOSS_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainS2s,
    PretrainRi2ri,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainS2s => "pretrain_s2s",
            Stage::PretrainRi2ri => "pretrain_ri2ri",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub enabled: bool,
    pub n_time_masks: usize,
    pub n_freq_masks: usize,
    pub max_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_time_masks: 2,
            n_freq_masks: 2,
            max_width: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub version: u32,
    pub stage: Stage,
    /// Freeze flags apply to the fine-tuning stage; pre-training stages
    /// always train exactly their own network.
    pub freeze_s2s: bool,
    pub freeze_ri2ri: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Frames per training crop; the frequency extent is always the full
    /// model input (256 bins).
    pub crop_frames: usize,
    /// Applied during magnitude pre-training only.
    pub spec_augment: SpecAugmentConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Validation snapshot period in steps (0 disables).
    pub validation_every: usize,
    /// Share of utterances held out for validation.
    pub validation_fraction: f64,
    /// Allows fine-tuning networks that were never pre-trained. Exists only
    /// to reproduce the failure of joint training from scratch.
    pub force_joint_from_scratch: bool,
    /// Architecture used when no initial bundle is supplied.
    pub model: BundleConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::for_stage(Stage::Finetune)
    }
}

impl TrainingConfig {
    /// Stage defaults: SpecAugment on for magnitude pre-training only;
    /// fine-tuning freezes the magnitude network and tunes the complex one.
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            version: CONFIG_VERSION,
            stage,
            freeze_s2s: stage == Stage::Finetune,
            freeze_ri2ri: false,
            lr: 1e-3,
            batch_size: 4,
            steps: 1000,
            crop_frames: 256,
            spec_augment: SpecAugmentConfig {
                enabled: stage == Stage::PretrainS2s,
                ..SpecAugmentConfig::default()
            },
            seed: 0,
            checkpoint_every: 100,
            validation_every: 100,
            validation_fraction: 0.1,
            force_joint_from_scratch: false,
            model: BundleConfig::reference(),
        }
    }

    /// Small-model settings that overfit a handful of one-second utterances
    /// on a CPU in minutes.
    pub fn desk(stage: Stage) -> Self {
        Self {
            lr: 3e-3,
            steps: match stage {
                Stage::PretrainS2s => 500,
                Stage::PretrainRi2ri => 800,
                Stage::Finetune => 200,
            },
            crop_frames: 64,
            checkpoint_every: 0,
            validation_every: 0,
            validation_fraction: 0.0,
            model: BundleConfig::desk(),
            ..Self::for_stage(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, message: String| {
            Err(Error::Config {
                path: path.to_string(),
                message,
            })
        };
        if self.version != CONFIG_VERSION {
            return err("version", format!("unsupported version {}, expected {CONFIG_VERSION}", self.version));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr", format!("must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1".into());
        }
        if self.crop_frames == 0 {
            return err("crop_frames", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return err("validation_fraction", "must be in [0, 1)".into());
        }
        if self.spec_augment.enabled && self.spec_augment.max_width == 0 {
            return err("spec_augment.max_width", "must be at least 1".into());
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<MetricsReport>,
}

/// Mean squared log-magnitude error over all cells (and the batch).
pub fn loss_s2s(g: &mut Graph, est_log_mag: Var, clean_log_mag: Var) -> Result<Var> {
    if g.shape(est_log_mag) != g.shape(clean_log_mag) {
        return Err(Error::shape(format!(
            "loss_s2s shapes {:?} and {:?}",
            g.shape(est_log_mag),
            g.shape(clean_log_mag)
        )));
    }
    let d = g.sub(est_log_mag, clean_log_mag)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Negative SI-SDR (dB) of `istft(est_ri)` against `clean`, averaged over
/// the batch. `est_ri` is `L×K×2` with `clean` of shape `S`, or `N×L×K×2`
/// with `clean` of shape `N×S`.
pub fn loss_ri2ri(g: &mut Graph, est_ri: Var, clean: &Tensor, cfg: &StftConfig) -> Result<Var> {
    let (n, s) = match clean.shape() {
        [s] => (1, *s),
        [n, s] => (*n, *s),
        other => return Err(Error::shape(format!("clean waveform shape {other:?}"))),
    };
    let batched = g.shape(est_ri).len() == 4;
    if batched != (clean.ndim() == 2) || (batched && g.shape(est_ri)[0] != n) {
        return Err(Error::shape(format!(
            "estimate {:?} does not match clean {:?}",
            g.shape(est_ri),
            clean.shape()
        )));
    }
    let energies: Vec<f64> = clean.data().chunks(s).map(|c| c.iter().map(|v| v * v).sum()).collect();
    if energies.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::invalid("SI-SDR loss needs a non-silent clean reference"));
    }
    let wave = g.istft_layer(est_ri, cfg, s)?;
    let wave = g.reshape(wave, &[n, s])?;
    let reference = g.constant(clean.clone().reshaped(vec![n, s])?);
    let energy = g.constant(Tensor::from_vec(vec![n, 1], energies)?);
    let prod = g.mul(wave, reference)?;
    let dot = g.sum_axes(prod, &[1])?;
    let alpha = g.div(dot, energy)?;
    let target = g.mul(alpha, reference)?;
    let resid = g.sub(target, wave)?;
    let t2 = g.square(target);
    let num = g.sum_axes(t2, &[1])?;
    let r2 = g.square(resid);
    let den = g.sum_axes(r2, &[1])?;
    let reg = g.scale(num, SI_SDR_LOSS_EPS);
    let den = g.add(den, reg)?;
    let den = g.add_scalar(den, 1e-300);
    let num = g.add_scalar(num, 1e-300);
    let ratio = g.div(num, den)?;
    let log = g.log(ratio);
    let db = g.scale(log, 10.0 / std::f64::consts::LN_10);
    let mean = g.mean(db);
    Ok(g.scale(mean, -1.0))
}

/// `N×2×F×T` real/imaginary planes to the `N×T×(F+1)×2` layout of
/// [`Graph::istft_layer`], with a zero Nyquist bin.
pub fn planes_to_ri_layout(g: &mut Graph, planes: Var) -> Result<Var> {
    let s = g.shape(planes).to_vec();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::shape(format!("expected N×2×F×T planes, got {s:?}")));
    }
    let t = g.transpose(planes, 1, 3)?;
    g.pad(t, 2, 0, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Time,
    Freq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mask {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Masks random time and frequency stripes of `planes: 1×F×T` in place
/// with `fill`; returns the stripes applied.
pub fn spec_augment(planes: &mut Tensor, cfg: &SpecAugmentConfig, fill: f64, rng: &mut ChaCha8Rng) -> Vec<Mask> {
    if !cfg.enabled || cfg.max_width == 0 {
        return Vec::new();
    }
    let (f, t) = (planes.shape()[1], planes.shape()[2]);
    let mut masks = Vec::new();
    let mut draw = |axis, extent: usize, rng: &mut ChaCha8Rng| {
        let width = rng.gen_range(1..=cfg.max_width).min(extent);
        let start = rng.gen_range(0..=extent - width);
        masks.push(Mask { axis, start, width });
    };
    for _ in 0..cfg.n_time_masks {
        draw(MaskAxis::Time, t, rng);
    }
    for _ in 0..cfg.n_freq_masks {
        draw(MaskAxis::Freq, f, rng);
    }
    let data = planes.data_mut();
    for m in &masks {
        match m.axis {
            MaskAxis::Time => {
                for row in data.chunks_mut(t) {
                    row[m.start..m.start + m.width].fill(fill);
                }
            }
            MaskAxis::Freq => data[m.start * t..(m.start + m.width) * t].fill(fill),
        }
    }
    masks
}

/// Start frame of a `crop` window over `n_frames` frames (0 when the
/// utterance is not longer than the crop).
pub fn crop_start(n_frames: usize, crop: usize, rng: &mut ChaCha8Rng) -> usize {
    if n_frames <= crop {
        0
    } else {
        rng.gen_range(0..=n_frames - crop)
    }
}

/// Frames `start..start + crop` of `C×F×T` planes; frames past the end
/// repeat the last frame.
pub fn crop_frames(planes: &Tensor, start: usize, crop: usize) -> Tensor {
    let (c, f, t) = (planes.shape()[0], planes.shape()[1], planes.shape()[2]);
    let mut out = Vec::with_capacity(c * f * crop);
    for row in planes.data().chunks(t) {
        out.extend((start..start + crop).map(|i| row[i.min(t - 1)]));
    }
    Tensor::from_vec(vec![c, f, crop], out).expect("sized")
}

/// Random crop of one or more aligned `C×F×T` tensors sharing a window.
pub fn random_crop(planes: &[&Tensor], crop: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let start = crop_start(planes[0].shape()[2], crop, rng);
    planes.iter().map(|p| crop_frames(p, start, crop)).collect()
}

/// Per-utterance training tensors.
#[derive(Debug, Clone)]
struct Prepared {
    noisy_lm: Tensor,
    clean_lm: Tensor,
    std: f64,
    mean: f64,
    noisy_phase: Tensor,
    clean_ri: Tensor,
    clean_mag_noisy_phase_ri: Tensor,
}

fn prepare(u: &Utterance, cfg: &BundleConfig) -> Result<Prepared> {
    let noisy_spec = stft(&u.example.noisy, &cfg.stft)?;
    let clean_spec = stft(&u.example.clean, &cfg.stft)?;
    let noisy = decompose(&noisy_spec, cfg.log_floor)?;
    let clean = decompose(&clean_spec, cfg.log_floor)?;
    if noisy.n_frames != clean.n_frames {
        return Err(Error::invalid(format!("utterance {}: clean and noisy lengths differ", u.id)));
    }
    let noisy_lm = log_mag_planes(&noisy);
    let mean = noisy_lm.data().iter().sum::<f64>() / noisy_lm.len() as f64;
    let mut phase = noisy.clone();
    phase.log_mag = noisy.phase.clone();
    Ok(Prepared {
        std: utterance_std(&noisy_lm),
        mean,
        noisy_lm,
        clean_lm: log_mag_planes(&clean),
        noisy_phase: log_mag_planes(&phase),
        clean_ri: ri_planes(&clean_spec),
        clean_mag_noisy_phase_ri: ri_planes(&recombine(&clean, &noisy)?),
    })
}

/// Real/imaginary planes from log-magnitude and phase planes (`1×F×T` each).
fn polar_planes(log_mag: &[f64], phase: &[f64], f: usize, t: usize) -> Tensor {
    let mut data = vec![0.0; 2 * f * t];
    for i in 0..f * t {
        let m = log_mag[i].exp();
        data[i] = m * phase[i].cos();
        data[f * t + i] = m * phase[i].sin();
    }
    Tensor::from_vec(vec![2, f, t], data).expect("sized")
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<TrainRecord>,
}

/// Deterministic split: the last `floor(n·fraction)` utterances validate.
pub fn split_holdout(utts: &[Utterance], fraction: f64) -> (&[Utterance], &[Utterance]) {
    let n_val = ((utts.len() as f64) * fraction).floor() as usize;
    utts.split_at(utts.len() - n_val.min(utts.len()))
}

fn save_into(bundle: &ModelBundle, dir: Option<&Path>, name: &str) -> Result<Option<PathBuf>> {
    match dir {
        None => Ok(None),
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join(name);
            bundle.save(&p)?;
            Ok(Some(p))
        }
    }
}

/// Runs one training stage. Checkpoints (and the last good state on
/// divergence) go to `out_dir` when given.
pub fn run_stage(
    cfg: &TrainingConfig,
    mut bundle: ModelBundle,
    utterances: &[Utterance],
    out_dir: Option<&Path>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if cfg.stage == Stage::Finetune
        && !cfg.force_joint_from_scratch
        && !(bundle.pretrained.s2s && bundle.pretrained.ri2ri)
    {
        return Err(Error::Config {
            path: "stage".into(),
            message: "fine-tuning needs both networks pre-trained (set force_joint_from_scratch to override)"
                .into(),
        });
    }
    let (train, holdout) = split_holdout(utterances, cfg.validation_fraction);
    if train.is_empty() {
        return Err(Error::invalid("no training utterances"));
    }
    let bcfg = bundle.config;
    let prepared: Vec<Prepared> = train.iter().map(|u| prepare(u, &bcfg)).collect::<Result<_>>()?;

    let (train_s2s, train_ri2ri) = match cfg.stage {
        Stage::PretrainS2s => (true, false),
        Stage::PretrainRi2ri => (false, true),
        Stage::Finetune => (!cfg.freeze_s2s, !cfg.freeze_ri2ri),
    };
    bundle.s2s.params.freeze_all(!train_s2s);
    bundle.ri2ri.params.freeze_all(!train_ri2ri);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let (mut adam_s2s, mut adam_ri2ri) = (Adam::new(adam_cfg), Adam::new(adam_cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.steps);
    let f = bcfg.s2s.n_freq;
    let crop = cfg.crop_frames;

    for step in 1..=cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| {
                if order.is_empty() {
                    order = (0..prepared.len()).collect();
                    order.shuffle(&mut rng);
                }
                order.pop().expect("refilled")
            })
            .collect();
        let mut g = Graph::new();
        let mut losses = Vec::new();
        match cfg.stage {
            Stage::PretrainRi2ri => {
                let mut inputs = Vec::new();
                let mut targets = Vec::new();
                for &i in &batch {
                    let p = &prepared[i];
                    let c = random_crop(&[&p.clean_mag_noisy_phase_ri, &p.clean_ri], crop, &mut rng);
                    inputs.push(c[0].clone());
                    targets.push(c[1].clone());
                }
                let x = g.constant(Tensor::stack(&inputs)?);
                let target = target_waves(&targets, &bcfg.stft)?;
                let out = bundle.ri2ri.forward(&mut g, x)?.output;
                let ri = planes_to_ri_layout(&mut g, out)?;
                losses.push(loss_ri2ri(&mut g, ri, &target, &bcfg.stft)?);
            }
            Stage::PretrainS2s | Stage::Finetune => {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                let mut phases = Vec::new();
                let mut ri_targets = Vec::new();
                let mut stds = Vec::new();
                for &i in &batch {
                    let p = &prepared[i];
                    let c = random_crop(&[&p.noisy_lm, &p.clean_lm, &p.noisy_phase, &p.clean_ri], crop, &mut rng);
                    let mut x = c[0].clone();
                    if cfg.stage == Stage::PretrainS2s {
                        spec_augment(&mut x, &cfg.spec_augment, p.mean, &mut rng);
                    }
                    xs.push(x.map(|v| v / p.std));
                    ys.push(c[1].clone());
                    phases.push(c[2].clone());
                    ri_targets.push(c[3].clone());
                    stds.push(p.std);
                }
                let n = batch.len();
                let x = g.constant(Tensor::stack(&xs)?);
                let out = bundle.s2s.forward(&mut g, x)?.output;
                let std = g.constant(Tensor::from_vec(vec![n, 1, 1, 1], stds)?);
                let est = g.mul(out, std)?;
                if cfg.stage == Stage::PretrainS2s || train_s2s {
                    let y = g.constant(Tensor::stack(&ys)?);
                    losses.push(loss_s2s(&mut g, est, y)?);
                }
                if cfg.stage == Stage::Finetune {
                    // The magnitude estimate enters the complex network as data.
                    let est_val = g.value(est).data().to_vec();
                    let ri_in: Vec<Tensor> = (0..n)
                        .map(|b| {
                            polar_planes(&est_val[b * f * crop..(b + 1) * f * crop], phases[b].data(), f, crop)
                        })
                        .collect();
                    let xr = g.constant(Tensor::stack(&ri_in)?);
                    let target = target_waves(&ri_targets, &bcfg.stft)?;
                    let out = bundle.ri2ri.forward(&mut g, xr)?.output;
                    let ri = planes_to_ri_layout(&mut g, out)?;
                    losses.push(loss_ri2ri(&mut g, ri, &target, &bcfg.stft)?);
                }
            }
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        let loss = g.value(total).item();
        let diverged = |bundle: &ModelBundle, what: &str| -> Result<StageOutcome> {
            let saved = save_into(bundle, out_dir, "last_good.ckpt")?;
            Err(Error::Diverged {
                step,
                message: match saved {
                    Some(p) => format!("{what}; last good state saved to {}", p.display()),
                    None => what.to_string(),
                },
            })
        };
        if !loss.is_finite() {
            return diverged(&bundle, &format!("loss is {loss}"));
        }
        bundle.s2s.params.zero_grad();
        bundle.ri2ri.params.zero_grad();
        if train_s2s || train_ri2ri {
            g.backward_into(total, &mut [&mut bundle.s2s.params, &mut bundle.ri2ri.params])?;
        }
        if !(bundle.s2s.params.grad_norm().is_finite() && bundle.ri2ri.params.grad_norm().is_finite()) {
            return diverged(&bundle, "non-finite gradient");
        }
        adam_s2s.step(&mut bundle.s2s.params);
        adam_ri2ri.step(&mut bundle.ri2ri.params);

        let validation = if cfg.validation_every > 0 && step % cfg.validation_every == 0 && !holdout.is_empty() {
            Some(validate_stage(cfg.stage, &bundle, holdout, &LpcFrameConfig::default())?)
        } else {
            None
        };
        log.push(TrainRecord {
            step,
            stage: cfg.stage,
            loss,
            wall_time_s: start.elapsed().as_secs_f64(),
            validation,
        });
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save_into(&bundle, out_dir, &format!("step_{step:06}.ckpt"))?;
        }
    }
    match cfg.stage {
        Stage::PretrainS2s => bundle.pretrained.s2s = true,
        Stage::PretrainRi2ri => bundle.pretrained.ri2ri = true,
        Stage::Finetune => {}
    }
    Ok(StageOutcome { bundle, log })
}

/// Clean waveforms (`N×S`) synthesized from cropped clean RI planes, so
/// targets share the framing of the estimates.
fn target_waves(planes: &[Tensor], cfg: &StftConfig) -> Result<Tensor> {
    let crop = planes[0].shape()[2];
    let len = cfg.span(crop);
    let mut data = Vec::with_capacity(planes.len() * len);
    for p in planes {
        let spec = spectrogram_from_ri(p, *cfg, len)?;
        // Only the samples are used; the rate is a placeholder.
        data.extend(istft(&spec, 1)?.samples);
    }
    Tensor::from_vec(vec![planes.len(), len], data)
}

fn validate_stage(stage: Stage, bundle: &ModelBundle, utts: &[Utterance], metric: &LpcFrameConfig) -> Result<MetricsReport> {
    let reports: Vec<MetricsReport> = utts
        .iter()
        .map(|u| {
            let clean = &u.example.clean;
            let est = match stage {
                Stage::PretrainS2s => enhance_stages(&u.example.noisy, bundle)?.s2s_noisy_phase,
                Stage::PretrainRi2ri => ri2ri_on_clean_magnitude(u, bundle)?.1,
                Stage::Finetune => enhance_stages(&u.example.noisy, bundle)?.enhanced,
            };
            evaluate_pair(clean, &est, metric)
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport::mean(&reports).expect("non-empty"))
}

/// `(input, output)` waveforms of the complex network fed with the clean
/// magnitude and the noisy phase of `u`.
pub fn ri2ri_on_clean_magnitude(u: &Utterance, bundle: &ModelBundle) -> Result<(Waveform, Waveform)> {
    let cfg = &bundle.config;
    let sr = u.example.noisy.sample_rate_hz;
    let noisy = decompose(&stft(&u.example.noisy, &cfg.stft)?, cfg.log_floor)?;
    let clean = decompose(&stft(&u.example.clean, &cfg.stft)?, cfg.log_floor)?;
    let spec = recombine(&clean, &noisy)?;
    let input = istft(&spec, sr)?;
    let out = bundle.ri2ri_forward(&ri_planes(&spec))?;
    let output = istft(&spectrogram_from_ri(&out, cfg.stft, u.example.noisy.len())?, sr)?;
    Ok((input, output))
}

/// Log-magnitude MSE of the magnitude network over whole utterances, without
/// cropping or augmentation (mean over utterances).
pub fn s2s_dataset_loss(bundle: &ModelBundle, utts: &[Utterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::invalid("loss needs at least one utterance"));
    }
    let mut total = 0.0;
    for u in utts {
        let p = prepare(u, &bundle.config)?;
        let est = bundle.s2s_forward(&p.noisy_lm.map(|v| v / p.std))?;
        let n = est.len() as f64;
        total += est
            .data()
            .iter()
            .zip(p.clean_lm.data())
            .map(|(e, c)| (e * p.std - c).powi(2))
            .sum::<f64>()
            / n;
    }
    Ok(total / utts.len() as f64)
}

/// Mean reports of the two-stage output and of the magnitude-only
/// (noisy-phase) output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BundleEvaluation {
    pub two_stage: MetricsReport,
    pub s2s_noisy_phase: MetricsReport,
}

pub fn evaluate_bundle(
    bundle: &ModelBundle,
    utts: &[Utterance],
    metric: &LpcFrameConfig,
    jobs: usize,
) -> Result<BundleEvaluation> {
    if utts.is_empty() {
        return Err(Error::invalid("evaluation needs at least one utterance"));
    }
    let pairs: Vec<(MetricsReport, MetricsReport)> = par_map(utts, jobs, |_, u| {
        let e = enhance_stages(&u.example.noisy, bundle)?;
        Ok((
            evaluate_pair(&u.example.clean, &e.enhanced, metric)?,
            evaluate_pair(&u.example.clean, &e.s2s_noisy_phase, metric)?,
        ))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let two: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let np: Vec<_> = pairs.iter().map(|p| p.1).collect();
    Ok(BundleEvaluation {
        two_stage: MetricsReport::mean(&two).expect("non-empty"),
        s2s_noisy_phase: MetricsReport::mean(&np).expect("non-empty"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub freeze_s2s: bool,
    pub freeze_ri2ri: bool,
    pub report: MetricsReport,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let word = |frozen: bool| if frozen { "freeze" } else { "tune" };
        format!("S2S {} / RI2RI {}", word(self.freeze_s2s), word(self.freeze_ri2ri))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ablation {
    pub pretrained: MetricsReport,
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new("Fine-tuning combinations", &["configuration", "LLR", "CD", "SI-SDR"]);
        for r in &self.rows {
            t.push(r.label(), vec![r.report.llr, r.report.cd, r.report.si_sdr_db]);
        }
        t
    }

    pub fn row(&self, freeze_s2s: bool, freeze_ri2ri: bool) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.freeze_s2s == freeze_s2s && r.freeze_ri2ri == freeze_ri2ri)
            .expect("all four combinations present")
    }
}

/// The four freeze combinations, fine-tuned from the same pre-trained
/// bundle with identical seeds, evaluated on `eval` with full two-stage
/// enhancement. Row order: (freeze, freeze), (tune, freeze),
/// (freeze, tune), (tune, tune).
pub fn run_ablation(
    base: &TrainingConfig,
    pretrained: &ModelBundle,
    train: &[Utterance],
    eval: &[Utterance],
    metric: &LpcFrameConfig,
    jobs: usize,
) -> Result<Ablation> {
    let pre = evaluate_bundle(pretrained, eval, metric, jobs)?.two_stage;
    let combos = [(true, true), (false, true), (true, false), (false, false)];
    let mut rows = Vec::new();
    for (freeze_s2s, freeze_ri2ri) in combos {
        let cfg = TrainingConfig {
            stage: Stage::Finetune,
            freeze_s2s,
            freeze_ri2ri,
            spec_augment: SpecAugmentConfig {
                enabled: false,
                ..base.spec_augment
            },
            ..*base
        };
        let out = run_stage(&cfg, pretrained.clone(), train, None)?;
        let report = evaluate_bundle(&out.bundle, eval, metric, jobs)?.two_stage;
        rows.push(AblationRow {
            freeze_s2s,
            freeze_ri2ri,
            report,
        });
    }
    Ok(Ablation {
        pretrained: pre,
        rows,
    })
}

/// Fresh bundle for `cfg.model`, stored in float32.
pub fn initial_bundle(cfg: &TrainingConfig) -> Result<ModelBundle> {
    ModelBundle::new(cfg.model, Precision::F32, cfg.seed)
}
