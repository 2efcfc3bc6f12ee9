//! Reverberant, noisy mixture synthesis: `y = s * h + n`.
//!
//! Room impulse responses are synthetic: a unit direct path followed by a
//! Gaussian tail under an exponential envelope that decays 60 dB over the
//! nominal RT60. Every random draw is driven by an explicit seed.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::Waveform;

/// Standard deviation of the reverberant tail relative to the direct path.
pub const TAIL_GAIN: f64 = 0.1;

/// Standard deviation of the background floor of [`pseudo_speech`],
/// relative to its 0.5 peak.
pub const BACKGROUND_LEVEL: f64 = 1e-3;

/// RIR length as a multiple of the nominal RT60 in [`make_example`].
pub const RIR_LENGTH_FACTOR: f64 = 1.25;

#[derive(Debug, Clone, PartialEq)]
pub struct RoomImpulseResponse {
    pub taps: Vec<f64>,
    pub sample_rate_hz: u32,
    pub rt60_s: f64,
    pub seed: u64,
}

impl RoomImpulseResponse {
    /// Single unit tap: no reverberation.
    pub fn impulse(sample_rate_hz: u32) -> Self {
        Self {
            taps: vec![1.0],
            sample_rate_hz,
            rt60_s: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    White,
    Pink,
    RecordedFile,
}

/// Parameters of one synthetic mixture. `rt60_s == 0` selects a dry
/// (impulse) response; `snr_db == None` disables additive noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub rt60_s: f64,
    pub snr_db: Option<f64>,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rt60_s != 0.0 && !(0.1..=1.5).contains(&self.rt60_s) {
            return Err(Error::invalid(format!(
                "rt60_s {} outside [0.1, 1.5] (or 0 for a dry response)",
                self.rt60_s
            )));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::invalid("snr_db must be finite; use null to disable noise"));
            }
        }
        Ok(())
    }
}

/// Clean, reverberant and noisy versions of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub clean: Waveform,
    pub reverberant: Waveform,
    pub noisy: Waveform,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn synth_rir(
    rt60_s: f64,
    length_s: f64,
    sample_rate_hz: u32,
    seed: u64,
) -> Result<RoomImpulseResponse> {
    if !(rt60_s > 0.0 && rt60_s.is_finite()) {
        return Err(Error::invalid(format!("rt60_s must be positive, got {rt60_s}")));
    }
    if !(length_s >= rt60_s) {
        return Err(Error::invalid(format!(
            "RIR length {length_s} s is shorter than RT60 {rt60_s} s"
        )));
    }
    if sample_rate_hz == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let fs = sample_rate_hz as f64;
    let n = (length_s * fs).round() as usize;
    let decay = 3.0 * 10f64.ln() / rt60_s;
    let mut rng = rng_for(seed, 1);
    let mut taps = Vec::with_capacity(n);
    taps.push(1.0);
    for i in 1..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        taps.push(TAIL_GAIN * z * (-(i as f64) / fs * decay).exp());
    }
    Ok(RoomImpulseResponse {
        taps,
        sample_rate_hz,
        rt60_s,
        seed,
    })
}

/// Schroeder backward-integration RT60 estimate: a least-squares line is
/// fitted to the energy decay curve between `-5` and `-25` dB and
/// extrapolated to 60 dB of decay.
pub fn estimate_rt60(taps: &[f64], sample_rate_hz: u32) -> Option<f64> {
    let mut edc = vec![0.0; taps.len()];
    let mut acc = 0.0;
    for i in (0..taps.len()).rev() {
        acc += taps[i] * taps[i];
        edc[i] = acc;
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let fs = sample_rate_hz as f64;
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, e) in edc.iter().enumerate() {
        let db = 10.0 * (e / total).log10();
        if db > -5.0 {
            continue;
        }
        if db < -25.0 {
            break;
        }
        let t = i as f64 / fs;
        n += 1.0;
        sx += t;
        sy += db;
        sxx += t * t;
        sxy += t * db;
    }
    if n < 2.0 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Linear convolution truncated to the length of `s` (FFT based).
pub fn convolve(s: &Waveform, h: &RoomImpulseResponse) -> Result<Waveform> {
    if s.sample_rate_hz != h.sample_rate_hz {
        return Err(Error::invalid(format!(
            "signal at {} Hz, impulse response at {} Hz",
            s.sample_rate_hz, h.sample_rate_hz
        )));
    }
    if s.is_empty() || h.taps.is_empty() {
        return Ok(Waveform::zeros(s.len(), s.sample_rate_hz));
    }
    let full = s.len() + h.taps.len() - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        buf.resize(size, Complex64::new(0.0, 0.0));
        buf
    };
    let mut a = pad(&s.samples);
    let mut b = pad(&h.taps);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    let samples = a[..s.len()].iter().map(|c| c.re / size as f64).collect();
    Waveform::new(samples, s.sample_rate_hz)
}

/// `x + g·noise` with `g` chosen so the energy ratio equals `snr_db`.
/// `snr_db = +∞` returns `x` unchanged.
pub fn mix_at_snr(x: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if snr_db == f64::INFINITY {
        return Ok(x.clone());
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::invalid(format!("invalid SNR {snr_db}")));
    }
    if noise.len() < x.len() {
        return Err(Error::invalid(format!(
            "noise has {} samples, signal has {}",
            noise.len(),
            x.len()
        )));
    }
    if x.sample_rate_hz != noise.sample_rate_hz {
        return Err(Error::invalid("signal and noise sample rates differ"));
    }
    let ex = x.energy();
    let n = &noise.samples[..x.len()];
    let en: f64 = n.iter().map(|v| v * v).sum();
    if ex <= 0.0 {
        return Err(Error::invalid("signal is silent"));
    }
    if en <= 0.0 {
        return Err(Error::invalid("noise is silent"));
    }
    let g = (ex / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = x.samples.iter().zip(n).map(|(a, b)| a + g * b).collect();
    Waveform::new(samples, x.sample_rate_hz)
}

pub fn white_noise(len: usize, sample_rate_hz: u32, seed: u64) -> Waveform {
    let mut rng = rng_for(seed, 2);
    let samples = (0..len)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Waveform {
        samples,
        sample_rate_hz,
    }
}

/// Gaussian noise with a 1/f power spectrum (amplitude ∝ f^-1/2).
pub fn pink_noise(len: usize, sample_rate_hz: u32, seed: u64) -> Waveform {
    if len == 0 {
        return Waveform::zeros(0, sample_rate_hz);
    }
    let white = white_noise(len, sample_rate_hz, seed);
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = white
        .samples
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(len - k);
        *v *= if f == 0 { 0.0 } else { 1.0 / (f as f64).sqrt() };
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let samples = buf.iter().map(|c| c.re / len as f64).collect();
    Waveform {
        samples,
        sample_rate_hz,
    }
}

/// Tile `rec` to `len` samples.
pub fn looped(rec: &Waveform, len: usize) -> Result<Waveform> {
    if rec.is_empty() {
        return Err(Error::invalid("recorded noise is empty"));
    }
    let samples = (0..len).map(|i| rec.samples[i % rec.len()]).collect();
    Ok(Waveform {
        samples,
        sample_rate_hz: rec.sample_rate_hz,
    })
}

pub fn make_example(clean: &Waveform, spec: &MixtureSpec) -> Result<Example> {
    make_example_with_noise(clean, spec, None)
}

/// As [`make_example`], with a recording for [`NoiseKind::RecordedFile`].
pub fn make_example_with_noise(
    clean: &Waveform,
    spec: &MixtureSpec,
    recorded: Option<&Waveform>,
) -> Result<Example> {
    spec.validate()?;
    let sr = clean.sample_rate_hz;
    let rir = if spec.rt60_s == 0.0 {
        RoomImpulseResponse::impulse(sr)
    } else {
        synth_rir(spec.rt60_s, spec.rt60_s * RIR_LENGTH_FACTOR, sr, spec.seed)?
    };
    let reverberant = convolve(clean, &rir)?;
    let noisy = match spec.snr_db {
        None => reverberant.clone(),
        Some(snr) => {
            let noise = match spec.noise_kind {
                NoiseKind::White => white_noise(clean.len(), sr, spec.seed),
                NoiseKind::Pink => pink_noise(clean.len(), sr, spec.seed),
                NoiseKind::RecordedFile => {
                    let rec = recorded.ok_or_else(|| {
                        Error::invalid("recorded-file noise requested without a recording")
                    })?;
                    looped(rec, clean.len())?
                }
            };
            mix_at_snr(&reverberant, &noise, snr)?
        }
    };
    Ok(Example {
        clean: clean.clone(),
        reverberant,
        noisy,
    })
}

/// Bundled deterministic clean-source generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Formant-filtered glottal pulse trains in syllable-like bursts.
    PseudoSpeech,
    /// Sum of linear chirps under a slow envelope.
    Chirp,
}

pub fn synth_source(kind: SourceKind, duration_s: f64, sample_rate_hz: u32, seed: u64) -> Waveform {
    match kind {
        SourceKind::PseudoSpeech => pseudo_speech(duration_s, sample_rate_hz, seed),
        SourceKind::Chirp => chirp(duration_s, sample_rate_hz, seed),
    }
}

fn normalize_peak(samples: &mut [f64], peak: f64) {
    let max = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        samples.iter_mut().for_each(|v| *v *= peak / max);
    }
}

/// Second-order resonator coefficients `(a1, a2)` for `y[n] = x[n] - a1 y[n-1] - a2 y[n-2]`.
fn resonator(freq_hz: f64, bandwidth_hz: f64, fs: f64) -> (f64, f64) {
    let r = (-PI * bandwidth_hz / fs).exp();
    (-2.0 * r * (2.0 * PI * freq_hz / fs).cos(), r * r)
}

/// Syllable-like bursts of formant-filtered pulse trains or noise, peak
/// 0.5, over a faint white background so no stretch is digitally silent.
pub fn pseudo_speech(duration_s: f64, sample_rate_hz: u32, seed: u64) -> Waveform {
    let fs = sample_rate_hz as f64;
    let len = (duration_s * fs).round() as usize;
    let mut rng = rng_for(seed, 3);
    let mut out = vec![0.0; len];
    let mut pos = (rng.gen_range(0.02..0.08) * fs) as usize;
    while pos < len {
        let syl = (rng.gen_range(0.12..0.28) * fs) as usize;
        let end = (pos + syl).min(len);
        let f0_start = rng.gen_range(90.0..220.0);
        let f0_end = f0_start * rng.gen_range(0.8..1.25);
        let voiced = rng.gen_bool(0.8);
        let formants = [
            (rng.gen_range(300.0..900.0), rng.gen_range(60.0..120.0)),
            (rng.gen_range(900.0..2400.0), rng.gen_range(80.0..160.0)),
            (rng.gen_range(2400.0..3600.0), rng.gen_range(120.0..220.0)),
        ];
        let mut excitation = vec![0.0; end - pos];
        let mut phase = 0.0;
        for (i, e) in excitation.iter_mut().enumerate() {
            let frac = i as f64 / (end - pos) as f64;
            let noise: f64 = StandardNormal.sample(&mut rng);
            if voiced {
                phase += (f0_start + (f0_end - f0_start) * frac) / fs;
                if phase >= 1.0 {
                    phase -= 1.0;
                    *e += 1.0;
                }
                *e += 0.02 * noise;
            } else {
                *e = 0.3 * noise;
            }
        }
        let mut seg = excitation;
        for &(f, bw) in &formants {
            let (a1, a2) = resonator(f, bw, fs);
            let (mut y1, mut y2) = (0.0, 0.0);
            for v in seg.iter_mut() {
                let y = *v - a1 * y1 - a2 * y2;
                y2 = y1;
                y1 = y;
                *v = y;
            }
        }
        normalize_peak(&mut seg, rng.gen_range(0.5..1.0));
        let n = seg.len() as f64;
        for (i, v) in seg.iter().enumerate() {
            let env = (PI * i as f64 / n).sin().powf(0.7);
            out[pos + i] += v * env;
        }
        pos = end + (rng.gen_range(0.04..0.14) * fs) as usize;
    }
    normalize_peak(&mut out, 0.5);
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += 0.5 * BACKGROUND_LEVEL * z;
    }
    Waveform {
        samples: out,
        sample_rate_hz,
    }
}

pub fn chirp(duration_s: f64, sample_rate_hz: u32, seed: u64) -> Waveform {
    let fs = sample_rate_hz as f64;
    let len = (duration_s * fs).round() as usize;
    let mut rng = rng_for(seed, 4);
    let mut out = vec![0.0; len];
    for _ in 0..3 {
        let f_start = rng.gen_range(150.0..1500.0);
        let f_end = rng.gen_range(150.0..4000.0);
        let amp = rng.gen_range(0.3..1.0);
        let rate = (f_end - f_start) / duration_s.max(1e-9);
        let phase0 = rng.gen_range(0.0..2.0 * PI);
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / fs;
            *o += amp * (phase0 + 2.0 * PI * (f_start * t + 0.5 * rate * t * t)).sin();
        }
    }
    let env_rate = rng.gen_range(2.0..5.0);
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / fs;
        *o *= 0.55 + 0.45 * (2.0 * PI * env_rate * t).sin();
    }
    normalize_peak(&mut out, 0.5);
    Waveform {
        samples: out,
        sample_rate_hz,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(s: &[f64], h: &[f64]) -> Vec<f64> {
        (0..s.len())
            .map(|n| (0..h.len().min(n + 1)).map(|k| h[k] * s[n - k]).sum())
            .collect()
    }

    fn rir_from(taps: Vec<f64>) -> RoomImpulseResponse {
        RoomImpulseResponse {
            taps,
            sample_rate_hz: 16000,
            rt60_s: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn rt60_estimate_matches_nominal() {
        let rir = synth_rir(0.3, 0.375, 16000, 11).unwrap();
        let est = estimate_rt60(&rir.taps, 16000).unwrap();
        assert!((0.255..=0.345).contains(&est), "{est}");
    }

    #[test]
    fn direct_path_dominates_first_10ms() {
        let rir = synth_rir(0.8, 1.0, 16000, 2).unwrap();
        let (argmax, _) = rir
            .taps
            .iter()
            .enumerate()
            .fold((0, 0.0), |b, (i, v)| if v.abs() > b.1 { (i, v.abs()) } else { b });
        assert!(argmax < 160);
    }

    #[test]
    fn rir_is_deterministic() {
        let a = synth_rir(0.8, 1.0, 16000, 5).unwrap();
        let b = synth_rir(0.8, 1.0, 16000, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn longer_rt60_has_more_late_energy() {
        let late = |r: &RoomImpulseResponse| r.taps[3200..].iter().map(|v| v * v).sum::<f64>();
        let short = synth_rir(0.2, 0.9, 16000, 1).unwrap();
        let long = synth_rir(0.7, 0.9, 16000, 1).unwrap();
        assert!(late(&long) > late(&short));
    }

    #[test]
    fn rir_length_checked() {
        assert!(synth_rir(0.5, 0.4, 16000, 0).is_err());
        assert!(synth_rir(0.0, 0.4, 16000, 0).is_err());
    }

    #[test]
    fn convolution_identity_and_delay() {
        let s = white_noise(100, 16000, 1);
        let y = convolve(&s, &rir_from(vec![1.0])).unwrap();
        for (a, b) in y.samples.iter().zip(&s.samples) {
            assert!((a - b).abs() < 1e-12);
        }
        let d = convolve(&s, &rir_from(vec![0.0, 1.0])).unwrap();
        assert!(d.samples[0].abs() < 1e-12);
        for i in 1..100 {
            assert!((d.samples[i] - s.samples[i - 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let s = white_noise(1000, 16000, 7);
        let h = white_noise(64, 16000, 8);
        let y = convolve(&s, &rir_from(h.samples.clone())).unwrap();
        let want = direct(&s.samples, &h.samples);
        let err: f64 = y.samples.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let norm: f64 = want.iter().map(|b| b * b).sum::<f64>();
        assert!((err / norm).sqrt() < 1e-8);
    }

    #[test]
    fn convolution_rate_mismatch() {
        let s = Waveform::zeros(10, 8000);
        assert!(convolve(&s, &rir_from(vec![1.0])).is_err());
    }

    #[test]
    fn mix_hits_requested_snr() {
        let x = pseudo_speech(1.0, 16000, 3);
        let n = white_noise(16000, 16000, 4);
        for snr in [-5.0, 0.0, 20.0, 37.5] {
            let y = mix_at_snr(&x, &n, snr).unwrap();
            let resid: f64 = y
                .samples
                .iter()
                .zip(&x.samples)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let measured = 10.0 * (x.energy() / resid).log10();
            assert!((measured - snr).abs() < 1e-9, "{measured} vs {snr}");
        }
    }

    #[test]
    fn mix_unit_gain_at_zero_db() {
        let x = Waveform::new(vec![1.0, 0.0, 0.0], 16000).unwrap();
        let n = Waveform::new(vec![0.0, 1.0, 0.0, 5.0], 16000).unwrap();
        let y = mix_at_snr(&x, &n, 0.0).unwrap();
        assert_eq!(y.samples, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn mix_edge_cases() {
        let x = pseudo_speech(0.2, 16000, 3);
        let n = white_noise(3200, 16000, 4);
        assert_eq!(mix_at_snr(&x, &n, f64::INFINITY).unwrap(), x);
        assert!(mix_at_snr(&Waveform::zeros(3200, 16000), &n, 10.0).is_err());
        assert!(mix_at_snr(&x, &Waveform::zeros(3200, 16000), 10.0).is_err());
        assert!(mix_at_snr(&x, &white_noise(10, 16000, 1), 10.0).is_err());
    }

    #[test]
    fn dry_noiseless_example_is_identity() {
        let s = chirp(0.5, 16000, 1);
        let spec = MixtureSpec {
            rt60_s: 0.0,
            snr_db: None,
            noise_kind: NoiseKind::White,
            seed: 1,
        };
        let ex = make_example(&s, &spec).unwrap();
        for (a, b) in ex.noisy.samples.iter().zip(&s.samples) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn example_is_deterministic() {
        let s = pseudo_speech(1.0, 16000, 2);
        let spec = MixtureSpec {
            rt60_s: 0.4,
            snr_db: Some(20.0),
            noise_kind: NoiseKind::Pink,
            seed: 9,
        };
        assert_eq!(make_example(&s, &spec).unwrap(), make_example(&s, &spec).unwrap());
    }

    #[test]
    fn mixture_spec_validation() {
        let mut spec = MixtureSpec {
            rt60_s: 2.0,
            snr_db: Some(20.0),
            noise_kind: NoiseKind::White,
            seed: 0,
        };
        assert!(spec.validate().is_err());
        spec.rt60_s = 0.5;
        spec.snr_db = Some(f64::NAN);
        assert!(spec.validate().is_err());
        spec.noise_kind = NoiseKind::RecordedFile;
        spec.snr_db = Some(10.0);
        assert!(make_example(&chirp(0.1, 16000, 0), &spec).is_err());
    }

    #[test]
    fn pink_noise_tilts_down() {
        let n = pink_noise(1 << 14, 16000, 3);
        let spec = crate::stft::stft(&n, &crate::stft::StftConfig::default()).unwrap();
        let band = |lo: usize, hi: usize| -> f64 {
            (0..spec.n_frames)
                .flat_map(|l| (lo..hi).map(move |k| (l, k)))
                .map(|(l, k)| spec.at(l, k).norm_sqr())
                .sum::<f64>()
                / (hi - lo) as f64
        };
        assert!(band(4, 16) > 5.0 * band(128, 250));
    }
}
