//! Short-time Fourier analysis/synthesis and the magnitude/phase split.
//!
//! Frames are laid out row-major as `frames × bins`. Only the one-sided
//! spectrum (`frame_len / 2 + 1` bins) is stored; synthesis restores the
//! conjugate-symmetric half before the inverse transform.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Magnitude floor applied before taking the logarithm.
pub const DEFAULT_FLOOR: f64 = 1e-7;

/// Overlap-add normalizer values below this are treated as uncovered samples.
pub const NORMALIZER_EPS: f64 = 1e-8;

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn zeros(len: usize, sample_rate_hz: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Copy truncated to at most `len` samples.
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Analysis window. All windows are periodic (DFT-even).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hamming,
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let phase = 2.0 * PI * i as f64 / n;
                match self {
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop_len: usize,
    pub window: Window,
    pub n_bins: usize,
}

impl Default for StftConfig {
    /// 512-sample Hamming frames with 50% overlap, 257 bins.
    fn default() -> Self {
        Self::new(512, 256, Window::Hamming)
    }
}

impl StftConfig {
    pub fn new(frame_len: usize, hop_len: usize, window: Window) -> Self {
        Self {
            frame_len,
            hop_len,
            window,
            n_bins: frame_len / 2 + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 {
            return Err(Error::invalid("frame_len must be positive"));
        }
        if self.hop_len == 0 || self.hop_len > self.frame_len {
            return Err(Error::invalid(format!(
                "hop_len {} must satisfy 0 < hop_len <= frame_len {}",
                self.hop_len, self.frame_len
            )));
        }
        if self.n_bins != self.frame_len / 2 + 1 {
            return Err(Error::invalid(format!(
                "n_bins {} must equal frame_len/2 + 1 = {}",
                self.n_bins,
                self.frame_len / 2 + 1
            )));
        }
        Ok(())
    }

    /// Frame count for a signal of `len` samples, final partial frame included.
    pub fn n_frames(&self, len: usize) -> usize {
        let rest = len.saturating_sub(self.frame_len);
        1 + rest.div_ceil(self.hop_len)
    }

    /// Length of the overlap-add buffer spanned by `n_frames` frames.
    pub fn span(&self, n_frames: usize) -> usize {
        (n_frames.max(1) - 1) * self.hop_len + self.frame_len
    }

    /// Sum of squared synthesis windows over `n_frames` frames.
    pub fn overlap_normalizer(&self, n_frames: usize) -> Vec<f64> {
        let win = self.window.coefficients(self.frame_len);
        let mut norm = vec![0.0; self.span(n_frames)];
        for l in 0..n_frames {
            let start = l * self.hop_len;
            for (dst, w) in norm[start..start + self.frame_len].iter_mut().zip(&win) {
                *dst += w * w;
            }
        }
        norm
    }
}

/// Complex one-sided STFT, `n_frames × config.n_bins`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<Complex64>,
    pub n_frames: usize,
    pub config: StftConfig,
    pub source_len: usize,
}

impl Spectrogram {
    pub fn new(
        values: Vec<Complex64>,
        n_frames: usize,
        config: StftConfig,
        source_len: usize,
    ) -> Result<Self> {
        config.validate()?;
        if n_frames == 0 {
            return Err(Error::invalid("spectrogram needs at least one frame"));
        }
        if values.len() != n_frames * config.n_bins {
            return Err(Error::shape(format!(
                "{} values for {} frames x {} bins",
                values.len(),
                n_frames,
                config.n_bins
            )));
        }
        if source_len > config.span(n_frames) {
            return Err(Error::invalid(format!(
                "source_len {source_len} exceeds the {} samples spanned by {n_frames} frames",
                config.span(n_frames)
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid("non-finite spectrogram entry"));
        }
        Ok(Self {
            values,
            n_frames,
            config,
            source_len,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.config.n_bins
    }

    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.values[frame * self.config.n_bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[Complex64] {
        let k = self.config.n_bins;
        &self.values[frame * k..(frame + 1) * k]
    }
}

/// Log-magnitude and wrapped phase planes, `n_frames × n_bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagPhase {
    pub log_mag: Vec<f64>,
    pub phase: Vec<f64>,
    pub n_frames: usize,
    pub config: StftConfig,
    pub source_len: usize,
}

impl MagPhase {
    pub fn n_bins(&self) -> usize {
        self.config.n_bins
    }

    fn check_compatible(&self, other: &MagPhase) -> Result<()> {
        if self.n_frames != other.n_frames
            || self.config != other.config
            || self.source_len != other.source_len
        {
            return Err(Error::shape(format!(
                "magnitude source is {}x{} (len {}), phase source is {}x{} (len {})",
                self.n_frames,
                self.n_bins(),
                self.source_len,
                other.n_frames,
                other.n_bins(),
                other.source_len
            )));
        }
        Ok(())
    }
}

/// Forward STFT. The last partial frame is zero-padded.
pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if wave.is_empty() {
        return Err(Error::invalid("cannot transform an empty waveform"));
    }
    let n = cfg.frame_len;
    let n_frames = cfg.n_frames(wave.len());
    let win = cfg.window.coefficients(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = Vec::with_capacity(n_frames * cfg.n_bins);
    for l in 0..n_frames {
        let start = l * cfg.hop_len;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = wave.samples.get(start + i).copied().unwrap_or(0.0);
            *slot = Complex64::new(s * win[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        values.extend_from_slice(&buf[..cfg.n_bins]);
    }
    Ok(Spectrogram {
        values,
        n_frames,
        config: *cfg,
        source_len: wave.len(),
    })
}

/// Weighted overlap-add inverse with window-squared normalization.
pub fn istft(spec: &Spectrogram, sample_rate_hz: u32) -> Result<Waveform> {
    let cfg = spec.config;
    let n = cfg.frame_len;
    let k = cfg.n_bins;
    let win = cfg.window.coefficients(n);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = vec![0.0; cfg.span(spec.n_frames)];
    for l in 0..spec.n_frames {
        let frame = spec.frame(l);
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < k { frame[i] } else { frame[n - i].conj() };
        }
        // DC and Nyquist must be real for a real frame.
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = l * cfg.hop_len;
        for i in 0..n {
            out[start + i] += buf[i].re / n as f64 * win[i];
        }
    }
    let norm = cfg.overlap_normalizer(spec.n_frames);
    let covered = norm[..spec.source_len]
        .iter()
        .filter(|&&v| v >= NORMALIZER_EPS)
        .count();
    if covered == 0 && spec.source_len > 0 {
        return Err(Error::Numerical(
            "overlap-add normalizer vanishes over the whole signal".into(),
        ));
    }
    let samples = out[..spec.source_len]
        .iter()
        .zip(&norm)
        .map(|(v, w)| if *w >= NORMALIZER_EPS { v / w } else { 0.0 })
        .collect();
    Waveform::new(samples, sample_rate_hz)
}

/// Wrap an angle into (-π, π].
pub fn wrap_phase(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Split into floored natural-log magnitude and wrapped phase.
pub fn decompose(spec: &Spectrogram, floor_eps: f64) -> Result<MagPhase> {
    if !(floor_eps > 0.0 && floor_eps.is_finite()) {
        return Err(Error::invalid(format!(
            "magnitude floor must be positive, got {floor_eps}"
        )));
    }
    let mut log_mag = Vec::with_capacity(spec.values.len());
    let mut phase = Vec::with_capacity(spec.values.len());
    for v in &spec.values {
        log_mag.push(v.norm().max(floor_eps).ln());
        phase.push(if *v == Complex64::new(0.0, 0.0) {
            0.0
        } else {
            let p = v.arg();
            if p <= -PI {
                PI
            } else {
                p
            }
        });
    }
    Ok(MagPhase {
        log_mag,
        phase,
        n_frames: spec.n_frames,
        config: spec.config,
        source_len: spec.source_len,
    })
}

/// Magnitude from `mag_src`, phase from `phase_src`.
pub fn recombine(mag_src: &MagPhase, phase_src: &MagPhase) -> Result<Spectrogram> {
    mag_src.check_compatible(phase_src)?;
    let values = mag_src
        .log_mag
        .iter()
        .zip(&phase_src.phase)
        .map(|(m, p)| Complex64::from_polar(m.exp(), *p))
        .collect();
    Spectrogram::new(
        values,
        mag_src.n_frames,
        mag_src.config,
        mag_src.source_len,
    )
}

/// Real/imaginary planes as a `frames × bins × 2` tensor.
pub fn mag_phase_to_ri(mp: &MagPhase) -> Tensor {
    let mut data = Vec::with_capacity(mp.log_mag.len() * 2);
    for (m, p) in mp.log_mag.iter().zip(&mp.phase) {
        let mag = m.exp();
        data.push(mag * p.cos());
        data.push(mag * p.sin());
    }
    Tensor::from_vec(vec![mp.n_frames, mp.n_bins(), 2], data)
        .expect("shape matches by construction")
}

/// Inverse of [`mag_phase_to_ri`]; magnitudes are floored at `floor_eps`.
pub fn ri_to_mag_phase(
    ri: &Tensor,
    config: StftConfig,
    source_len: usize,
    floor_eps: f64,
) -> Result<MagPhase> {
    let spec = ri_to_spectrogram(ri, config, source_len)?;
    decompose(&spec, floor_eps)
}

pub fn spectrogram_to_ri(spec: &Spectrogram) -> Tensor {
    let data = spec.values.iter().flat_map(|v| [v.re, v.im]).collect();
    Tensor::from_vec(vec![spec.n_frames, spec.n_bins(), 2], data)
        .expect("shape matches by construction")
}

pub fn ri_to_spectrogram(ri: &Tensor, config: StftConfig, source_len: usize) -> Result<Spectrogram> {
    let shape = ri.shape();
    if shape.len() != 3 || shape[1] != config.n_bins || shape[2] != 2 {
        return Err(Error::shape(format!(
            "expected frames x {} x 2 RI tensor, got {:?}",
            config.n_bins, shape
        )));
    }
    let values = ri
        .data()
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect();
    Spectrogram::new(values, shape[0], config, source_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16000).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn dc_concentrates_in_bin_zero() {
        let cfg = StftConfig::default();
        let spec = stft(&Waveform::new(vec![1.0; 512], 16000).unwrap(), &cfg).unwrap();
        assert_eq!(spec.n_frames, 1);
        let wsum: f64 = Window::Hamming.coefficients(512).iter().sum();
        assert!((spec.at(0, 0).re - wsum).abs() < 1e-9);
        // Periodic Hamming leaks into bin 1 only through its cosine term.
        assert!((spec.at(0, 1).re + 0.23 * 512.0).abs() < 1e-9);
        for k in 2..257 {
            assert!(spec.at(0, k).norm() < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn zeros_give_three_frames() {
        let spec = stft(&Waveform::zeros(1024, 16000), &StftConfig::default()).unwrap();
        assert_eq!(spec.n_frames, 3);
        assert!(spec.values.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn frame_count_rule() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_frames(1), 1);
        assert_eq!(cfg.n_frames(512), 1);
        assert_eq!(cfg.n_frames(513), 2);
        assert_eq!(cfg.n_frames(768), 2);
        assert_eq!(cfg.n_frames(769), 3);
    }

    #[test]
    fn empty_waveform_rejected() {
        let err = stft(&Waveform::zeros(0, 16000), &StftConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = StftConfig::default();
        cfg.hop_len = 600;
        assert!(cfg.validate().is_err());
        let mut cfg = StftConfig::default();
        cfg.n_bins = 256;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn non_finite_samples_rejected() {
        assert!(Waveform::new(vec![0.0, f64::NAN], 16000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn sine_round_trip() {
        let samples = (0..16000)
            .map(|t| (2.0 * PI * 440.0 * t as f64 / 16000.0).sin())
            .collect();
        let w = Waveform::new(samples, 16000).unwrap();
        let back = istft(&stft(&w, &StftConfig::default()).unwrap(), 16000).unwrap();
        assert_eq!(back.len(), w.len());
        assert!(rel_err(&back.samples, &w.samples) < 1e-6);
    }

    #[test]
    fn noise_round_trip() {
        let w = noise(16000, 3);
        let back = istft(&stft(&w, &StftConfig::default()).unwrap(), 16000).unwrap();
        assert!(rel_err(&back.samples, &w.samples) < 1e-6);
    }

    #[test]
    fn zero_spectrogram_inverts_to_zero() {
        let cfg = StftConfig::default();
        let spec = Spectrogram::new(vec![Complex64::new(0.0, 0.0); 4 * 257], 4, cfg, 1000).unwrap();
        let w = istft(&spec, 16000).unwrap();
        assert_eq!(w.len(), 1000);
        assert!(w.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hann_edges_are_zeroed_not_divided() {
        let cfg = StftConfig::new(512, 256, Window::Hann);
        let w = noise(2048, 5);
        let spec = stft(&w, &cfg).unwrap();
        let back = istft(&spec, 16000).unwrap();
        let norm = cfg.overlap_normalizer(spec.n_frames);
        let uncovered: Vec<usize> = (0..w.len()).filter(|&i| norm[i] < NORMALIZER_EPS).collect();
        assert!(uncovered.contains(&0));
        for &i in &uncovered {
            assert_eq!(back.samples[i], 0.0);
        }
        let (got, want): (Vec<f64>, Vec<f64>) = (0..w.len())
            .filter(|&i| norm[i] >= NORMALIZER_EPS)
            .map(|i| (back.samples[i], w.samples[i]))
            .unzip();
        assert!(rel_err(&got, &want) < 1e-6);
    }

    #[test]
    fn decompose_examples() {
        let cfg = StftConfig::new(4, 2, Window::Rectangular);
        let vals = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, -2.0),
        ];
        let spec = Spectrogram::new(vals, 1, cfg, 4).unwrap();
        let mp = decompose(&spec, 1e-7).unwrap();
        assert_eq!(mp.log_mag[0], 0.0);
        assert_eq!(mp.phase[0], 0.0);
        assert!((mp.log_mag[1] - 1e-7f64.ln()).abs() < 1e-15);
        assert_eq!(mp.phase[1], 0.0);
        assert!((mp.log_mag[2] - 2f64.ln()).abs() < 1e-15);
        assert!((mp.phase[2] + PI / 2.0).abs() < 1e-15);
        assert!(decompose(&spec, 0.0).is_err());
    }

    #[test]
    fn negative_real_axis_maps_to_plus_pi() {
        let cfg = StftConfig::new(2, 1, Window::Rectangular);
        let spec = Spectrogram::new(
            vec![Complex64::new(-1.0, -0.0), Complex64::new(-1.0, 0.0)],
            1,
            cfg,
            2,
        )
        .unwrap();
        let mp = decompose(&spec, 1e-7).unwrap();
        assert_eq!(mp.phase, vec![PI, PI]);
    }

    #[test]
    fn recombine_identity_and_mismatch() {
        let w = noise(3000, 9);
        let spec = stft(&w, &StftConfig::default()).unwrap();
        let mp = decompose(&spec, DEFAULT_FLOOR).unwrap();
        let again = recombine(&mp, &mp).unwrap();
        for (a, b) in again.values.iter().zip(&spec.values) {
            assert!((a - b).norm() <= 1e-12 * (1.0 + b.norm()));
        }
        let back = istft(&again, 16000).unwrap();
        assert!(rel_err(&back.samples, &w.samples) < 1e-6);

        let other = decompose(&stft(&noise(5000, 1), &StftConfig::default()).unwrap(), 1e-7).unwrap();
        assert!(matches!(recombine(&mp, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn ri_examples() {
        let cfg = StftConfig::new(2, 1, Window::Rectangular);
        let mp = MagPhase {
            log_mag: vec![0.0, 2f64.ln()],
            phase: vec![0.0, PI / 2.0],
            n_frames: 1,
            config: cfg,
            source_len: 2,
        };
        let ri = mag_phase_to_ri(&mp);
        assert_eq!(ri.shape(), &[1, 2, 2]);
        let d = ri.data();
        assert_eq!((d[0], d[1]), (1.0, 0.0));
        assert!(d[2].abs() < 1e-12 && (d[3] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn wrap_phase_range() {
        for a in [-7.0, -PI, -1.0, 0.0, PI, 4.0, 100.0] {
            let w = wrap_phase(a);
            assert!(w > -PI && w <= PI);
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }
}
