//! Objective quality measures: SI-SDR, LPC cepstral distance, LPC
//! log-likelihood ratio and frequency-weighted segmental SNR.
//!
//! The three frame-based measures share one framing: Hamming-windowed
//! frames that lie entirely inside the signal, kept only when the raw
//! reference frame energy is within `energy_gate_db` of the loudest one.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::{Waveform, Window};

/// Bounds applied to SI-SDR values, in dB.
pub const SI_SDR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpcFrameConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub lpc_order: usize,
    /// Frames quieter than the loudest reference frame by more than this
    /// many dB are excluded.
    pub energy_gate_db: f64,
    pub cd_max: f64,
    /// Fraction of the lowest per-frame LLR values kept in the mean.
    pub llr_keep_fraction: f64,
    pub fw_bands: usize,
    pub fw_weight_exponent: f64,
    pub fw_min_db: f64,
    pub fw_max_db: f64,
}

impl Default for LpcFrameConfig {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 256,
            lpc_order: 16,
            energy_gate_db: -40.0,
            cd_max: 10.0,
            llr_keep_fraction: 0.95,
            fw_bands: 25,
            fw_weight_exponent: 0.2,
            fw_min_db: -10.0,
            fw_max_db: 35.0,
        }
    }
}

impl LpcFrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.frame_len == 0 {
            return Err(Error::invalid("frame_len and hop must be positive"));
        }
        if self.lpc_order == 0 || self.lpc_order >= self.frame_len {
            return Err(Error::invalid(format!(
                "lpc_order {} must be in 1..frame_len",
                self.lpc_order
            )));
        }
        if !self.energy_gate_db.is_finite() {
            return Err(Error::invalid("energy gate must be finite"));
        }
        if !(self.llr_keep_fraction > 0.0 && self.llr_keep_fraction <= 1.0) {
            return Err(Error::invalid("llr_keep_fraction must be in (0, 1]"));
        }
        if self.fw_bands == 0 || self.fw_min_db >= self.fw_max_db {
            return Err(Error::invalid("invalid fwSegSNR band/clip settings"));
        }
        Ok(())
    }
}

/// Mean of a frame-based measure with bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub value: f64,
    pub scored: usize,
    /// Gated frames dropped because an LPC fit was unstable.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub si_sdr_db: f64,
    pub cd: f64,
    pub llr: f64,
    pub fw_snr_seg_db: f64,
    pub n_frames_scored: usize,
    pub n_frames_skipped: usize,
}

impl MetricsReport {
    /// Element-wise mean over reports (frame counts are summed).
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            si_sdr_db: avg(|r| r.si_sdr_db),
            cd: avg(|r| r.cd),
            llr: avg(|r| r.llr),
            fw_snr_seg_db: avg(|r| r.fw_snr_seg_db),
            n_frames_scored: reports.iter().map(|r| r.n_frames_scored).sum(),
            n_frames_skipped: reports.iter().map(|r| r.n_frames_skipped).sum(),
        })
    }
}

/// Scale-invariant SDR in dB, bounded to ±[`SI_SDR_CAP_DB`].
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::invalid(format!(
            "SI-SDR needs equal non-empty lengths, got {} and {}",
            reference.len(),
            estimate.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if ref_energy <= 0.0 {
        return Err(Error::invalid("SI-SDR reference is all zeros"));
    }
    let dot: f64 = reference.iter().zip(estimate).map(|(r, e)| r * e).sum();
    let alpha = dot / ref_energy;
    let target: f64 = alpha * alpha * ref_energy;
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| (alpha * r - e).powi(2))
        .sum();
    if target <= 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    if residual <= 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Start indices of full frames and the subset passing the energy gate.
fn gated_frames(reference: &[f64], cfg: &LpcFrameConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if reference.len() < cfg.frame_len {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one {}-sample frame",
            reference.len(),
            cfg.frame_len
        )));
    }
    let n = 1 + (reference.len() - cfg.frame_len) / cfg.hop;
    let energies: Vec<f64> = (0..n)
        .map(|i| {
            reference[i * cfg.hop..i * cfg.hop + cfg.frame_len]
                .iter()
                .map(|v| v * v)
                .sum()
        })
        .collect();
    let peak = energies.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::invalid("reference is silent; no frame passes the gate"));
    }
    let floor = peak * 10f64.powf(cfg.energy_gate_db / 10.0);
    let kept: Vec<usize> = (0..n)
        .filter(|&i| energies[i] > 0.0 && energies[i] >= floor)
        .map(|i| i * cfg.hop)
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid("no frame passes the energy gate"));
    }
    Ok(kept)
}

fn windowed(x: &[f64], start: usize, win: &[f64]) -> Vec<f64> {
    x[start..start + win.len()]
        .iter()
        .zip(win)
        .map(|(a, w)| a * w)
        .collect()
}

/// Biased autocorrelation `r[0..=order]`.
pub fn autocorrelation(frame: &[f64], order: usize) -> Vec<f64> {
    (0..=order)
        .map(|lag| {
            frame[lag..]
                .iter()
                .zip(frame)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// Levinson-Durbin recursion. Returns the prediction-error filter
/// `[1, a1, .., ap]` (so `e[n] = x[n] + Σ a_k x[n-k]`), or `None` when the
/// fit is degenerate or unstable.
pub fn levinson(r: &[f64]) -> Option<Vec<f64>> {
    let p = r.len() - 1;
    if !(r[0] > 0.0) {
        return None;
    }
    let mut a = vec![0.0; p + 1];
    a[0] = 1.0;
    let mut err = r[0];
    for i in 1..=p {
        let acc: f64 = (0..i).map(|j| a[j] * r[i - j]).sum();
        let k = -acc / err;
        if !(k.abs() < 1.0) {
            return None;
        }
        let prev = a.clone();
        for j in 1..i {
            a[j] = prev[j] + k * prev[i - j];
        }
        a[i] = k;
        err *= 1.0 - k * k;
        if !(err > 0.0) {
            return None;
        }
    }
    Some(a)
}

/// Cepstrum `c[1..=n]` of the all-pole model `1 / A(z)`.
pub fn lpc_cepstrum(a: &[f64], n: usize) -> Vec<f64> {
    let p = a.len() - 1;
    let coef = |m: usize| if m <= p { a[m] } else { 0.0 };
    let mut c = vec![0.0; n + 1];
    for m in 1..=n {
        let mut acc = -coef(m);
        for k in 1..m {
            acc -= (k as f64 / m as f64) * c[k] * coef(m - k);
        }
        c[m] = acc;
    }
    c.remove(0);
    c
}

fn lpc_of(frame: &[f64], order: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let r = autocorrelation(frame, order);
    levinson(&r).map(|a| (a, r))
}

fn check_pair(reference: &[f64], estimate: &[f64]) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "reference has {} samples, estimate has {}",
            reference.len(),
            estimate.len()
        )));
    }
    Ok(())
}

pub fn cepstral_distance(reference: &[f64], estimate: &[f64], cfg: &LpcFrameConfig) -> Result<FrameScore> {
    check_pair(reference, estimate)?;
    let frames = gated_frames(reference, cfg)?;
    let win = Window::Hamming.coefficients(cfg.frame_len);
    let scale = 10.0 / 10f64.ln();
    let mut values = Vec::with_capacity(frames.len());
    let mut skipped = 0;
    for &start in &frames {
        let fit_ref = lpc_of(&windowed(reference, start, &win), cfg.lpc_order);
        let fit_est = lpc_of(&windowed(estimate, start, &win), cfg.lpc_order);
        let (Some((a_ref, _)), Some((a_est, _))) = (fit_ref, fit_est) else {
            skipped += 1;
            continue;
        };
        let c_ref = lpc_cepstrum(&a_ref, cfg.lpc_order);
        let c_est = lpc_cepstrum(&a_est, cfg.lpc_order);
        let sq: f64 = c_ref.iter().zip(&c_est).map(|(x, y)| (x - y).powi(2)).sum();
        values.push((scale * (2.0 * sq).sqrt()).clamp(0.0, cfg.cd_max));
    }
    finish(values, skipped, 1.0)
}

fn quadratic_form(a: &[f64], r: &[f64]) -> f64 {
    let p = a.len();
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..p {
            total += a[i] * r[i.abs_diff(j)] * a[j];
        }
    }
    total
}

pub fn llr(reference: &[f64], estimate: &[f64], cfg: &LpcFrameConfig) -> Result<FrameScore> {
    check_pair(reference, estimate)?;
    let frames = gated_frames(reference, cfg)?;
    let win = Window::Hamming.coefficients(cfg.frame_len);
    let mut values = Vec::with_capacity(frames.len());
    let mut skipped = 0;
    for &start in &frames {
        let fit_ref = lpc_of(&windowed(reference, start, &win), cfg.lpc_order);
        let fit_est = lpc_of(&windowed(estimate, start, &win), cfg.lpc_order);
        let (Some((a_ref, r_ref)), Some((a_est, _))) = (fit_ref, fit_est) else {
            skipped += 1;
            continue;
        };
        let num = quadratic_form(&a_est, &r_ref);
        let den = quadratic_form(&a_ref, &r_ref);
        values.push((num / den).ln().max(0.0));
    }
    finish(values, skipped, cfg.llr_keep_fraction)
}

/// Mean of the smallest `keep` fraction of `values`.
fn finish(mut values: Vec<f64>, skipped: usize, keep: f64) -> Result<FrameScore> {
    if values.is_empty() {
        return Err(Error::invalid(format!(
            "no frame could be scored ({skipped} unstable LPC frames)"
        )));
    }
    let scored = values.len();
    let n_keep = if keep >= 1.0 {
        scored
    } else {
        values.sort_by(f64::total_cmp);
        ((keep * scored as f64).round() as usize).clamp(1, scored)
    };
    let value = values[..n_keep].iter().sum::<f64>() / n_keep as f64;
    Ok(FrameScore {
        value,
        scored,
        skipped,
    })
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_bands × n_bins`, spanning 0 Hz to Nyquist.
pub fn mel_filterbank(n_bands: usize, frame_len: usize, sample_rate_hz: u32) -> Vec<Vec<f64>> {
    let n_bins = frame_len / 2 + 1;
    let nyquist = sample_rate_hz as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_bands + 1) as f64))
        .collect();
    (0..n_bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate_hz as f64 / frame_len as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Weighted band SNR of one frame from band magnitudes. Each band SNR is
/// clipped to `[fw_min_db, fw_max_db]`; weights are `ref^exponent`.
/// `None` when every weight is zero.
pub fn fw_snr_frame(ref_bands: &[f64], est_bands: &[f64], cfg: &LpcFrameConfig) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&r, &e) in ref_bands.iter().zip(est_bands) {
        let w = r.abs().powf(cfg.fw_weight_exponent);
        let diff = r - e;
        let snr = if r == 0.0 {
            cfg.fw_min_db
        } else if diff == 0.0 {
            cfg.fw_max_db
        } else {
            (10.0 * (r * r / (diff * diff)).log10()).clamp(cfg.fw_min_db, cfg.fw_max_db)
        };
        num += w * snr;
        den += w;
    }
    (den > 0.0).then(|| (num / den).clamp(cfg.fw_min_db, cfg.fw_max_db))
}

pub fn fw_seg_snr(
    reference: &[f64],
    estimate: &[f64],
    sample_rate_hz: u32,
    cfg: &LpcFrameConfig,
) -> Result<FrameScore> {
    check_pair(reference, estimate)?;
    let frames = gated_frames(reference, cfg)?;
    let win = Window::Hamming.coefficients(cfg.frame_len);
    let bank = mel_filterbank(cfg.fw_bands, cfg.frame_len, sample_rate_hz);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.frame_len);
    let n_bins = cfg.frame_len / 2 + 1;
    let spectrum = |x: &[f64], start: usize| -> Vec<f64> {
        let mut buf: Vec<Complex64> = windowed(x, start, &win)
            .into_iter()
            .map(|v| Complex64::new(v, 0.0))
            .collect();
        fft.process(&mut buf);
        buf[..n_bins].iter().map(|c| c.norm()).collect()
    };
    let bands = |mag: &[f64]| -> Vec<f64> {
        bank.iter()
            .map(|tri| tri.iter().zip(mag).map(|(w, m)| w * m).sum())
            .collect()
    };
    let mut values = Vec::with_capacity(frames.len());
    let mut skipped = 0;
    for &start in &frames {
        let rb = bands(&spectrum(reference, start));
        let eb = bands(&spectrum(estimate, start));
        match fw_snr_frame(&rb, &eb, cfg) {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    finish(values, skipped, 1.0)
}

/// All four measures; lengths are equalized by truncating to the shorter.
pub fn evaluate_pair(reference: &Waveform, estimate: &Waveform, cfg: &LpcFrameConfig) -> Result<MetricsReport> {
    if reference.sample_rate_hz != estimate.sample_rate_hz {
        return Err(Error::invalid(format!(
            "reference at {} Hz, estimate at {} Hz",
            reference.sample_rate_hz, estimate.sample_rate_hz
        )));
    }
    let n = reference.len().min(estimate.len());
    let (r, e) = (&reference.samples[..n], &estimate.samples[..n]);
    let cd = cepstral_distance(r, e, cfg)?;
    let llr = llr(r, e, cfg)?;
    let fw = fw_seg_snr(r, e, reference.sample_rate_hz, cfg)?;
    Ok(MetricsReport {
        si_sdr_db: si_sdr(r, e)?,
        cd: cd.value,
        llr: llr.value,
        fw_snr_seg_db: fw.value,
        n_frames_scored: cd.scored,
        n_frames_skipped: cd.skipped.max(llr.skipped),
    })
}
