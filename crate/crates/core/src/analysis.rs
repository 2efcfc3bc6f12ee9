//! Magnitude/phase swap experiment: recombine the magnitude of one signal
//! with the phase of another and score each combination against the clean
//! reference.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifest::Utterance;
use crate::metrics::{evaluate_pair, LpcFrameConfig, MetricsReport};
use crate::parallel::par_map;
use crate::report::Table;
use crate::stft::{decompose, istft, recombine, stft, StftConfig, Waveform, DEFAULT_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoisyMagNoisyPhase,
    NoisyMagCleanPhase,
    CleanMagNoisyPhase,
    CleanMagCleanPhase,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NoisyMagNoisyPhase,
        Variant::NoisyMagCleanPhase,
        Variant::CleanMagNoisyPhase,
        Variant::CleanMagCleanPhase,
    ];

    /// `(magnitude source, phase source)`.
    pub fn sources(self) -> (&'static str, &'static str) {
        match self {
            Variant::NoisyMagNoisyPhase => ("noisy", "noisy"),
            Variant::NoisyMagCleanPhase => ("noisy", "clean"),
            Variant::CleanMagNoisyPhase => ("clean", "noisy"),
            Variant::CleanMagCleanPhase => ("clean", "clean"),
        }
    }

    pub fn label(self) -> String {
        let (m, p) = self.sources();
        format!("{m} mag / {p} phase")
    }
}

/// Resynthesized signals for the three mixed-source combinations.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapVariants {
    pub noisy_mag_noisy_phase: Waveform,
    pub noisy_mag_clean_phase: Waveform,
    pub clean_mag_noisy_phase: Waveform,
}

pub fn swap_variants(clean: &Waveform, noisy: &Waveform, cfg: &StftConfig) -> Result<SwapVariants> {
    if clean.len() != noisy.len() || clean.sample_rate_hz != noisy.sample_rate_hz {
        return Err(Error::invalid(format!(
            "clean ({} samples @ {} Hz) and noisy ({} samples @ {} Hz) must match",
            clean.len(),
            clean.sample_rate_hz,
            noisy.len(),
            noisy.sample_rate_hz
        )));
    }
    let sr = clean.sample_rate_hz;
    let c = decompose(&stft(clean, cfg)?, DEFAULT_FLOOR)?;
    let n = decompose(&stft(noisy, cfg)?, DEFAULT_FLOOR)?;
    Ok(SwapVariants {
        noisy_mag_noisy_phase: istft(&recombine(&n, &n)?, sr)?,
        noisy_mag_clean_phase: istft(&recombine(&n, &c)?, sr)?,
        clean_mag_noisy_phase: istft(&recombine(&c, &n)?, sr)?,
    })
}

/// Scores of all four combinations for one utterance, in [`Variant::ALL`] order.
pub fn analyze_pair(
    clean: &Waveform,
    noisy: &Waveform,
    stft_cfg: &StftConfig,
    metric_cfg: &LpcFrameConfig,
) -> Result<[MetricsReport; 4]> {
    let len = clean.len().min(noisy.len());
    let clean = clean.truncated(len);
    let noisy = noisy.truncated(len);
    let v = swap_variants(&clean, &noisy, stft_cfg)?;
    let clean_rt = istft(&stft(&clean, stft_cfg)?, clean.sample_rate_hz)?;
    Ok([
        evaluate_pair(&clean, &v.noisy_mag_noisy_phase, metric_cfg)?,
        evaluate_pair(&clean, &v.noisy_mag_clean_phase, metric_cfg)?,
        evaluate_pair(&clean, &v.clean_mag_noisy_phase, metric_cfg)?,
        evaluate_pair(&clean, &clean_rt, metric_cfg)?,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1 {
    /// Mean report per variant, in [`Variant::ALL`] order.
    pub rows: Vec<(Variant, MetricsReport)>,
    pub n_utterances: usize,
}

impl Table1 {
    pub fn get(&self, v: Variant) -> &MetricsReport {
        &self.rows.iter().find(|(w, _)| *w == v).expect("all variants present").1
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(
            format!("Magnitude/phase combinations ({} utterances)", self.n_utterances),
            &["variant", "LLR", "CD", "SI-SDR", "fwSegSNR"],
        );
        for (v, r) in &self.rows {
            t.push(v.label(), vec![r.llr, r.cd, r.si_sdr_db, r.fw_snr_seg_db]);
        }
        t
    }
}

pub fn run_table1(
    utterances: &[Utterance],
    stft_cfg: &StftConfig,
    metric_cfg: &LpcFrameConfig,
    jobs: usize,
) -> Result<Table1> {
    if utterances.is_empty() {
        return Err(Error::invalid("analysis needs at least one utterance"));
    }
    let per_utt: Vec<[MetricsReport; 4]> = par_map(utterances, jobs, |_, u| {
        analyze_pair(&u.example.clean, &u.example.noisy, stft_cfg, metric_cfg)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let rows = Variant::ALL
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let reports: Vec<MetricsReport> = per_utt.iter().map(|r| r[i]).collect();
            (v, MetricsReport::mean(&reports).expect("non-empty"))
        })
        .collect();
    Ok(Table1 {
        rows,
        n_utterances: utterances.len(),
    })
}
