//! JSON-lines dataset manifests and synthetic corpus generation.
//!
//! Each line describes one utterance. When `noisy_path` is present the
//! mixture is read from disk; otherwise it is synthesized from the clean
//! file and the mixture parameters, so a manifest alone reproduces the data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{from_json, Error, Result};
use crate::parallel::par_map;
use crate::signal_model::{make_example_with_noise, synth_source, Example, MixtureSpec, NoiseKind, SourceKind};
use crate::stft::Waveform;
use crate::wav::{read_wav, write_wav, WavFormat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub clean_path: PathBuf,
    pub rt60_s: f64,
    /// `null` disables additive noise.
    pub snr_db: Option<f64>,
    pub noise_kind: NoiseKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reverb_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_path: Option<PathBuf>,
    /// Recording looped to length for `noise_kind = recorded-file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_path: Option<PathBuf>,
}

impl ManifestRecord {
    pub fn mixture(&self) -> MixtureSpec {
        MixtureSpec {
            rt60_s: self.rt60_s,
            snr_db: self.snr_db,
            noise_kind: self.noise_kind,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Relative paths in records resolve against this directory.
    pub base_dir: PathBuf,
}

/// One utterance with all three signal versions loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub example: Example,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), base_dir)
    }

    pub fn parse(text: &str, source: &str, base_dir: PathBuf) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = from_json(line, &format!("{source}:{}", i + 1))?;
            rec.mixture().validate().map_err(|e| Error::Config {
                path: format!("{source}:{}", i + 1),
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::invalid(format!("manifest {source} has no records")));
        }
        Ok(Self { records, base_dir })
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_record(&self, rec: &ManifestRecord) -> Result<Utterance> {
        let clean = read_wav(self.resolve(&rec.clean_path))?;
        let example = match &rec.noisy_path {
            Some(noisy) => {
                let noisy = read_wav(self.resolve(noisy))?;
                let reverberant = match &rec.reverb_path {
                    Some(p) => read_wav(self.resolve(p))?,
                    None => noisy.clone(),
                };
                Example {
                    clean,
                    reverberant,
                    noisy,
                }
            }
            None => {
                let recorded = rec
                    .noise_path
                    .as_ref()
                    .map(|p| read_wav(self.resolve(p)))
                    .transpose()?;
                make_example_with_noise(&clean, &rec.mixture(), recorded.as_ref())?
            }
        };
        if example.noisy.sample_rate_hz != example.clean.sample_rate_hz {
            return Err(Error::invalid(format!(
                "utterance {}: clean and noisy sample rates differ",
                rec.id
            )));
        }
        Ok(Utterance {
            id: rec.id.clone(),
            example,
        })
    }

    pub fn load_all(&self, jobs: usize) -> Result<Vec<Utterance>> {
        par_map(&self.records, jobs, |_, r| self.load_record(r))
            .into_iter()
            .collect()
    }
}

/// Parameters of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n: usize,
    pub duration_s: f64,
    /// RT60 values are spread linearly over `[rt60_min_s, rt60_max_s]`.
    pub rt60_min_s: f64,
    pub rt60_max_s: f64,
    pub snr_db: Option<f64>,
    pub noise_kind: NoiseKind,
    pub source: SourceKind,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n: 16,
            duration_s: 1.0,
            rt60_min_s: 0.5,
            rt60_max_s: 0.5,
            snr_db: Some(20.0),
            noise_kind: NoiseKind::White,
            source: SourceKind::PseudoSpeech,
            sample_rate_hz: 16000,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    /// Four one-second utterances, RT60 0.3 to 0.6 s, 20 dB white noise:
    /// the training set of the small-model smoke runs.
    pub fn desk() -> Self {
        Self {
            n: 4,
            rt60_min_s: 0.3,
            rt60_max_s: 0.6,
            ..Self::default()
        }
    }

    fn rt60(&self, i: usize) -> f64 {
        if self.n <= 1 {
            self.rt60_min_s
        } else {
            self.rt60_min_s + (self.rt60_max_s - self.rt60_min_s) * i as f64 / (self.n - 1) as f64
        }
    }

    fn utterance_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }
}

/// Generates the corpus in memory. Records point at the file layout used
/// by [`write_corpus`].
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Vec<(ManifestRecord, Example)>> {
    if spec.n == 0 {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    if spec.noise_kind == NoiseKind::RecordedFile {
        return Err(Error::invalid("synthetic corpora support white or pink noise only"));
    }
    if !(spec.duration_s > 0.0) || spec.rt60_min_s > spec.rt60_max_s {
        return Err(Error::invalid("invalid corpus duration or RT60 range"));
    }
    (0..spec.n)
        .map(|i| {
            let seed = spec.utterance_seed(i);
            let id = format!("utt{i:04}");
            let clean = synth_source(spec.source, spec.duration_s, spec.sample_rate_hz, seed);
            let rec = ManifestRecord {
                id: id.clone(),
                clean_path: PathBuf::from(format!("clean/{id}.wav")),
                rt60_s: spec.rt60(i),
                snr_db: spec.snr_db,
                noise_kind: spec.noise_kind,
                seed,
                reverb_path: Some(PathBuf::from(format!("reverb/{id}.wav"))),
                noisy_path: Some(PathBuf::from(format!("noisy/{id}.wav"))),
                noise_path: None,
            };
            let example = make_example_with_noise(&clean, &rec.mixture(), None)?;
            Ok((rec, example))
        })
        .collect()
}

/// Writes WAV triples plus `manifest.jsonl` under `dir`; returns the
/// manifest path.
pub fn write_corpus(dir: &Path, items: &[(ManifestRecord, Example)], format: WavFormat) -> Result<PathBuf> {
    for sub in ["clean", "reverb", "noisy"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = Manifest {
        records: Vec::with_capacity(items.len()),
        base_dir: dir.to_path_buf(),
    };
    for (rec, ex) in items {
        let pairs: [(&Option<PathBuf>, &Waveform); 2] =
            [(&rec.reverb_path, &ex.reverberant), (&rec.noisy_path, &ex.noisy)];
        write_wav(dir.join(&rec.clean_path), &ex.clean, format)?;
        for (p, w) in pairs {
            if let Some(p) = p {
                write_wav(dir.join(p), w, format)?;
            }
        }
        manifest.records.push(rec.clone());
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, manifest.to_jsonl()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// In-memory utterances for a corpus spec, without touching disk.
pub fn synth_utterances(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    Ok(synth_corpus(spec)?
        .into_iter()
        .map(|(r, example)| Utterance { id: r.id, example })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n: 3,
            duration_s: 0.3,
            rt60_min_s: 0.3,
            rt60_max_s: 0.7,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn rt60_spread_and_determinism() {
        let a = synth_corpus(&small()).unwrap();
        let b = synth_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let rts: Vec<f64> = a.iter().map(|(r, _)| r.rt60_s).collect();
        assert_eq!(rts, vec![0.3, 0.5, 0.7]);
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let items = synth_corpus(&small()).unwrap();
        let path = write_corpus(dir.path(), &items, WavFormat::Float32).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.records.len(), 3);
        let utts = m.load_all(2).unwrap();
        let f32ish = |w: &Waveform| w.samples.iter().map(|&v| v as f32 as f64).collect::<Vec<_>>();
        assert_eq!(utts[1].example.noisy.samples, f32ish(&items[1].1.noisy));
    }

    #[test]
    fn synthesizes_when_mixture_files_absent() {
        let dir = tempfile::tempdir().unwrap();
        let clean = synth_source(SourceKind::Chirp, 0.3, 16000, 1);
        write_wav(dir.path().join("c.wav"), &clean, WavFormat::Float32).unwrap();
        let text = r#"{"id":"a","clean_path":"c.wav","rt60_s":0.4,"snr_db":null,"noise_kind":"white","seed":3}"#;
        let m = Manifest::parse(text, "m", dir.path().to_path_buf()).unwrap();
        let u = m.load_record(&m.records[0]).unwrap();
        assert_eq!(u.example.noisy, u.example.reverberant);
        assert_ne!(u.example.noisy, u.example.clean);
    }

    #[test]
    fn schema_violations_name_the_field() {
        let bad = r#"{"id":"a","clean_path":"c.wav","rt60_s":"x","snr_db":null,"noise_kind":"white","seed":3}"#;
        let err = Manifest::parse(bad, "m.jsonl", PathBuf::new()).unwrap_err();
        assert_eq!(err.kind(), "ConfigError");
        assert!(err.to_string().contains("m.jsonl:1:rt60_s"), "{err}");
        let unknown = r#"{"id":"a","clean_path":"c","rt60_s":0.4,"snr_db":null,"noise_kind":"white","seed":3,"extra":1}"#;
        assert!(Manifest::parse(unknown, "m", PathBuf::new()).is_err());
        assert!(Manifest::parse("\n", "m", PathBuf::new()).is_err());
        let bad_rt = r#"{"id":"a","clean_path":"c","rt60_s":3.0,"snr_db":null,"noise_kind":"white","seed":3}"#;
        assert!(Manifest::parse(bad_rt, "m", PathBuf::new()).is_err());
    }
}
