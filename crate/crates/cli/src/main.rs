//! `derevb`: corpus synthesis, analysis, staged training, ablation,
//! enhancement and evaluation from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use derevb::analysis::run_table1;
use derevb::error::from_json;
use derevb::manifest::{synth_corpus, write_corpus, CorpusSpec, Manifest, Utterance};
use derevb::metrics::{evaluate_pair, LpcFrameConfig, MetricsReport};
use derevb::models::{enhance_stages, ModelBundle};
use derevb::parallel::{par_map, resolve_jobs};
use derevb::report::Table;
use derevb::signal_model::{NoiseKind, SourceKind};
use derevb::stft::StftConfig;
use derevb::training::{evaluate_bundle, initial_bundle, run_ablation, run_stage, Stage, TrainingConfig};
use derevb::wav::{read_wav, write_wav, WavFormat};
use derevb::{Error, Result};

#[derive(Parser)]
#[command(name = "derevb", version, about = "Two-stage magnitude/phase dereverberation workbench")]
struct Cli {
    /// Worker threads for per-utterance work (falls back to DEREVB_JOBS).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of clean/reverberant/noisy WAV triples.
    SynthData(SynthArgs),
    /// Magnitude/phase swap analysis of a manifest.
    Analyze(AnalyzeArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Fine-tune the four freeze combinations from a pre-trained bundle.
    Ablate(AblateArgs),
    /// Enhance one WAV file with a trained bundle.
    Enhance(EnhanceArgs),
    /// Score estimates (or a bundle's output) against clean references.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    White,
    Pink,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    PseudoSpeech,
    Chirp,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Float32,
    Pcm16,
}

impl From<FormatArg> for WavFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Float32 => WavFormat::Float32,
            FormatArg::Pcm16 => WavFormat::Pcm16,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    S2s,
    Ri2ri,
    Finetune,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::S2s => Stage::PretrainS2s,
            StageArg::Ri2ri => Stage::PretrainRi2ri,
            StageArg::Finetune => Stage::Finetune,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    /// Depth-2, 8-channel networks on 64-frame crops.
    Desk,
    /// Depth-4, 16-channel networks on 256-frame crops.
    Reference,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Utterance length in seconds.
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    /// Single RT60 for every utterance (overrides the range).
    #[arg(long)]
    rt60: Option<f64>,
    #[arg(long, default_value_t = 0.3)]
    rt60_min: f64,
    #[arg(long, default_value_t = 0.7)]
    rt60_max: f64,
    #[arg(long, default_value_t = 20.0)]
    snr: f64,
    /// Reverberation only, no additive noise.
    #[arg(long)]
    no_noise: bool,
    #[arg(long, value_enum, default_value_t = NoiseArg::White)]
    noise: NoiseArg,
    #[arg(long, value_enum, default_value_t = SourceArg::PseudoSpeech)]
    source: SourceArg,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Float32)]
    format: FormatArg,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSettings {
    /// JSON training config; keys override the preset, unknown keys fail.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Bundle to continue from; a fresh one is built from the config otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    settings: TrainSettings,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Pre-trained bundle shared by all four runs.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evaluation manifest; defaults to the training manifest.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    #[command(flatten)]
    settings: TrainSettings,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the magnitude-only (noisy-phase) estimate here.
    #[arg(long)]
    magnitude_only_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Float32)]
    format: FormatArg,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score this bundle's two-stage output.
    #[arg(long, conflicts_with = "estimates")]
    checkpoint: Option<PathBuf>,
    /// Directory of `{id}.wav` estimates; the noisy mixtures are scored
    /// when neither this nor a checkpoint is given.
    #[arg(long)]
    estimates: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("UsageError", &e.render().to_string(), None);
            return ExitCode::from(2);
        }
    };
    let jobs = resolve_jobs(cli.jobs);
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Analyze(a) => analyze(a, jobs),
        Command::Train(a) => train(a, jobs),
        Command::Ablate(a) => ablate(a, jobs),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate(a, jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let path = match &e {
                Error::Config { path, .. } | Error::Io { path, .. } | Error::Wav { path, .. } => Some(path.as_str()),
                _ => None,
            };
            report_error(e.kind(), &e.to_string(), path);
            ExitCode::FAILURE
        }
    }
}

fn report_error(kind: &str, message: &str, path: Option<&str>) {
    eprintln!("{}", json!({ "kind": kind, "message": message.trim_end(), "path": path }));
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_table(dir: &Path, stem: &str, table: &Table) -> Result<()> {
    write_file(&dir.join(format!("{stem}.txt")), table.to_text())?;
    write_file(&dir.join(format!("{stem}.csv")), table.to_csv())
}

fn load_utterances(manifest: &Path, jobs: usize) -> Result<Vec<Utterance>> {
    Manifest::load(manifest)?.load_all(jobs)
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let (rt60_min_s, rt60_max_s) = match a.rt60 {
        Some(r) => (r, r),
        None => (a.rt60_min, a.rt60_max),
    };
    let spec = CorpusSpec {
        n: a.n,
        duration_s: a.duration,
        rt60_min_s,
        rt60_max_s,
        snr_db: (!a.no_noise).then_some(a.snr),
        noise_kind: match a.noise {
            NoiseArg::White => NoiseKind::White,
            NoiseArg::Pink => NoiseKind::Pink,
        },
        source: match a.source {
            SourceArg::PseudoSpeech => SourceKind::PseudoSpeech,
            SourceArg::Chirp => SourceKind::Chirp,
        },
        sample_rate_hz: a.sample_rate,
        seed: a.seed,
    };
    let items = synth_corpus(&spec)?;
    create_dir(&a.out)?;
    write_corpus(&a.out, &items, a.format.into())?;
    write_file(&a.out.join("corpus.json"), serde_json::to_string_pretty(&spec)? + "\n")
}

fn analyze(a: AnalyzeArgs, jobs: usize) -> Result<()> {
    let utts = load_utterances(&a.manifest, jobs)?;
    let table = run_table1(&utts, &StftConfig::default(), &LpcFrameConfig::default(), jobs)?;
    write_table(&a.out, "table1", &table.to_table())
}

/// Preset for `stage`, overlaid with the user's JSON keys, then the seed.
fn resolve_config(stage: Stage, s: &TrainSettings) -> Result<TrainingConfig> {
    let preset = match s.preset {
        PresetArg::Desk => TrainingConfig::desk(stage),
        PresetArg::Reference => TrainingConfig::for_stage(stage),
    };
    let mut cfg = match &s.config {
        None => preset,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let source = path.display().to_string();
            let user: Value = from_json(&text, &source)?;
            let mut merged = serde_json::to_value(preset)?;
            overlay(&mut merged, user);
            from_json(&merged.to_string(), &source)?
        }
    };
    if cfg.stage != stage {
        return Err(Error::Config {
            path: "stage".into(),
            message: format!("config stage `{}` conflicts with --stage `{}`", cfg.stage.name(), stage.name()),
        });
    }
    if let Some(seed) = s.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn overlay(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn train(a: TrainArgs, jobs: usize) -> Result<()> {
    let cfg = resolve_config(a.stage.into(), &a.settings)?;
    let utts = load_utterances(&a.manifest, jobs)?;
    let bundle = match &a.checkpoint {
        Some(p) => ModelBundle::load(p)?,
        None => initial_bundle(&cfg)?,
    };
    create_dir(&a.out)?;
    write_file(&a.out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let outcome = run_stage(&cfg, bundle, &utts, Some(&a.out))?;
    let mut log = String::new();
    for rec in &outcome.log {
        log.push_str(&serde_json::to_string(rec)?);
        log.push('\n');
    }
    write_file(&a.out.join("train_log.jsonl"), log)?;
    outcome.bundle.save(a.out.join("model.ckpt"))
}

fn ablate(a: AblateArgs, jobs: usize) -> Result<()> {
    let cfg = resolve_config(Stage::Finetune, &a.settings)?;
    let pretrained = ModelBundle::load(&a.checkpoint)?;
    let train = load_utterances(&a.manifest, jobs)?;
    let eval = match &a.eval_manifest {
        Some(p) => load_utterances(p, jobs)?,
        None => train.clone(),
    };
    let ablation = run_ablation(&cfg, &pretrained, &train, &eval, &LpcFrameConfig::default(), jobs)?;
    write_table(&a.out, "ablation", &ablation.to_table())
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.checkpoint)?;
    let noisy = read_wav(&a.input)?;
    let e = enhance_stages(&noisy, &bundle)?;
    for (path, wave) in [(Some(&a.out), &e.enhanced), (a.magnitude_only_out.as_ref(), &e.s2s_noisy_phase)] {
        let Some(path) = path else { continue };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_wav(path, wave, a.format.into())?;
    }
    Ok(())
}

const METRIC_COLUMNS: [&str; 5] = ["utterance", "LLR", "CD", "SI-SDR", "fwSegSNR"];

fn metric_values(r: &MetricsReport) -> Vec<f64> {
    vec![r.llr, r.cd, r.si_sdr_db, r.fw_snr_seg_db]
}

fn evaluate(a: EvaluateArgs, jobs: usize) -> Result<()> {
    let utts = load_utterances(&a.manifest, jobs)?;
    let metric = LpcFrameConfig::default();
    let mut table = Table::new("Evaluation", &METRIC_COLUMNS);
    if let Some(ckpt) = &a.checkpoint {
        let bundle = ModelBundle::load(ckpt)?;
        let per_utt = par_map(&utts, jobs, |_, u| {
            let e = enhance_stages(&u.example.noisy, &bundle)?;
            evaluate_pair(&u.example.clean, &e.enhanced, &metric)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for (u, r) in utts.iter().zip(&per_utt) {
            table.push(u.id.clone(), metric_values(r));
        }
        let means = evaluate_bundle(&bundle, &utts, &metric, jobs)?;
        table.push("mean", metric_values(&means.two_stage));
        table.push("mean (S2S + noisy phase)", metric_values(&means.s2s_noisy_phase));
    } else {
        let per_utt = par_map(&utts, jobs, |_, u| {
            let est = match &a.estimates {
                Some(dir) => read_wav(dir.join(format!("{}.wav", u.id)))?,
                None => u.example.noisy.clone(),
            };
            evaluate_pair(&u.example.clean, &est, &metric)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for (u, r) in utts.iter().zip(&per_utt) {
            table.push(u.id.clone(), metric_values(r));
        }
        let mean = MetricsReport::mean(&per_utt).expect("manifest is non-empty");
        table.push("mean", metric_values(&mean));
    }
    write_table(&a.out, "evaluation", &table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_merges_nested_keys() {
        let mut base = json!({"lr": 1.0, "spec_augment": {"enabled": true, "max_width": 32}});
        overlay(&mut base, json!({"spec_augment": {"max_width": 8}, "steps": 3}));
        assert_eq!(
            base,
            json!({"lr": 1.0, "spec_augment": {"enabled": true, "max_width": 8}, "steps": 3})
        );
    }

    #[test]
    fn config_unknown_key_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"spec_augment": {"bogus": 1}}"#).unwrap();
        let s = TrainSettings {
            config: Some(p),
            preset: PresetArg::Desk,
            seed: None,
        };
        match resolve_config(Stage::PretrainS2s, &s).unwrap_err() {
            Error::Config { path, .. } => assert!(path.ends_with("spec_augment.bogus"), "{path}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn stage_conflict_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"stage": "finetune"}"#).unwrap();
        let s = TrainSettings {
            config: Some(p),
            preset: PresetArg::Desk,
            seed: Some(3),
        };
        assert!(matches!(resolve_config(Stage::PretrainS2s, &s), Err(Error::Config { .. })));
    }
}
