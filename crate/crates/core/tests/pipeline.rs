use derevb::analysis::{run_table1, Variant};
use derevb::autodiff::Precision;
use derevb::manifest::{synth_corpus, synth_utterances, write_corpus, CorpusSpec, Manifest};
use derevb::metrics::{si_sdr, LpcFrameConfig};
use derevb::models::{enhance_stages, BundleConfig, ModelBundle};
use derevb::stft::StftConfig;
use derevb::wav::WavFormat;

fn small(n: usize) -> CorpusSpec {
    CorpusSpec {
        n,
        duration_s: 0.5,
        rt60_min_s: 0.3,
        rt60_max_s: 0.7,
        ..CorpusSpec::default()
    }
}

#[test]
fn written_corpus_reloads_within_float32_precision() {
    let dir = tempfile::tempdir().unwrap();
    let items = synth_corpus(&small(3)).unwrap();
    let path = write_corpus(dir.path(), &items, WavFormat::Float32).unwrap();
    let loaded = Manifest::load(&path).unwrap().load_all(2).unwrap();
    assert_eq!(loaded.len(), 3);
    for (u, (rec, ex)) in loaded.iter().zip(&items) {
        assert_eq!(u.id, rec.id);
        for (a, b) in [(&u.example.clean, &ex.clean), (&u.example.noisy, &ex.noisy), (&u.example.reverberant, &ex.reverberant)] {
            assert_eq!(a.len(), b.len());
            let worst = a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-6, "{worst}");
        }
    }
}

#[test]
fn manifest_without_mixture_paths_resynthesizes_the_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let items = synth_corpus(&small(2)).unwrap();
    let path = write_corpus(dir.path(), &items, WavFormat::Float32).unwrap();
    let mut m = Manifest::load(&path).unwrap();
    for r in &mut m.records {
        r.noisy_path = None;
        r.reverb_path = None;
    }
    let from_disk = m.load_all(1).unwrap();
    let fresh = Manifest::load(&path).unwrap().load_all(1).unwrap();
    for (a, b) in from_disk.iter().zip(&fresh) {
        assert_eq!(a.example.clean, b.example.clean);
        let s = si_sdr(&b.example.noisy.samples, &a.example.noisy.samples).unwrap();
        assert!(s > 60.0, "{s}");
    }
}

#[test]
fn magnitude_measures_track_magnitude_and_si_sdr_tracks_phase() {
    let utts = synth_utterances(&small(8)).unwrap();
    let t = run_table1(&utts, &StftConfig::default(), &LpcFrameConfig::default(), 2).unwrap();
    let base = t.get(Variant::NoisyMagNoisyPhase);
    let clean_mag = t.get(Variant::CleanMagNoisyPhase);
    let clean_phase = t.get(Variant::NoisyMagCleanPhase);
    assert!(clean_mag.cd < base.cd && clean_mag.llr < base.llr);
    assert!(clean_phase.si_sdr_db > base.si_sdr_db + 5.0);
    assert_eq!(t.get(Variant::CleanMagCleanPhase).si_sdr_db, 100.0);
}

#[test]
fn saved_bundle_enhances_identically() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = ModelBundle::new(BundleConfig::desk(), Precision::F32, 3).unwrap();
    let p = dir.path().join("b.ckpt");
    bundle.save(&p).unwrap();
    let back = ModelBundle::load(&p).unwrap();
    let noisy = &synth_utterances(&small(1)).unwrap()[0].example.noisy;
    let a = enhance_stages(noisy, &bundle).unwrap();
    let b = enhance_stages(noisy, &back).unwrap();
    assert_eq!(a.enhanced, b.enhanced);
    assert_eq!(a.s2s_noisy_phase, b.s2s_noisy_phase);
    assert_eq!(a.enhanced.len(), noisy.len());
}

#[test]
fn identity_bundle_passes_the_mixture_through() {
    let bundle = ModelBundle::identity(BundleConfig::desk(), Precision::F64).unwrap();
    let noisy = &synth_utterances(&small(1)).unwrap()[0].example.noisy;
    let e = enhance_stages(noisy, &bundle).unwrap();
    assert!(si_sdr(&noisy.samples, &e.enhanced.samples).unwrap() > 40.0);
    assert!(si_sdr(&noisy.samples, &e.s2s_noisy_phase.samples).unwrap() > 40.0);
}
