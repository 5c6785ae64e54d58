//! Golden-file checks: fixed seeds must keep producing byte-identical
//! archives across code changes. Set OCLAB_REGEN_FIXTURES=1 to rewrite the
//! fixtures after an intentional format or generator change.

use oclab_core::data::{base_task, shifted_task, synth_dataset, ShiftKind, Split, TaskParams};
use oclab_core::model::{AugmentConfig, Checkpoint, ModelConfig};
use oclab_core::selftrain::NgramLm;
use std::path::{Path, PathBuf};

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn check_or_regen(name: &str, bytes: &[u8]) {
    let path = fixture_dir().join(name);
    if std::env::var("OCLAB_REGEN_FIXTURES").is_ok() {
        std::fs::create_dir_all(fixture_dir()).unwrap();
        std::fs::write(&path, bytes).unwrap();
        return;
    }
    let golden = std::fs::read(&path)
        .unwrap_or_else(|e| panic!("missing fixture {name} ({e}); regenerate with OCLAB_REGEN_FIXTURES=1"));
    assert_eq!(
        golden, bytes,
        "{name} drifted from the golden fixture; if intentional, regenerate with OCLAB_REGEN_FIXTURES=1"
    );
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        enc_hidden: 6,
        enc_blocks: 1,
        dec_hidden: 6,
        vocab_size: 8,
        dropout: 0.1,
        ctc_weight: 0.3,
        augment: AugmentConfig::default(),
    }
}

#[test]
fn dataset_archive_is_stable() {
    let params = TaskParams {
        n_symbols: 5,
        feature_dim: 4,
        noise_sigma: 0.15,
        frames_per_token: 3,
        frame_jitter: 1,
        min_tokens: 2,
        max_tokens: 5,
    };
    let base = base_task("base", &params, 42);
    let shifted = shifted_task(&base, "shifted", ShiftKind::Both, 0.5, 43);

    let tmp = tempfile::tempdir().unwrap();
    for (spec, name) in [(&base, "base.ds"), (&shifted, "shifted.ds")] {
        let ds = synth_dataset(spec, Split::Test, 3, 7).unwrap();
        let path = tmp.path().join(name);
        ds.save(&path).unwrap();
        check_or_regen(name, &std::fs::read(&path).unwrap());
    }
}

#[test]
fn checkpoint_archive_is_stable() {
    let ckpt = Checkpoint::random(&tiny_model(), 9).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("tiny.ckpt");
    ckpt.save(&path).unwrap();
    check_or_regen("tiny.ckpt", &std::fs::read(&path).unwrap());
}

#[test]
fn language_model_file_is_stable() {
    let corpus = vec![vec![3, 4, 5], vec![3, 3], vec![5, 4, 3, 4], vec![4]];
    let lm = NgramLm::train(2, 0.5, &[3, 4, 5], &corpus).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("lm.txt");
    lm.save(&path).unwrap();
    check_or_regen("lm.txt", &std::fs::read(&path).unwrap());
}

#[test]
fn reloaded_archives_match_their_sources() {
    let params = TaskParams {
        n_symbols: 5,
        feature_dim: 4,
        noise_sigma: 0.15,
        frames_per_token: 3,
        frame_jitter: 1,
        min_tokens: 2,
        max_tokens: 5,
    };
    let spec = base_task("base", &params, 42);
    let ds = synth_dataset(&spec, Split::Test, 3, 7).unwrap();
    let tmp = tempfile::tempdir().unwrap();

    let dpath = tmp.path().join("roundtrip.ds");
    ds.save(&dpath).unwrap();
    let loaded = oclab_core::data::Dataset::load(&dpath).unwrap();
    assert_eq!(loaded.utterances.len(), ds.utterances.len());
    for (a, b) in ds.utterances.iter().zip(&loaded.utterances) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.features.data(), b.features.data());
    }

    let ckpt = Checkpoint::random(&tiny_model(), 9).unwrap();
    let cpath = tmp.path().join("roundtrip.ckpt");
    ckpt.save(&cpath).unwrap();
    let cback = Checkpoint::load(&cpath).unwrap();
    for (a, b) in ckpt.segments.iter().zip(&cback.segments) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.values, b.values);
    }
}
