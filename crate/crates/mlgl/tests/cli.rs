use std::path::Path;
use std::process::{Command, Output};

use mlgl::checkpoint::{Checkpoint, ModelMeta};
use mlgl::config::RunConfig;
use mlgl::data::default_taxonomy;
use mlgl::features::FeatureConfig;
use mlgl::wav::{self, AudioClip, Encoding};
use mlgl_core::{Mlgl, ModelConfig, SeededRng};
use serde_json::Value;

fn mlgl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlgl")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        channels: [4, 8, 8],
        ..ModelConfig::default()
    }
}

fn save_untrained(path: &Path, seed: u64) {
    let model = Mlgl::<f32>::new(small_model(), seed).unwrap();
    let meta = ModelMeta::new(small_model(), FeatureConfig::default(), &default_taxonomy());
    Checkpoint::from_model(&model, &meta, SeededRng::new(seed).state(), 0).save(path).unwrap();
}

fn tone(path: &Path, seconds: f64, sr: u32) {
    let n = (seconds * sr as f64) as usize;
    let s = (0..n)
        .map(|i| (0.3 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin()) as f32)
        .collect();
    wav::write(path, &AudioClip::mono(sr, s).unwrap(), Encoding::Pcm16).unwrap();
}

#[test]
fn usage_errors_exit_with_code_two() {
    for args in [&["frobnicate"][..], &["predict"], &["--level", "4", "param-count"]] {
        let out = mlgl(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&out)["error"], "usage");
    }
}

#[test]
fn runtime_errors_exit_with_code_one_and_a_kind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.mlgl");
    let out = mlgl(&["evaluate", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "io");

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nunknown_key = 3\n").unwrap();
    let out = mlgl(&["--config", cfg.to_str().unwrap(), "param-count"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "config");

    let junk = dir.path().join("junk.mlgl");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let clip = dir.path().join("a.wav");
    tone(&clip, 1.0, 8000);
    let out = mlgl(&["predict", "--checkpoint", junk.to_str().unwrap(), clip.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "format");
}

#[test]
fn param_count_reports_modules() {
    let v = stdout_json(&mlgl(&["param-count"]));
    let total = v["total"].as_u64().unwrap();
    assert!((3_500_000..=4_700_000).contains(&total));
    let modules = v["modules"].as_object().unwrap();
    assert_eq!(modules.values().map(|n| n.as_u64().unwrap()).sum::<u64>(), total);
    let concat = stdout_json(&mlgl(&["--fusion", "concat", "param-count"]));
    assert_eq!(concat["fusion"], "concat");
    assert!(concat["total"].as_u64().unwrap() > total);
}

#[test]
fn predict_reports_every_class_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.mlgl");
    save_untrained(&ck, 1);
    let clip = dir.path().join("a.wav");
    tone(&clip, 2.0, 16000);
    for level in ["1", "3"] {
        let v = stdout_json(&mlgl(&["--level", level, "predict", "--checkpoint", ck.to_str().unwrap(), clip.to_str().unwrap()]));
        assert_eq!(v["level"].as_u64().unwrap().to_string(), level);
        let fae = v["fae"].as_object().unwrap();
        assert_eq!(fae.len(), 24);
        assert!(fae.contains_key("Horn"));
        assert!(fae.values().all(|p| (0.0..=1.0).contains(&p.as_f64().unwrap())));
        assert_eq!(v["cae"].as_object().unwrap().len(), 7);
        assert!(v["ar"].as_f64().unwrap().is_finite());
        assert!(v["latency_seconds"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn features_csv_has_one_row_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("a.wav");
    tone(&clip, 1.0, 8000);
    let out = mlgl(&["features", clip.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 65);
    assert_eq!(header[64], "mel63");
    let frames = FeatureConfig::default().frame_count(8000, 8000).unwrap();
    assert_eq!(lines.count(), frames);
}

#[test]
fn untrained_model_is_at_chance_on_balanced_data() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    let mut cfg = RunConfig::default();
    cfg.set_seed(2);
    cfg.synth.n_clips = 400;
    cfg.synth.event_probability = 0.5;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let report = stdout_json(&mlgl(&["--config", config.to_str().unwrap(), "--out", synth.to_str().unwrap(), "synth-data"]));
    assert_eq!(report["clips"], 400);

    cfg.paths.labels = Some(synth.join("labels.csv"));
    cfg.paths.audio_dir = Some(synth.join("audio"));
    cfg.paths.taxonomy = Some(synth.join("taxonomy.toml"));
    cfg.paths.split = Some(synth.join("split.txt"));
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let ck = dir.path().join("m.mlgl");
    save_untrained(&ck, 4);
    let v = stdout_json(&mlgl(&["--config", config.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "evaluate", "--split", "train"]));
    for level in v["levels"].as_array().unwrap() {
        let auc = level["fae"]["auc"].as_f64().unwrap();
        assert!((auc - 0.5).abs() <= 0.07, "auc {auc}");
    }
}
