//! Training driver and dataset preparation shared by the CLI and tests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mlgl_core::loss::LossValues;
use mlgl_core::train::{evaluate, Evaluation, Example, LevelMetrics, Trainer, TrainingConfig};
use mlgl_core::{Mlgl, Taxonomy};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{Checkpoint, ModelMeta};
use crate::config::RunConfig;
use crate::data::{default_taxonomy, featurize, load_dataset, load_taxonomy, Dataset, Part};
use crate::error::{Error, Result};

/// Best-validation checkpoint file name.
pub const BEST: &str = "best.mlgl";
/// Checkpoint written after every epoch.
pub const LAST: &str = "last.mlgl";
/// Line-delimited JSON training log.
pub const LOG: &str = "train.jsonl";

pub fn taxonomy_of(cfg: &RunConfig) -> Result<Taxonomy> {
    match &cfg.paths.taxonomy {
        Some(p) => load_taxonomy(p),
        None => Ok(default_taxonomy()),
    }
}

pub fn dataset_of(cfg: &RunConfig) -> Result<Dataset> {
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone().ok_or_else(|| Error::Config(format!("paths.{key} is required")))
    };
    let labels = need(&cfg.paths.labels, "labels")?;
    let audio = need(&cfg.paths.audio_dir, "audio_dir")?;
    load_dataset(
        &labels,
        &audio,
        taxonomy_of(cfg)?,
        cfg.paths.split.as_deref(),
        cfg.seed,
        cfg.aggregation,
    )
}

/// Featurizes one split of `dataset`.
pub fn examples_of(dataset: &Dataset, part: Part, features: &crate::features::FeatureConfig) -> Result<Vec<Example<f32>>> {
    featurize(dataset, &dataset.records_of(part), features)
}

/// Table-shaped metrics of one level.
pub fn level_report(level: usize, m: &LevelMetrics) -> Value {
    let class = |c: &mlgl_core::metrics::ClassificationMetrics| {
        json!({ "acc": c.acc, "f_score": c.f_score, "auc": c.auc })
    };
    json!({
        "level": level,
        "fae": class(&m.fae),
        "cae": class(&m.cae),
        "ar": { "mse": m.ar_mse, "mae": m.ar_mae, "r2": m.ar_r2 },
    })
}

/// Metrics of all three levels plus the nine losses.
pub fn metrics_report(e: &Evaluation) -> Value {
    json!({
        "levels": e.levels.iter().enumerate().map(|(i, m)| level_report(i + 1, m)).collect::<Vec<_>>(),
        "losses": losses_json(&e.losses),
    })
}

fn losses_json(l: &LossValues) -> Value {
    let mut map = serde_json::Map::new();
    for (i, v) in l.terms.iter().enumerate() {
        map.insert(format!("L{}", i + 1), json!(v));
    }
    map.insert("total".into(), json!(l.total));
    Value::Object(map)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub epochs: usize,
    pub steps: u64,
    pub best_epoch: Option<usize>,
    pub best: Option<Value>,
    pub final_loss: f64,
}

struct Log(BufWriter<File>, PathBuf);

impl Log {
    fn write(&mut self, mut record: Value) -> Result<()> {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        record["time"] = json!(stamp);
        writeln!(self.0, "{record}")
            .and_then(|_| self.0.flush())
            .map_err(|e| Error::io(&self.1, e))
    }
}

fn save(model: &Mlgl<f32>, meta: &ModelMeta, trainer_rng: mlgl_core::RngState, epoch: usize, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, meta, trainer_rng, epoch as u64).save(path)
}

/// Trains `model` on `train`, validating on `val` every
/// `config.report_every` epochs. Writes [`LOG`], [`LAST`] and [`BEST`] under
/// `out_dir`. On divergence the last good parameters stay in [`LAST`] and
/// the error is returned.
pub fn train_model(
    model: Mlgl<f32>,
    config: &TrainingConfig,
    meta: &ModelMeta,
    train: &[Example<f32>],
    val: &[Example<f32>],
    out_dir: &Path,
    mut progress: impl FnMut(&Value),
) -> Result<(Mlgl<f32>, TrainOutcome)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = Log(BufWriter::new(file), log_path);
    let mut trainer = Trainer::new(model, config.clone())?;
    save(trainer.model(), meta, trainer.rng_state(), 0, &out_dir.join(LAST))?;

    let mut best: Option<(usize, Evaluation)> = None;
    let mut final_loss = f64::NAN;
    for epoch in 1..=config.epochs {
        let summary = match trainer.train_epoch(train, |_, _| {}) {
            Ok(s) => s,
            Err(e @ mlgl_core::Error::Diverged { .. }) => {
                save(trainer.model(), meta, trainer.rng_state(), epoch - 1, &out_dir.join(LAST))?;
                log.write(json!({ "epoch": epoch, "diverged": e.to_string() }))?;
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        final_loss = summary.losses.total;
        let mut record = json!({
            "epoch": epoch,
            "steps": trainer.steps(),
            "losses": losses_json(&summary.losses),
        });
        let validate = !val.is_empty() && (epoch % config.report_every == 0 || epoch == config.epochs);
        if validate {
            let e = evaluate(trainer.model(), val, config.batch_size, &config.objective, config.threshold)?;
            record["val"] = metrics_report(&e);
            if best.as_ref().is_none_or(|(_, b)| e.better_than(b)) {
                save(trainer.model(), meta, trainer.rng_state(), epoch, &out_dir.join(BEST))?;
                record["best"] = json!(true);
                best = Some((epoch, e));
            }
        }
        save(trainer.model(), meta, trainer.rng_state(), epoch, &out_dir.join(LAST))?;
        progress(&record);
        log.write(record)?;
    }
    if best.is_none() {
        std::fs::copy(out_dir.join(LAST), out_dir.join(BEST)).map_err(|e| Error::io(out_dir.join(BEST), e))?;
    }
    let outcome = TrainOutcome {
        epochs: config.epochs,
        steps: trainer.steps(),
        best_epoch: best.as_ref().map(|(e, _)| *e),
        best: best.as_ref().map(|(_, e)| metrics_report(e)),
        final_loss,
    };
    Ok((trainer.into_model(), outcome))
}

/// Loads the dataset, featurizes train and validation clips and trains a
/// fresh model seeded from `cfg.seed`.
pub fn train_from_config(cfg: &RunConfig, progress: impl FnMut(&Value)) -> Result<TrainOutcome> {
    let dataset = dataset_of(cfg)?;
    let train = examples_of(&dataset, Part::Train, &cfg.features)?;
    let val = examples_of(&dataset, Part::Val, &cfg.features)?;
    let meta = ModelMeta::new(cfg.model.clone(), cfg.features.clone(), &dataset.taxonomy);
    let model = Mlgl::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let (_, outcome) = train_model(model, &cfg.training, &meta, &train, &val, &cfg.paths.out_dir, progress)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use mlgl_core::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_mels: 16,
            channels: [2, 3, 4],
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn driver_writes_log_and_checkpoints() {
        let tax = default_taxonomy();
        let data = generate(&SynthConfig { n_clips: 6, ..SynthConfig::default() }, &tax).unwrap();
        let feats = crate::features::FeatureConfig { n_mels: 16, ..Default::default() };
        let ex = data.examples::<f32>(&feats).unwrap();
        let meta = ModelMeta::new(tiny(), feats, &tax);
        let cfg = TrainingConfig { epochs: 2, batch_size: 3, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let model = Mlgl::<f32>::new(tiny(), 0).unwrap();
        let (trained, out) = train_model(model, &cfg, &meta, &ex[..4], &ex[4..], dir.path(), |_| {}).unwrap();
        assert_eq!(out.steps, 4);
        let log = std::fs::read_to_string(dir.path().join(LOG)).unwrap();
        let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        for l in &lines {
            assert!(l["losses"]["L9"].is_number());
            assert!(l["val"]["levels"][2]["ar"]["mse"].is_number());
        }
        let last = Checkpoint::load(&dir.path().join(LAST)).unwrap();
        let (restored, _) = last.to_model::<f32>().unwrap();
        assert_eq!(restored.store().named_tensors().count(), trained.store().named_tensors().count());
        for ((_, a), (_, b)) in restored.store().named_tensors().zip(trained.store().named_tensors()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(dir.path().join(BEST).is_file());
    }
}
