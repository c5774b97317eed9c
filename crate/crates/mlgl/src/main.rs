use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use mlgl::analysis::{
    event_ar_analysis, node_scores, shapiro_csv, spearman_csv, CorrelationMatrix, Scope,
};
use mlgl::checkpoint::Checkpoint;
use mlgl::config::RunConfig;
use mlgl::data::Part;
use mlgl::features::log_mel;
use mlgl::run::{dataset_of, examples_of, metrics_report, taxonomy_of, train_from_config};
use mlgl::synth::generate;
use mlgl::{wav, Error, Result};
use mlgl_core::graph::FusionMode;
use mlgl_core::train::{evaluate, predict_all};
use mlgl_core::Mlgl;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mlgl", version, about = "Multi-level graph audio event classifier and annoyance predictor")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Prediction level (1, 2 or 3).
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=3))]
    level: Option<u8>,
    #[arg(long, global = true)]
    fusion: Option<FusionMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset; writes checkpoints and a JSON-lines log.
    Train,
    /// Metrics of all three levels on a split.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Part,
    },
    /// Level predictions for one WAV file, with end-to-end latency.
    Predict { wav: PathBuf },
    /// Node correlation matrices and the event/annoyance rank analysis.
    Analyze,
    /// Log-mel spectrogram of one WAV file as CSV.
    Features { wav: PathBuf },
    /// Write a synthetic dataset directory.
    SynthData,
    /// Trainable parameters, in total and per module.
    ParamCount,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(ck) = &cli.checkpoint {
        cfg.paths.checkpoint = Some(ck.clone());
    }
    if let Some(f) = cli.fusion {
        cfg.model.fusion = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.out_dir.join(mlgl::run::BEST))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}

fn named(names: &[String], values: &[f64]) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> =
        names.iter().zip(values).map(|(n, v)| (n.clone(), json!(v))).collect();
    serde_json::Value::Object(map)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train => {
            let outcome = train_from_config(&cfg, |record| {
                eprintln!("{record}");
            })?;
            print!("{}", pretty(&serde_json::to_value(outcome).expect("outcome serializes")));
        }
        Command::Evaluate { split } => {
            let ck = Checkpoint::load(&checkpoint_path(&cfg))?;
            let (model, meta) = ck.to_model::<f32>()?;
            let dataset = dataset_of(&cfg)?;
            let data = examples_of(&dataset, *split, &meta.features)?;
            let e = evaluate(&model, &data, cfg.training.batch_size, &cfg.training.objective, cfg.training.threshold)?;
            let mut report = metrics_report(&e);
            report["split"] = json!(split.name());
            report["clips"] = json!(data.len());
            let body = pretty(&report);
            if cli.out.is_some() {
                write_file(&cfg.paths.out_dir.join("metrics.json"), &body)?;
            }
            print!("{body}");
        }
        Command::Predict { wav: path } => {
            let ck = Checkpoint::load(&checkpoint_path(&cfg))?;
            let (model, meta) = ck.to_model::<f32>()?;
            let taxonomy = meta.taxonomy.build()?;
            let level = cli.level.unwrap_or(3) as usize;
            let start = Instant::now();
            let clip = wav::read(path)?;
            let mel = log_mel(&clip, &meta.features)?;
            let x = mel.to_tensor::<f32>().reshape([1, 1, mel.frames, mel.n_mels])?;
            let preds = model.predict(&x)?;
            let latency = start.elapsed().as_secs_f64();
            let l = &preds.levels[level - 1];
            let report = json!({
                "file": path.display().to_string(),
                "level": level,
                "fae": named(taxonomy.fae_names(), &l.fae),
                "cae": named(taxonomy.cae_names(), &l.cae),
                "ar": l.ar[0],
                "latency_seconds": latency,
            });
            print!("{}", pretty(&report));
        }
        Command::Analyze => {
            let ck = Checkpoint::load(&checkpoint_path(&cfg))?;
            let (model, meta) = ck.to_model::<f32>()?;
            let taxonomy = meta.taxonomy.build()?;
            let dataset = dataset_of(&cfg)?;
            let data = examples_of(&dataset, cfg.analysis.split, &meta.features)?;
            let out = &cfg.paths.out_dir;
            let scopes: &[Scope] = match cli.level {
                Some(2) => &[Scope::Local],
                Some(3) => &[Scope::Global],
                Some(_) => return Err(Error::Config("analyze supports --level 2 (local) or 3 (global)".into())),
                None => &[Scope::Local, Scope::Global],
            };
            let mut written = Vec::new();
            for &scope in scopes {
                for scores in node_scores(&model, &taxonomy, &data, cfg.analysis.batch_size, scope, cfg.analysis.scalar)? {
                    let m = CorrelationMatrix::from_scores(&scores)?;
                    for (name, body) in [
                        (format!("node_scores_{}.csv", scores.name), scores.to_csv()),
                        (format!("correlation_{}.csv", m.name), m.to_csv()),
                        (format!("correlation_{}.svg", m.name), m.to_svg()),
                    ] {
                        write_file(&out.join(&name), &body)?;
                        written.push(name);
                    }
                }
            }
            let preds = predict_all(&model, &data, cfg.analysis.batch_size)?;
            let l3 = &preds.levels[2];
            let rows = event_ar_analysis(&taxonomy, &l3.fae, &l3.ar)?;
            write_file(&out.join("spearman.csv"), &spearman_csv(&rows))?;
            write_file(&out.join("shapiro_wilk.csv"), &shapiro_csv(&rows))?;
            written.extend(["spearman.csv".to_string(), "shapiro_wilk.csv".to_string()]);
            print!(
                "{}",
                pretty(&json!({ "clips": data.len(), "out_dir": out.display().to_string(), "files": written }))
            );
        }
        Command::Features { wav: path } => {
            let clip = wav::read(path)?;
            let mel = log_mel(&clip, &cfg.features)?;
            let mut body = String::from("frame");
            for k in 0..mel.n_mels {
                body.push_str(&format!(",mel{k}"));
            }
            body.push('\n');
            for t in 0..mel.frames {
                body.push_str(&t.to_string());
                for v in mel.row(t) {
                    body.push_str(&format!(",{v}"));
                }
                body.push('\n');
            }
            match &cli.out {
                Some(p) => write_file(p, &body)?,
                None => print!("{body}"),
            }
        }
        Command::SynthData => {
            let taxonomy = taxonomy_of(&cfg)?;
            let data = generate(&cfg.synth, &taxonomy)?;
            let dir = &cfg.paths.out_dir;
            let split = data.write(dir, cfg.seed)?;
            let report = json!({
                "out_dir": dir.display().to_string(),
                "clips": data.records.len(),
                "split": { "train": split.train.len(), "val": split.val.len(), "test": split.test.len() },
                "rule": data.rule,
            });
            print!("{}", pretty(&report));
        }
        Command::ParamCount => {
            let model = Mlgl::<f32>::new(cfg.model.clone(), cfg.seed)?;
            let modules: serde_json::Map<String, serde_json::Value> = model
                .store()
                .count_by_prefix(2)
                .into_iter()
                .map(|(k, n)| (k, json!(n)))
                .collect();
            let report = json!({
                "total": model.param_count(),
                "fusion": cfg.model.fusion.name(),
                "modules": modules,
            });
            print!("{}", pretty(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
