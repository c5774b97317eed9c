//! Synthetic datasets with a known event → annoyance relation.
//!
//! Every fine event class owns one primitive source at a class-specific
//! frequency: pure tones or resonator-filtered noise, steady or gated at a
//! class-specific rate. A clip mixes the sources of its events over a faint noise
//! floor and is normalised to a fixed RMS, so loudness does not leak the
//! event count. The annoyance rating is `clip(bias + Σ w_k y_k, 1, 10)`.

use std::path::Path;

use mlgl_core::labels::AR_RANGE;
use mlgl_core::train::Example;
use mlgl_core::{LabelSet, Real, SeededRng, Taxonomy};
use serde::{Deserialize, Serialize};

use crate::data::{labels_csv, taxonomy_toml, ClipRecord, Split};
use crate::features::{log_mel, FeatureConfig};
use crate::error::{Error, Result};
use crate::wav::{self, AudioClip, Encoding};

const TARGET_RMS: f32 = 0.1;
const NOISE_FLOOR: f32 = 0.003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArRule {
    pub bias: f64,
    /// One weight per fine event, in taxonomy order.
    pub weights: Vec<f64>,
}

impl ArRule {
    /// `bias` plus `+2` for class `up` and `−2` for class `down`.
    pub fn planted(n_fae: usize, up: usize, down: usize, bias: f64) -> Self {
        let mut weights = vec![0.0; n_fae];
        weights[up] = 2.0;
        weights[down] = -2.0;
        ArRule { bias, weights }
    }

    pub fn apply(&self, fae: &[bool]) -> f64 {
        let raw = self.bias
            + self
                .weights
                .iter()
                .zip(fae)
                .filter(|(_, &y)| y)
                .map(|(w, _)| w)
                .sum::<f64>();
        raw.clamp(AR_RANGE.0, AR_RANGE.1)
    }
}

impl Default for ArRule {
    fn default() -> Self {
        ArRule {
            bias: 5.0,
            weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_clips: usize,
    pub sample_rate: u32,
    pub duration: f64,
    /// Probability that each event is present in a clip.
    pub event_probability: f64,
    /// Empty weights mean the planted rule on `up`/`down` below.
    pub rule: ArRule,
    pub up: String,
    pub down: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_clips: 16,
            sample_rate: 8000,
            duration: 1.0,
            event_probability: 0.3,
            rule: ArRule::default(),
            up: "Horn".into(),
            down: "Rustling leaves".into(),
        }
    }
}

impl SynthConfig {
    /// The effective rule for `taxonomy`.
    pub fn resolve_rule(&self, taxonomy: &Taxonomy) -> Result<ArRule> {
        if !self.rule.weights.is_empty() {
            if self.rule.weights.len() != taxonomy.n_fae() {
                return Err(Error::Config(format!(
                    "AR rule has {} weights for {} events",
                    self.rule.weights.len(),
                    taxonomy.n_fae()
                )));
            }
            return Ok(self.rule.clone());
        }
        let find = |name: &str| {
            taxonomy
                .fae_names()
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Config(format!("unknown event {name:?} in synthetic rule")))
        };
        Ok(ArRule::planted(taxonomy.n_fae(), find(&self.up)?, find(&self.down)?, self.rule.bias))
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub taxonomy: Taxonomy,
    pub rule: ArRule,
    pub clips: Vec<AudioClip>,
    pub records: Vec<ClipRecord>,
}

/// Centre frequency of class `k` of `n`, log-spaced over `[150 Hz, 0.4·sr]`.
pub fn class_frequency(k: usize, n: usize, sample_rate: u32) -> f64 {
    let (lo, hi) = (150.0f64, 0.4 * sample_rate as f64);
    if n == 1 {
        return lo;
    }
    lo * (hi / lo).powf(k as f64 / (n - 1) as f64)
}

/// Gate periods in seconds by `k / 4`; `None` is a steady source.
const GATE_PERIODS: [Option<f64>; 6] = [None, Some(0.09), Some(0.15), Some(0.24), Some(0.38), Some(0.6)];
const GATE_RAMP: f64 = 0.005;

fn resonator(f: f64, r: f64, sr: u32, len: usize, rng: &mut SeededRng) -> Vec<f64> {
    let w = 2.0 * std::f64::consts::PI * f / sr as f64;
    let (a1, a2) = (2.0 * r * w.cos(), -r * r);
    let (mut y1, mut y2) = (0.0, 0.0);
    (0..len)
        .map(|_| {
            let y = rng.normal() + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

fn tone(f: f64, sr: u32, len: usize, rng: &mut SeededRng) -> Vec<f64> {
    let w = 2.0 * std::f64::consts::PI * f / sr as f64;
    let phase = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
    (0..len).map(|i| (w * i as f64 + phase).sin()).collect()
}

/// Square gate with linear ramps and a random phase.
fn gate(period: f64, sr: u32, len: usize, rng: &mut SeededRng) -> Vec<f64> {
    let offset = rng.uniform_in(0.0, period);
    let half = period / 2.0;
    (0..len)
        .map(|i| {
            let t = (i as f64 / sr as f64 + offset) % period;
            let edge = if t < half { t.min(half - t) } else { 0.0 };
            (edge / GATE_RAMP).min(1.0)
        })
        .collect()
}

/// The primitive source of class `k`, at unit RMS.
///
/// `k % 4` picks a pure tone, a tone pair a fifth apart, narrowband noise
/// or broadband noise at the class frequency; `k / 4` picks a gate.
fn source(k: usize, n_classes: usize, sr: u32, len: usize, rng: &mut SeededRng) -> Vec<f32> {
    let f = class_frequency(k, n_classes, sr);
    let mut out = match k % 4 {
        0 => tone(f, sr, len, rng),
        1 => {
            let upper = (1.5 * f).min(0.45 * sr as f64);
            let (a, b) = (tone(f, sr, len, rng), tone(upper, sr, len, rng));
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        }
        2 => resonator(f, 0.995, sr, len, rng),
        _ => resonator(f, 0.8, sr, len, rng),
    };
    if let Some(period) = GATE_PERIODS[(k / 4) % GATE_PERIODS.len()] {
        for (v, g) in out.iter_mut().zip(gate(period, sr, len, rng)) {
            *v *= g;
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt().max(1e-12);
    out.into_iter().map(|v| (v / rms) as f32).collect()
}

pub fn generate(config: &SynthConfig, taxonomy: &Taxonomy) -> Result<SynthDataset> {
    if config.n_clips == 0 {
        return Err(Error::Config("synthetic dataset needs at least one clip".into()));
    }
    if config.sample_rate == 0 || !(config.duration > 0.0) || !(0.0..=1.0).contains(&config.event_probability) {
        return Err(Error::Config("synthetic dataset needs a positive rate and duration and a probability in [0, 1]".into()));
    }
    let rule = config.resolve_rule(taxonomy)?;
    let n = taxonomy.n_fae();
    let len = (config.duration * config.sample_rate as f64).round() as usize;
    let mut rng = SeededRng::with_stream(config.seed, 0x5e);
    let mut clips = Vec::with_capacity(config.n_clips);
    let mut records = Vec::with_capacity(config.n_clips);
    for c in 0..config.n_clips {
        let fae: Vec<bool> = (0..n).map(|_| rng.bernoulli(config.event_probability)).collect();
        let mut mix: Vec<f32> = (0..len).map(|_| NOISE_FLOOR * rng.normal() as f32).collect();
        for k in (0..n).filter(|&k| fae[k]) {
            let gain = rng.uniform_in(0.5, 1.0) as f32;
            for (m, s) in mix.iter_mut().zip(source(k, n, config.sample_rate, len, &mut rng)) {
                *m += gain * s;
            }
        }
        let rms = (mix.iter().map(|v| v * v).sum::<f32>() / len as f32).sqrt().max(1e-12);
        let scale = TARGET_RMS / rms;
        mix.iter_mut().for_each(|v| *v = (*v * scale).clamp(-1.0, 1.0));
        let ar = rule.apply(&fae);
        records.push(ClipRecord {
            clip_id: format!("synth_{c:05}"),
            labels: LabelSet::new(taxonomy, fae, ar)?,
        });
        clips.push(AudioClip::mono(config.sample_rate, mix)?);
    }
    Ok(SynthDataset {
        taxonomy: taxonomy.clone(),
        rule,
        clips,
        records,
    })
}

impl SynthDataset {
    /// Featurizes the clips in memory, in record order.
    pub fn examples<T: Real>(&self, features: &FeatureConfig) -> Result<Vec<Example<T>>> {
        self.clips
            .iter()
            .zip(&self.records)
            .map(|(clip, r)| {
                Ok(Example {
                    features: log_mel(clip, features)?.to_tensor(),
                    labels: r.labels.clone(),
                })
            })
            .collect()
    }

    /// Writes `audio/<clip_id>.wav` (float32), `labels.csv`, `split.txt`,
    /// `taxonomy.toml` and `rule.json` under `dir`.
    pub fn write(&self, dir: &Path, split_seed: u64) -> Result<Split> {
        let audio = dir.join("audio");
        std::fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
        for (clip, r) in self.clips.iter().zip(&self.records) {
            wav::write(&audio.join(format!("{}.wav", r.clip_id)), clip, Encoding::Float32)?;
        }
        let ids: Vec<String> = self.records.iter().map(|r| r.clip_id.clone()).collect();
        let split = Split::seeded(&ids, split_seed);
        let files = [
            ("labels.csv", labels_csv(&self.records, &self.taxonomy)),
            ("split.txt", split.to_text()),
            ("taxonomy.toml", taxonomy_toml(&self.taxonomy)),
            ("rule.json", serde_json::to_string_pretty(&self.rule).expect("rule serializes") + "\n"),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_taxonomy;

    #[test]
    fn same_seed_same_data() {
        let t = default_taxonomy();
        let cfg = SynthConfig::default();
        let a = generate(&cfg, &t).unwrap();
        let b = generate(&cfg, &t).unwrap();
        assert_eq!(a.clips, b.clips);
        assert_eq!(a.records, b.records);
        let c = generate(&SynthConfig { seed: 8, ..cfg }, &t).unwrap();
        assert_ne!(a.clips, c.clips);
    }

    #[test]
    fn empty_clip_gets_the_bias() {
        let t = default_taxonomy();
        let cfg = SynthConfig {
            event_probability: 0.0,
            n_clips: 2,
            ..SynthConfig::default()
        };
        let d = generate(&cfg, &t).unwrap();
        for r in &d.records {
            assert!(r.labels.fae.iter().all(|&y| !y));
            assert!(r.labels.cae.iter().all(|&y| !y));
            assert_eq!(r.labels.ar, 5.0);
        }
    }

    #[test]
    fn stored_ratings_follow_the_rule() {
        let t = default_taxonomy();
        let d = generate(&SynthConfig { n_clips: 50, ..SynthConfig::default() }, &t).unwrap();
        let horn = t.fae_names().iter().position(|n| n == "Horn").unwrap();
        assert_eq!(d.rule.weights[horn], 2.0);
        for r in &d.records {
            assert_eq!(d.rule.apply(&r.labels.fae), r.labels.ar);
        }
    }

    #[test]
    fn clips_have_fixed_loudness() {
        let d = generate(&SynthConfig::default(), &default_taxonomy()).unwrap();
        for c in &d.clips {
            let s = &c.channels[0];
            let rms = (s.iter().map(|v| v * v).sum::<f32>() / s.len() as f32).sqrt();
            assert!((rms - TARGET_RMS).abs() < 1e-3);
        }
    }
}
