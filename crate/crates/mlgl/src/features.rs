//! Log-mel energies: framing, Hamming window, power spectrum, triangular
//! mel filterbank and natural log.

use std::fmt::Write as _;
use std::sync::Arc;

use mlgl_core::{Real, Tensor};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::wav::AudioClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MelScale {
    /// `m = 2595·log10(1 + f/700)`.
    #[default]
    Htk,
    /// Linear below 1 kHz, logarithmic above.
    Slaney,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    #[default]
    Mean,
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Resample to this rate first; `None` keeps the file's rate.
    pub sample_rate: Option<u32>,
    pub window_seconds: f64,
    /// Fraction of a window shared by neighbouring frames.
    pub overlap: f64,
    pub n_mels: usize,
    pub mel_scale: MelScale,
    pub channel_mode: ChannelMode,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: None,
            window_seconds: 0.046,
            overlap: 1.0 / 3.0,
            n_mels: 64,
            mel_scale: MelScale::Htk,
            channel_mode: ChannelMode::Mean,
            log_floor: 1e-10,
        }
    }
}

fn input_error<T>(message: String) -> Result<T> {
    Err(mlgl_core::Error::Input(message).into())
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_seconds > 0.0) || !(0.0..1.0).contains(&self.overlap) {
            return input_error("window must be positive and overlap in [0, 1)".into());
        }
        if self.n_mels == 0 || !(self.log_floor > 0.0) {
            return input_error("need at least one mel band and a positive log floor".into());
        }
        Ok(())
    }

    /// `round(window_seconds · sr)`.
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.window_seconds * sample_rate as f64).round().max(1.0) as usize
    }

    /// `window_len − floor(window_len · overlap)`.
    pub fn hop(&self, sample_rate: u32) -> usize {
        let w = self.window_len(sample_rate);
        (w - (w as f64 * self.overlap).floor() as usize).max(1)
    }

    /// Frames produced for `samples` samples at `sample_rate`.
    pub fn frame_count(&self, samples: usize, sample_rate: u32) -> Option<usize> {
        let w = self.window_len(sample_rate);
        (samples >= w).then(|| (samples - w) / self.hop(sample_rate) + 1)
    }

    /// Rate of the audio actually analysed.
    pub fn analysis_rate(&self, file_rate: u32) -> u32 {
        self.sample_rate.unwrap_or(file_rate)
    }

    /// Hex digest of every parameter that affects the output at `sample_rate`.
    pub fn fingerprint(&self, sample_rate: u32) -> String {
        let canonical = format!(
            "sr={sample_rate};win={};hop={};nfft={};mels={};scale={:?};channel={:?};floor={:e}",
            self.window_len(sample_rate),
            self.hop(sample_rate),
            self.window_len(sample_rate).next_power_of_two(),
            self.n_mels,
            self.mel_scale,
            self.channel_mode,
            self.log_floor,
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..16].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

pub fn hz_to_mel(f: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 2595.0 * (1.0 + f / 700.0).log10(),
        MelScale::Slaney => {
            if f < 1000.0 {
                3.0 * f / 200.0
            } else {
                15.0 + (f / 1000.0).ln() * 27.0 / 6.4f64.ln()
            }
        }
    }
}

pub fn mel_to_hz(m: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 700.0 * (10f64.powf(m / 2595.0) - 1.0),
        MelScale::Slaney => {
            if m < 15.0 {
                200.0 * m / 3.0
            } else {
                1000.0 * ((m - 15.0) * 6.4f64.ln() / 27.0).exp()
            }
        }
    }
}

/// `[n_mels][n_fft/2 + 1]` triangular filters with centres equally spaced
/// on the mel scale over `0..sr/2`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, scale: MelScale) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist, scale);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64, scale))
        .collect();
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    let up = (f - lo) / (centre - lo);
                    let down = (hi - f) / (hi - centre);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hamming window `0.54 − 0.46·cos(2πn/N)`.
pub fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// A `[frames, n_mels]` log-energy matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMel {
    pub frames: usize,
    pub n_mels: usize,
    /// Row-major, one row per frame.
    pub data: Vec<f64>,
    pub frame_rate: f64,
    pub fingerprint: String,
}

impl LogMel {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64([self.frames, self.n_mels], &self.data).expect("frames × mels")
    }
}

/// Reusable extractor for one sample rate.
pub struct Extractor {
    config: FeatureConfig,
    sample_rate: u32,
    window: Vec<f64>,
    hop: usize,
    filters: Vec<Vec<f64>>,
    /// First and last non-zero bin per filter.
    spans: Vec<(usize, usize)>,
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
    fingerprint: String,
}

impl Extractor {
    pub fn new(config: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        config.validate()?;
        if sample_rate == 0 {
            return input_error("sample rate must be positive".into());
        }
        let win = config.window_len(sample_rate);
        let n_fft = win.next_power_of_two();
        let filters = mel_filterbank(config.n_mels, n_fft, sample_rate, config.mel_scale);
        let spans = filters
            .iter()
            .map(|f| {
                let first = f.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = f.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                (first, last)
            })
            .collect();
        Ok(Extractor {
            window: hamming(win),
            hop: config.hop(sample_rate),
            filters,
            spans,
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            n_fft,
            fingerprint: config.fingerprint(sample_rate),
            config: config.clone(),
            sample_rate,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Log-mel of a mono signal at the extractor's rate.
    pub fn compute(&self, samples: &[f32]) -> Result<LogMel> {
        let win = self.window.len();
        let Some(frames) = self.config.frame_count(samples.len(), self.sample_rate) else {
            return input_error(format!(
                "clip of {} samples is shorter than one {win}-sample window",
                samples.len()
            ));
        };
        let n_mels = self.config.n_mels;
        let mut data = Vec::with_capacity(frames * n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; self.n_fft / 2 + 1];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < win {
                    Complex::new(samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (f, &(lo, hi)) in self.filters.iter().zip(&self.spans) {
                let e: f64 = (lo..=hi).map(|k| f[k] * power[k]).sum();
                data.push((e + self.config.log_floor).ln());
            }
        }
        Ok(LogMel {
            frames,
            n_mels,
            data,
            frame_rate: self.sample_rate as f64 / self.hop as f64,
            fingerprint: self.fingerprint.clone(),
        })
    }
}

/// Collapses a clip to one channel per `mode` (mono clips pass through).
pub fn downmix(clip: &AudioClip, mode: ChannelMode) -> Vec<f32> {
    match (clip.channels.len(), mode) {
        (1, _) | (_, ChannelMode::Left) => clip.channels[0].clone(),
        (_, ChannelMode::Right) => clip.channels[1].clone(),
        _ => clip.channels[0]
            .iter()
            .zip(&clip.channels[1])
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    }
}

/// Downmix, optional resampling, then [`Extractor::compute`].
pub fn log_mel(clip: &AudioClip, config: &FeatureConfig) -> Result<LogMel> {
    let clip = match config.sample_rate {
        Some(sr) if sr != clip.sample_rate => clip.resample(sr)?,
        _ => clip.clone(),
    };
    let mono = downmix(&clip, config.channel_mode);
    Extractor::new(config, clip.sample_rate)?.compute(&mono)
}
