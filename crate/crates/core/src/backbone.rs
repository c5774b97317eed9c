//! Three-block VGG-like CNN turning a log-mel spectrogram into a feature
//! vector. The model holds one independent backbone per semantic branch.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{BatchNormRunning, ConvSpec, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, BufferId, RELU_GAIN, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// How the final feature map is reduced to a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Pooling {
    /// Mean over time and frequency.
    #[default]
    GlobalAverage,
    /// Mean over frequency, then max plus mean over time.
    TimeMeanMax,
}

/// conv3×3 (padding 1, no bias) → batch norm → relu → 2×2 max pool.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl ConvBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let fan_in = c_in * 9;
        Ok(ConvBlock {
            weight: store.add_param(
                &format!("{prefix}.conv.weight"),
                kaiming_uniform(rng, &[c_out, c_in, 3, 3], fan_in, RELU_GAIN),
            )?,
            gamma: store.add_param(&format!("{prefix}.bn.gamma"), Tensor::full([c_out], T::one()))?,
            beta: store.add_param(&format!("{prefix}.bn.beta"), Tensor::zeros([c_out]))?,
            running_mean: store.add_buffer(&format!("{prefix}.bn.running_mean"), Tensor::zeros([c_out]))?,
            running_var: store
                .add_buffer(&format!("{prefix}.bn.running_var"), Tensor::full([c_out], T::one()))?,
        })
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: &Mode<'_>,
        bn_eps: f64,
    ) -> Result<Var> {
        let spec = ConvSpec { stride: 1, padding: 1 };
        let running = BatchNormRunning {
            mean: store.buffer(self.running_mean).data(),
            var: store.buffer(self.running_var).data(),
            ids: Some((self.running_mean, self.running_var)),
        };
        if tape.is_inference() && !mode.is_training() {
            let (g, b) = (store.param(self.gamma).data(), store.param(self.beta).data());
            return tape.conv_bn_relu_pool_eval(x, store.param(self.weight), spec, g, b, running, bn_eps, 2);
        }
        let w = tape.param(store, self.weight);
        let y = tape.conv2d(x, w, None, spec)?;
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let y = tape.batch_norm(y, gamma, beta, running, mode.is_training(), bn_eps)?;
        let y = tape.relu(y);
        tape.max_pool2d(y, 2)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<ConvBlock>,
    pooling: Pooling,
    out_dim: usize,
}

impl Backbone {
    /// Minimum frame (and mel-band) count surviving three 2× poolings.
    pub const MIN_FRAMES: usize = 8;

    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        channels: [usize; 3],
        pooling: Pooling,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(3);
        let mut c_in = 1;
        for (i, &c_out) in channels.iter().enumerate() {
            blocks.push(ConvBlock::new(store, rng, &format!("{prefix}.block{i}"), c_in, c_out)?);
            c_in = c_out;
        }
        Ok(Backbone {
            blocks,
            pooling,
            out_dim: channels[2],
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `x: [N, 1, frames, mels]` → `[N, out_dim]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: &Mode<'_>,
        bn_eps: f64,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [_, 1, frames, mels] = shape[..] else {
            return Err(Error::Contract(format!(
                "backbone input must be [N, 1, frames, mels], got {shape:?}"
            )));
        };
        if frames < Self::MIN_FRAMES || mels < Self::MIN_FRAMES {
            return Err(Error::Input(format!(
                "spectrogram of {frames}x{mels} is too short: at least {} frames and bands are needed",
                Self::MIN_FRAMES
            )));
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, store, h, mode, bn_eps)?;
        }
        match self.pooling {
            Pooling::GlobalAverage => tape.global_avg_pool(h),
            Pooling::TimeMeanMax => {
                let over_freq = tape.mean_axis(h, 3)?;
                let peak = tape.max_axis(over_freq, 2)?;
                let mean = tape.mean_axis(over_freq, 2)?;
                tape.add(peak, mean)
            }
        }
    }
}
