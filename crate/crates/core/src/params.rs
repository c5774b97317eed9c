//! Named storage for trainable parameters and non-trainable buffers.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    param_names: Vec<String>,
    params: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    index: BTreeMap<String, Slot>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            param_names: Vec::new(),
            params: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(alloc::format!(
                "duplicate tensor name {name}"
            )));
        }
        self.index.insert(name.to_string(), slot);
        Ok(())
    }

    /// Registers a trainable tensor; a gradient buffer is attached.
    pub fn add_param(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        let id = self.params.len();
        self.claim(name, Slot::Param(id))?;
        self.param_names.push(name.to_string());
        self.params.push(tensor.with_grad());
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<BufferId> {
        let id = self.buffers.len();
        self.claim(name, Slot::Buffer(id))?;
        self.buffer_names.push(name.to_string());
        let mut tensor = tensor;
        tensor.set_requires_grad(false);
        self.buffers.push(tensor);
        Ok(BufferId(id))
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.param_names[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.param_names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.param_names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter_mut())
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffer_names
            .iter()
            .map(String::as_str)
            .zip(self.buffers.iter())
    }

    /// Every tensor (parameters first, then buffers) in registration order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params().chain(self.buffers())
    }

    /// Mutable lookup by name across parameters and buffers.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match *self.index.get(name)? {
            Slot::Param(i) => Some(&mut self.params[i]),
            Slot::Buffer(i) => Some(&mut self.buffers[i]),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        match *self.index.get(name)? {
            Slot::Param(i) => Some(&self.params[i]),
            Slot::Buffer(i) => Some(&self.buffers[i]),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Adds freshly computed gradients into the parameters' grad buffers.
    pub fn accumulate(&mut self, grads: &crate::autodiff::Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            let name = &self.param_names[id.0];
            let p = &mut self.params[id.0];
            let buf = p
                .grad_mut()
                .ok_or_else(|| Error::MissingGrad(name.clone()))?;
            if buf.len() != g.len() {
                return Err(Error::shape("accumulate", &[buf.len()], &[g.len()]));
            }
            for (b, &x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
        Ok(())
    }

    /// Trainable scalar counts grouped by the first `depth` dot-separated name
    /// segments, in first-seen order.
    pub fn count_by_prefix(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.params() {
            let key: Vec<&str> = name.split('.').take(depth).collect();
            let key = key.join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += t.numel(),
                None => out.push((key, t.numel())),
            }
        }
        out
    }
}

/// Gain for layers followed by a rectifier: bound `√(6/fan_in)`.
pub const RELU_GAIN: f64 = core::f64::consts::SQRT_2;

/// Gain giving bound `1/√fan_in`, the usual default for linear layers.
pub const LINEAR_GAIN: f64 = 0.577_350_269_189_625_8;

/// Kaiming-uniform (fan-in) initialization: `U(−b, b)` with
/// `b = gain·√(3/fan_in)`.
pub fn kaiming_uniform<T: Real>(
    rng: &mut crate::rng::SeededRng,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
) -> Tensor<T> {
    let bound = gain * libm_sqrt(3.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.uniform_in(-bound, bound))).collect();
    Tensor::new(shape, data).expect("shape/numel agree")
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_across_kinds() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("a.w", Tensor::zeros([2])).unwrap();
        assert!(s.add_buffer("a.w", Tensor::zeros([2])).is_err());
        assert!(s.add_param("a.w", Tensor::zeros([2])).is_err());
        s.add_buffer("a.m", Tensor::zeros([2])).unwrap();
        assert!(s.get("a.m").unwrap().grad().is_none());
        assert!(s.get("a.w").unwrap().grad().is_some());
    }

    #[test]
    fn prefix_counts() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("x.a.w", Tensor::zeros([2, 3])).unwrap();
        s.add_param("x.b.w", Tensor::zeros([4])).unwrap();
        s.add_param("y.w", Tensor::zeros([5])).unwrap();
        assert_eq!(
            s.count_by_prefix(1),
            alloc::vec![("x".into(), 10), ("y".into(), 5)]
        );
        assert_eq!(s.trainable_count(), 15);
    }
}
