use alloc::vec::Vec;

use super::{Acc, Mode, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{split_axis, Tensor};

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape preserved")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&a| f(a)).collect()).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.map(x, |a| a * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |a| if a > T::zero() { a } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(alloc::format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = alloc::vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..n {
                    m = m.max(src[idx(k)]);
                }
                let mut total = T::zero();
                for k in 0..n {
                    let e = (src[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)` during
    /// training; evaluation (or `p == 0`) returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(alloc::format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let rng = match mode {
            Mode::Train(rng) if p > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(v.shape(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |s, &a| s + a);
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

pub(super) fn mul_backward<T: Real>(
    va: &Tensor<T>,
    vb: &Tensor<T>,
    a: Var,
    b: Var,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    acc.with(a, |buf| {
        for ((x, &d), &y) in buf.iter_mut().zip(g).zip(vb.data()) {
            *x += d * y;
        }
    });
    acc.with(b, |buf| {
        for ((x, &d), &y) in buf.iter_mut().zip(g).zip(va.data()) {
            *x += d * y;
        }
    });
}

pub(super) fn relu_backward<T: Real>(out: &Tensor<T>, x: Var, g: &[T], acc: &mut Acc<'_, T>) {
    acc.with(x, |buf| {
        for ((b, &d), &y) in buf.iter_mut().zip(g).zip(out.data()) {
            if y > T::zero() {
                *b += d;
            }
        }
    });
}

pub(super) fn sigmoid_backward<T: Real>(out: &Tensor<T>, x: Var, g: &[T], acc: &mut Acc<'_, T>) {
    acc.with(x, |buf| {
        for ((b, &d), &s) in buf.iter_mut().zip(g).zip(out.data()) {
            *b += d * s * (T::one() - s);
        }
    });
}

pub(super) fn softmax_backward<T: Real>(
    out: &Tensor<T>,
    x: Var,
    axis: usize,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let (outer, n, inner) = split_axis(out.shape(), axis);
    let s = out.data();
    acc.with(x, |buf| {
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let dot = (0..n).fold(T::zero(), |t, k| t + g[idx(k)] * s[idx(k)]);
                for k in 0..n {
                    buf[idx(k)] += s[idx(k)] * (g[idx(k)] - dot);
                }
            }
        }
    });
}
