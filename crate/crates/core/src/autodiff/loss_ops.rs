use alloc::vec::Vec;

use super::{Acc, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    /// Mean binary cross-entropy of probabilities `p` against targets `y`,
    /// with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce_mean(&mut self, p: Var, y: &[T], eps: f64) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != y.len() {
            return Err(Error::shape("bce", self.shape(p), &[y.len()]));
        }
        let eps = T::of(eps);
        let total = pv.iter().zip(y).fold(T::zero(), |s, (&q, &t)| {
            let q = q.max(eps).min(T::one() - eps);
            s - (t * q.ln() + (T::one() - t) * (T::one() - q).ln())
        });
        let mean = total / T::of(pv.len() as f64);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::Bce {
                p,
                y: y.to_vec(),
                eps,
            },
            &[p],
        ))
    }

    /// Mean squared error of `pred` against `target`.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let pv = self.value(pred).data();
        if pv.len() != target.len() {
            return Err(Error::shape("mse", self.shape(pred), &[target.len()]));
        }
        let total = pv
            .iter()
            .zip(target)
            .fold(T::zero(), |s, (&a, &b)| s + (a - b) * (a - b));
        let mean = total / T::of(pv.len() as f64);
        let target: Vec<T> = target.to_vec();
        Ok(self.push(Tensor::scalar(mean), Op::Mse { pred, target }, &[pred]))
    }
}

pub(super) fn bce_backward<T: Real>(
    vp: &Tensor<T>,
    p: Var,
    y: &[T],
    eps: T,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let scale = g[0] / T::of(y.len() as f64);
    acc.with(p, |buf| {
        for ((b, &q), &t) in buf.iter_mut().zip(vp.data()).zip(y) {
            if q > eps && q < T::one() - eps {
                *b += scale * (q - t) / (q * (T::one() - q));
            }
        }
    });
}

pub(super) fn mse_backward<T: Real>(
    vp: &Tensor<T>,
    pred: Var,
    target: &[T],
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let scale = T::of(2.0) * g[0] / T::of(target.len() as f64);
    acc.with(pred, |buf| {
        for ((b, &q), &t) in buf.iter_mut().zip(vp.data()).zip(target) {
            *b += scale * (q - t);
        }
    });
}
