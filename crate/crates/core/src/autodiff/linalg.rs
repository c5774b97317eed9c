use alloc::vec;
use alloc::vec::Vec;

use super::{Acc, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// (batch, m, k) view of a rank-2 or rank-3 operand.
fn mat_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [m, k] => Some((1, m, k)),
        [b, m, k] => Some((b, m, k)),
        _ => None,
    }
}

impl<T: Real> Tape<T> {
    /// Matrix product of `[m, k] × [k, n]`, or batched `[b, m, k] × [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        let (ba, m, k) = mat_dims(&sa).ok_or_else(err)?;
        let (bb, k2, n) = mat_dims(&sb).ok_or_else(err)?;
        if k != k2 || ba != bb || sa.len() != sb.len() {
            return Err(err());
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); ba * m * n];
        for i in 0..ba {
            T::gemm(
                m,
                k,
                n,
                &va[i * m * k..],
                false,
                &vb[i * k * n..],
                false,
                &mut out[i * m * n..],
                false,
            );
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![ba, m, n]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · Wᵀ + b` over the last axis of `x`, with `W` shaped `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let [n_out, n_in] = sw[..] else {
            return Err(Error::shape("linear", &sx, &sw));
        };
        if sx.last() != Some(&n_in) {
            return Err(Error::shape("linear", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(Error::shape("linear bias", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / n_in;
        let mut out = vec![T::zero(); rows * n_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n_out) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            rows,
            n_in,
            n_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            b.is_some(),
        );
        let mut shape: Vec<usize> = sx;
        *shape.last_mut().expect("rank >= 1") = n_out;
        let out = Tensor::new(shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }
}

pub(super) fn matmul_backward<T: Real>(
    va: &Tensor<T>,
    vb: &Tensor<T>,
    a: Var,
    b: Var,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let (batch, m, k) = mat_dims(va.shape()).expect("checked in forward");
    let n = vb.shape()[vb.shape().len() - 1];
    acc.with(a, |buf| {
        for i in 0..batch {
            T::gemm(
                m,
                n,
                k,
                &g[i * m * n..],
                false,
                &vb.data()[i * k * n..],
                true,
                &mut buf[i * m * k..],
                true,
            );
        }
    });
    acc.with(b, |buf| {
        for i in 0..batch {
            T::gemm(
                k,
                m,
                n,
                &va.data()[i * m * k..],
                true,
                &g[i * m * n..],
                false,
                &mut buf[i * k * n..],
                true,
            );
        }
    });
}

pub(super) fn linear_backward<T: Real>(
    vx: &Tensor<T>,
    vw: &Tensor<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let (n_out, n_in) = (vw.shape()[0], vw.shape()[1]);
    let rows = vx.numel() / n_in;
    acc.with(x, |buf| {
        T::gemm(rows, n_out, n_in, g, false, vw.data(), false, buf, true);
    });
    acc.with(w, |buf| {
        T::gemm(n_out, rows, n_in, g, true, vx.data(), false, buf, true);
    });
    if let Some(b) = b {
        acc.with(b, |buf| {
            for row in g.chunks_exact(n_out) {
                for (d, &v) in buf.iter_mut().zip(row) {
                    *d += v;
                }
            }
        });
    }
}
