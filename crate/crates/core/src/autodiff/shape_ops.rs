use alloc::vec;
use alloc::vec::Vec;

use super::{Acc, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{split_axis, Tensor};

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Contract(alloc::format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if shape.len() < 2 {
            return Err(Error::Contract(alloc::format!(
                "transpose needs rank >= 2, got {shape:?}"
            )));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = v.numel() / (r * c);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let mut new_shape = shape.to_vec();
        let last = new_shape.len() - 1;
        new_shape.swap(last - 1, last);
        let out = Tensor::new(new_shape, out)?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(alloc::format!(
                "narrow: range {start}..{} outside axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let out = Tensor::new(new_shape, out)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Mean over `axis`, which is removed from the shape (a rank-1 input
    /// yields a one-element tensor).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("mean_axis", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let scale = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let out = Tensor::new(reduced(&shape, axis), out)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Maximum over `axis` (first index wins ties), removing the axis.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("max_axis", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * n) * inner + i;
                for k in 1..n {
                    let idx = (o * n + k) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let out = Tensor::new(reduced(&shape, axis), out)?;
        Ok(self.push(out, Op::MaxAxis { x, argmax }, &[x]))
    }
}

fn reduced(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(d, _)| d != axis)
        .map(|(_, &n)| n)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

pub(super) fn transpose_backward<T: Real>(
    input: &Tensor<T>,
    x: Var,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let shape = input.shape();
    let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let batch = input.numel() / (r * c);
    acc.with(x, |buf| {
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    buf[base + i * c + j] += g[base + j * r + i];
                }
            }
        }
    });
}

pub(super) fn narrow_backward<T: Real>(
    input: &Tensor<T>,
    out: &Tensor<T>,
    x: Var,
    axis: usize,
    start: usize,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let (outer, n, inner) = split_axis(input.shape(), axis);
    let len = out.shape()[axis];
    acc.with(x, |buf| {
        for o in 0..outer {
            let dst = (o * n + start) * inner;
            let src = o * len * inner;
            for (b, &d) in buf[dst..dst + len * inner]
                .iter_mut()
                .zip(&g[src..src + len * inner])
            {
                *b += d;
            }
        }
    });
}

pub(super) fn concat_backward<T: Real>(
    nodes: &[Node<T>],
    xs: &[Var],
    axis: usize,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let shape0 = nodes[xs[0].0].value.shape();
    let (outer, _, inner) = split_axis(shape0, axis);
    let total: usize = xs
        .iter()
        .map(|v| nodes[v.0].value.shape()[axis])
        .sum();
    let mut offset = 0;
    for &v in xs {
        let len = nodes[v.0].value.shape()[axis];
        acc.with(v, |buf| {
            for o in 0..outer {
                let src = (o * total + offset) * inner;
                let dst = o * len * inner;
                for (b, &d) in buf[dst..dst + len * inner]
                    .iter_mut()
                    .zip(&g[src..src + len * inner])
                {
                    *b += d;
                }
            }
        });
        offset += len;
    }
}

pub(super) fn mean_axis_backward<T: Real>(
    input: &Tensor<T>,
    x: Var,
    axis: usize,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let (outer, n, inner) = split_axis(input.shape(), axis);
    let scale = T::one() / T::of(n as f64);
    acc.with(x, |buf| {
        for o in 0..outer {
            for k in 0..n {
                let row = &mut buf[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (b, &d) in row.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                    *b += d * scale;
                }
            }
        }
    });
}

/// Routes each output gradient to the input index that produced it.
pub(super) fn scatter_backward<T: Real>(x: Var, argmax: &[usize], g: &[T], acc: &mut Acc<'_, T>) {
    acc.with(x, |buf| {
        for (&src, &d) in argmax.iter().zip(g) {
            buf[src] += d;
        }
    });
}
