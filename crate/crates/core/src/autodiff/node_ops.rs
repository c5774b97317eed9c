//! Fused operations over node sets shaped `[N, nodes, dim]`.

use alloc::vec;

use super::elementwise::sigmoid;
use super::{Acc, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn node_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [n, d] => Some((1, n, d)),
        [b, n, d] => Some((b, n, d)),
        _ => None,
    }
}

impl<T: Real> Tape<T> {
    /// Mean of gated neighbour messages on a fully connected graph without
    /// self-edges: `out_i = mean_{j≠i} sigmoid(ah_i + bh_j) ⊙ vh_j`.
    ///
    /// A single-node graph has no neighbours and yields zeros.
    pub fn edge_gate_mean(&mut self, ah: Var, bh: Var, vh: Var) -> Result<Var> {
        let shape = self.shape(ah).to_vec();
        let (batch, n, d) = node_dims(&shape)
            .ok_or_else(|| Error::Contract(alloc::format!("node set shape {shape:?}")))?;
        for v in [bh, vh] {
            if self.shape(v) != &shape[..] {
                return Err(Error::shape("edge_gate_mean", &shape, self.shape(v)));
            }
        }
        let (a, b, v) = (
            self.value(ah).data(),
            self.value(bh).data(),
            self.value(vh).data(),
        );
        let mut out = vec![T::zero(); a.len()];
        if n > 1 {
            let inv = T::one() / T::of((n - 1) as f64);
            for s in 0..batch {
                let base = s * n * d;
                for i in 0..n {
                    let ai = &a[base + i * d..base + (i + 1) * d];
                    let dst = &mut out[base + i * d..base + (i + 1) * d];
                    for j in (0..n).filter(|&j| j != i) {
                        let bj = &b[base + j * d..base + (j + 1) * d];
                        let vj = &v[base + j * d..base + (j + 1) * d];
                        for k in 0..d {
                            dst[k] += sigmoid(ai[k] + bj[k]) * vj[k];
                        }
                    }
                    dst.iter_mut().for_each(|x| *x *= inv);
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::EdgeGateMean { ah, bh, vh }, &[ah, bh, vh]))
    }

    /// One scalar per node: `out[s, i] = h[s, i, :] · w[i, :] + b[i]`.
    pub fn node_dot(&mut self, h: Var, w: Var, b: Var) -> Result<Var> {
        let sh = self.shape(h).to_vec();
        let (batch, n, d) =
            node_dims(&sh).ok_or_else(|| Error::shape("node_dot", &sh, self.shape(w)))?;
        if self.shape(w) != [n, d] || self.shape(b) != [n] {
            return Err(Error::shape("node_dot", &sh, self.shape(w)));
        }
        let (hv, wv, bv) = (
            self.value(h).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![T::zero(); batch * n];
        for s in 0..batch {
            for i in 0..n {
                let row = &hv[(s * n + i) * d..(s * n + i + 1) * d];
                let wi = &wv[i * d..(i + 1) * d];
                out[s * n + i] = row.iter().zip(wi).fold(bv[i], |t, (&x, &y)| t + x * y);
            }
        }
        let shape = if sh.len() == 2 { vec![n] } else { vec![batch, n] };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::NodeDot { h, w, b }, &[h, w, b]))
    }
}

pub(super) fn edge_gate_backward<T: Real>(
    va: &Tensor<T>,
    vb: &Tensor<T>,
    vv: &Tensor<T>,
    (ah, bh, vh): (Var, Var, Var),
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let (batch, n, d) = node_dims(va.shape()).expect("checked in forward");
    if n < 2 {
        return;
    }
    let inv = T::one() / T::of((n - 1) as f64);
    let (a, b, v) = (va.data(), vb.data(), vv.data());
    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); a.len()];
    let mut dv = vec![T::zero(); a.len()];
    for s in 0..batch {
        let base = s * n * d;
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                for k in 0..d {
                    let (ii, jj) = (base + i * d + k, base + j * d + k);
                    let gate = sigmoid(a[ii] + b[jj]);
                    let up = g[ii] * inv;
                    dv[jj] += up * gate;
                    let dpre = up * v[jj] * gate * (T::one() - gate);
                    da[ii] += dpre;
                    db[jj] += dpre;
                }
            }
        }
    }
    acc.add(ah, &da);
    acc.add(bh, &db);
    acc.add(vh, &dv);
}

pub(super) fn node_dot_backward<T: Real>(
    vh: &Tensor<T>,
    vw: &Tensor<T>,
    (h, w, b): (Var, Var, Var),
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let (batch, n, d) = node_dims(vh.shape()).expect("checked in forward");
    let (hv, wv) = (vh.data(), vw.data());
    acc.with(h, |buf| {
        for s in 0..batch {
            for i in 0..n {
                let up = g[s * n + i];
                for k in 0..d {
                    buf[(s * n + i) * d + k] += up * wv[i * d + k];
                }
            }
        }
    });
    acc.with(w, |buf| {
        for s in 0..batch {
            for i in 0..n {
                let up = g[s * n + i];
                for k in 0..d {
                    buf[i * d + k] += up * hv[(s * n + i) * d + k];
                }
            }
        }
    });
    acc.with(b, |buf| {
        for s in 0..batch {
            for i in 0..n {
                buf[i] += g[s * n + i];
            }
        }
    });
}
