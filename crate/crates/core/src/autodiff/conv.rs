use alloc::vec;
use alloc::vec::Vec;

use super::{Acc, BatchNormUpdate, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::params::BufferId;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds sample `x` (`[c_in, h, w]`) into `[c_in·kh·kw, h_out·w_out]`.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        self.im2col_rows(x, col, 0, self.h_out);
    }

    /// [`Self::im2col`] restricted to output rows `r0..r0 + rows`:
    /// `[c_in·kh·kw, rows·w_out]`.
    fn im2col_rows<T: Real>(&self, x: &[T], col: &mut [T], r0: usize, rows: usize) {
        let l = rows * self.w_out;
        let (s, p) = (self.stride as isize, self.padding as isize);
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * l..(row + 1) * l];
                    for oi in 0..rows {
                        let ii = (r0 + oi) as isize * s + ki as isize - p;
                        let line = &mut dst[oi * self.w_out..(oi + 1) * self.w_out];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ii as usize * self.w..(ii as usize + 1) * self.w];
                        if s == 1 {
                            // valid oj satisfy 0 <= oj + kj - p < w
                            let off = kj as isize - p;
                            let lo = (-off).clamp(0, self.w_out as isize) as usize;
                            let hi = (self.w as isize - off).clamp(lo as isize, self.w_out as isize) as usize;
                            line[..lo].fill(T::zero());
                            line[hi..].fill(T::zero());
                            let start = (lo as isize + off) as usize;
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            continue;
                        }
                        for (oj, d) in line.iter_mut().enumerate() {
                            let jj = oj as isize * s + kj as isize - p;
                            *d = if jj < 0 || jj >= self.w as isize {
                                T::zero()
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: folds columns back, summing overlaps.
    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let l = self.positions();
        let (s, p) = (self.stride as isize, self.padding as isize);
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * l..(row + 1) * l];
                    for oi in 0..self.h_out {
                        let ii = oi as isize * s + ki as isize - p;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.w_out {
                            let jj = oj as isize * s + kj as isize - p;
                            if jj >= 0 && jj < self.w as isize {
                                plane[ii as usize * self.w + jj as usize] +=
                                    src[oi * self.w_out + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// 2-D convolution (cross-correlation) of `x: [N, C, H, W]` with
    /// `w: [O, C, KH, KW]` and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let ([n, c, h, wd], [o, c2, kh, kw]) = (&sx[..], &sw[..]) else {
            return Err(Error::shape("conv2d", &sx, &sw));
        };
        if c != c2 || spec.stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (hp, wp) = (h + 2 * spec.padding, wd + 2 * spec.padding);
        if hp < *kh || wp < *kw {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [*o] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeometry {
            batch: *n,
            c_in: *c,
            h: *h,
            w: *wd,
            c_out: *o,
            kh: *kh,
            kw: *kw,
            stride: spec.stride,
            padding: spec.padding,
            h_out: (hp - kh) / spec.stride + 1,
            w_out: (wp - kw) / spec.stride + 1,
        };
        let (patch, l) = (geom.patch(), geom.positions());
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut col = vec![T::zero(); patch * l];
        let mut out = vec![T::zero(); n * o * l];
        let sample = c * h * wd;
        for i in 0..*n {
            geom.im2col(&xs[i * sample..(i + 1) * sample], &mut col);
            let dst = &mut out[i * o * l..(i + 1) * o * l];
            if let Some(b) = b {
                for (row, &bv) in dst.chunks_exact_mut(l).zip(self.value(b).data()) {
                    row.fill(bv);
                }
            }
            T::gemm(*o, patch, l, ws, false, &col, false, dst, b.is_some());
        }
        let out = Tensor::new([*n, *o, geom.h_out, geom.w_out], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Non-overlapping `k × k` max pooling of `[N, C, H, W]` (floor mode).
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Contract(alloc::format!(
                "max_pool2d needs [N, C, H, W], got {shape:?}"
            )));
        };
        if k == 0 || h < k || w < k {
            return Err(Error::Input(alloc::format!(
                "max_pool2d: window {k} larger than input {h}x{w}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let track = self.requires_grad(x);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = if track { vec![0usize; out.len()] } else { Vec::new() };
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..ho {
                let o = (plane * ho + oi) * wo;
                let top = base + oi * k * w;
                let row = &mut out[o..o + wo];
                for (oj, r) in row.iter_mut().enumerate() {
                    *r = src[top + oj * k];
                }
                if track {
                    for (oj, a) in argmax[o..o + wo].iter_mut().enumerate() {
                        *a = top + oj * k;
                    }
                }
                for di in 0..k {
                    let line = &src[top + di * w..top + di * w + wo * k];
                    for (oj, win) in line.chunks_exact(k).enumerate() {
                        for (dj, &v) in win.iter().enumerate() {
                            if v > row[oj] {
                                row[oj] = v;
                                if track {
                                    argmax[o + oj] = top + di * w + oj * k + dj;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Mean over the two spatial axes: `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Contract(alloc::format!(
                "global_avg_pool needs [N, C, H, W], got {shape:?}"
            )));
        };
        let area = h * w;
        let scale = T::one() / T::of(area as f64);
        let src = self.value(x).data();
        let out: Vec<T> = src
            .chunks_exact(area)
            .map(|p| p.iter().fold(T::zero(), |s, &v| s + v) * scale)
            .collect();
        let out = Tensor::new([n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Per-channel batch normalization of `[N, C, H, W]`.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// queued (see [`Tape::take_bn_updates`]) for the running buffers; in
    /// evaluation mode only `running` is used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: BatchNormRunning<'_, T>,
        training: bool,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Contract(alloc::format!(
                "batch_norm needs [N, C, H, W], got {shape:?}"
            )));
        };
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::shape("batch_norm", &shape, self.shape(v)));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batch_norm running stats", &shape, &[running.mean.len()]));
        }
        let area = h * w;
        let count = n * area;
        if training && count < 2 {
            return Err(Error::Input(
                "batch_norm in training mode needs more than one value per channel".into(),
            ));
        }
        let src = self.value(x).data();
        let eps = T::of(eps);
        let (mean, var) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv = T::one() / T::of(count as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * area;
                    s += src[base..base + area].iter().fold(T::zero(), |a, &v| a + v);
                }
                let m = s * inv;
                let mut ss = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * area;
                    ss += src[base..base + area]
                        .iter()
                        .fold(T::zero(), |a, &v| a + (v - m) * (v - m));
                }
                mean[ch] = m;
                var[ch] = ss * inv;
            }
            (mean, var)
        } else {
            (running.mean.to_vec(), running.var.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let track = [x, gamma, beta].iter().any(|&v| self.requires_grad(v));
        let mut xhat = if track { vec![T::zero(); src.len()] } else { Vec::new() };
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * area;
                let (m, is) = (mean[ch], inv_std[ch]);
                if track {
                    for k in base..base + area {
                        xhat[k] = (src[k] - m) * is;
                    }
                }
                if training {
                    for k in base..base + area {
                        out[k] = g[ch] * ((src[k] - m) * is) + bt[ch];
                    }
                } else {
                    let (scale, shift) = eval_affine(g[ch], bt[ch], m, is);
                    for (o, &v) in out[base..base + area].iter_mut().zip(&src[base..base + area]) {
                        *o = v * scale + shift;
                    }
                }
            }
        }
        if training {
            if let Some((mean_buffer, var_buffer)) = running.ids {
                let unbias = T::of(count as f64 / (count as f64 - 1.0));
                self.record_bn_update(BatchNormUpdate {
                    mean_buffer,
                    var_buffer,
                    batch_mean: mean,
                    batch_var: var.iter().map(|&v| v * unbias).collect(),
                });
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[x, gamma, beta],
        ))
    }
}

/// Evaluation-mode batch norm as one multiply-add per value.
fn eval_affine<T: Real>(gamma: T, beta: T, mean: T, inv_std: T) -> (T, T) {
    let scale = gamma * inv_std;
    (scale, beta - mean * scale)
}

/// Target size of the unfolded strip in [`Tape::conv_bn_relu_pool_eval`].
const STRIP_ELEMS: usize = 1 << 18;
/// Narrower strips starve the matrix product.
const STRIP_MIN_COLUMNS: usize = 1024;

impl<T: Real> Tape<T> {
    /// Evaluation-mode `conv2d` (no bias), batch norm, relu and `k × k` max
    /// pooling of `x: [N, C, H, W]`, computed in strips of output rows.
    /// Equal to the unfused ops bit for bit; only available on inference
    /// tapes.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_bn_relu_pool_eval(
        &mut self,
        x: Var,
        weight: &Tensor<T>,
        spec: ConvSpec,
        gamma: &[T],
        beta: &[T],
        running: BatchNormRunning<'_, T>,
        eps: f64,
        k: usize,
    ) -> Result<Var> {
        if !self.is_inference() {
            return Err(Error::Contract("conv_bn_relu_pool_eval needs an inference tape".into()));
        }
        let sx = self.shape(x).to_vec();
        let sw = weight.shape();
        let ([n, c, h, wd], [o, c2, kh, kw]) = (&sx[..], sw) else {
            return Err(Error::shape("conv_bn_relu_pool_eval", &sx, sw));
        };
        let (n, o) = (*n, *o);
        let (hp, wp) = (h + 2 * spec.padding, wd + 2 * spec.padding);
        if c != c2 || spec.stride == 0 || hp < *kh || wp < *kw {
            return Err(Error::shape("conv_bn_relu_pool_eval", &sx, sw));
        }
        if [gamma.len(), beta.len(), running.mean.len(), running.var.len()] != [o; 4] {
            return Err(Error::shape("conv_bn_relu_pool_eval", sw, &[gamma.len()]));
        }
        let geom = ConvGeometry {
            batch: n,
            c_in: *c,
            h: *h,
            w: *wd,
            c_out: o,
            kh: *kh,
            kw: *kw,
            stride: spec.stride,
            padding: spec.padding,
            h_out: (hp - kh) / spec.stride + 1,
            w_out: (wp - kw) / spec.stride + 1,
        };
        if k == 0 || geom.h_out < k || geom.w_out < k {
            return Err(Error::Input(alloc::format!(
                "max_pool2d: window {k} larger than input {}x{}",
                geom.h_out,
                geom.w_out
            )));
        }
        let (ho, wo, w_out) = (geom.h_out / k, geom.w_out / k, geom.w_out);
        let patch = geom.patch();
        let columns = (STRIP_ELEMS / patch).max(STRIP_MIN_COLUMNS);
        let strip = (columns / (w_out * k)).clamp(1, ho);
        let eps = T::of(eps);
        let affine: Vec<(T, T)> = (0..o)
            .map(|ch| {
                let inv_std = T::one() / (running.var[ch] + eps).sqrt();
                eval_affine(gamma[ch], beta[ch], running.mean[ch], inv_std)
            })
            .collect();
        let xs = self.value(x).data();
        let sample = c * h * wd;
        let mut col = vec![T::zero(); patch * strip * k * w_out];
        let mut conv = vec![T::zero(); o * strip * k * w_out];
        let mut out = vec![T::zero(); n * o * ho * wo];
        for i in 0..n {
            let xi = &xs[i * sample..(i + 1) * sample];
            for p0 in (0..ho).step_by(strip) {
                let pr = strip.min(ho - p0);
                let l = pr * k * w_out;
                geom.im2col_rows(xi, &mut col[..patch * l], p0 * k, pr * k);
                T::gemm(o, patch, l, weight.data(), false, &col[..patch * l], false, &mut conv[..o * l], false);
                for (ch, &(scale, shift)) in affine.iter().enumerate() {
                    let src = &conv[ch * l..(ch + 1) * l];
                    for r in 0..pr {
                        let at = ((i * o + ch) * ho + p0 + r) * wo;
                        let row = &mut out[at..at + wo];
                        for di in 0..k {
                            let line = &src[(r * k + di) * w_out..][..wo * k];
                            for (m, win) in row.iter_mut().zip(line.chunks_exact(k)) {
                                for &v in win {
                                    let y = v * scale + shift;
                                    if y > *m {
                                        *m = y;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new([n, o, ho, wo], out)?;
        Ok(self.push(out, Op::Leaf, &[]))
    }
}

/// Running statistics of a batch-norm layer plus the buffers they live in.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormRunning<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
    pub ids: Option<(BufferId, BufferId)>,
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<T: Real>(
    vx: &Tensor<T>,
    vw: &Tensor<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeometry,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let (patch, l, o) = (geom.patch(), geom.positions(), geom.c_out);
    let sample = geom.c_in * geom.h * geom.w;
    if let Some(b) = b {
        acc.with(b, |buf| {
            for i in 0..geom.batch {
                for (ch, row) in g[i * o * l..(i + 1) * o * l].chunks_exact(l).enumerate() {
                    buf[ch] += row.iter().fold(T::zero(), |s, &v| s + v);
                }
            }
        });
    }
    let (want_x, want_w) = (acc.wants(x), acc.wants(w));
    if !want_x && !want_w {
        return;
    }
    let mut col = vec![T::zero(); patch * l];
    let mut dw = vec![T::zero(); if want_w { o * patch } else { 0 }];
    let mut dx = vec![T::zero(); if want_x { vx.numel() } else { 0 }];
    for i in 0..geom.batch {
        let gi = &g[i * o * l..(i + 1) * o * l];
        if want_w {
            geom.im2col(&vx.data()[i * sample..(i + 1) * sample], &mut col);
            T::gemm(o, l, patch, gi, false, &col, true, &mut dw, true);
        }
        if want_x {
            T::gemm(patch, o, l, vw.data(), true, gi, false, &mut col, false);
            geom.col2im(&col, &mut dx[i * sample..(i + 1) * sample]);
        }
    }
    if want_w {
        acc.add(w, &dw);
    }
    if want_x {
        acc.add(x, &dx);
    }
}

pub(super) fn global_avg_pool_backward<T: Real>(
    vx: &Tensor<T>,
    x: Var,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let s = vx.shape();
    let area = s[2] * s[3];
    let scale = T::one() / T::of(area as f64);
    acc.with(x, |buf| {
        for (plane, &d) in buf.chunks_exact_mut(area).zip(g) {
            plane.iter_mut().for_each(|b| *b += d * scale);
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward<T: Real>(
    vx: &Tensor<T>,
    vgamma: &Tensor<T>,
    (x, gamma, beta): (Var, Var, Var),
    xhat: &[T],
    inv_std: &[T],
    training: bool,
    g: &[T],
    acc: &mut Acc<'_, T>,
) {
    let s = vx.shape();
    let (n, c, area) = (s[0], s[1], s[2] * s[3]);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * area;
            for k in base..base + area {
                sum_dy[ch] += g[k];
                sum_dy_xhat[ch] += g[k] * xhat[k];
            }
        }
    }
    acc.add(beta, &sum_dy);
    acc.add(gamma, &sum_dy_xhat);
    let gm = vgamma.data();
    let count = T::of((n * area) as f64);
    acc.with(x, |buf| {
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * area;
                let k_scale = gm[ch] * inv_std[ch];
                for k in base..base + area {
                    buf[k] += if training {
                        k_scale / count
                            * (count * g[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch])
                    } else {
                        k_scale * g[k]
                    };
                }
            }
        }
    });
}
