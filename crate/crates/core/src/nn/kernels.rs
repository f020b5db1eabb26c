//! Forward kernels and their adjoints on NCHW tensors.

use alloc::vec;
use alloc::vec::Vec;

use super::{Real, Tensor};

/// Convolution geometry. Padding keeps the spatial size at stride 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn dense(cin: usize, cout: usize, k: usize, dilation: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            stride: 1,
            dilation,
            groups: 1,
        }
    }

    pub fn depthwise(c: usize, k: usize, dilation: usize) -> Self {
        Self {
            cin: c,
            cout: c,
            k,
            stride: 1,
            dilation,
            groups: c,
        }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub fn pad(&self) -> usize {
        self.dilation * (self.k - 1) / 2
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad() - self.dilation * (self.k - 1) - 1) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.k * self.k
    }

    pub fn fan_in(&self) -> usize {
        (self.cin / self.groups) * self.k * self.k
    }

    pub fn fan_out(&self) -> usize {
        (self.cout / self.groups) * self.k * self.k
    }
}

/// Output positions `o` in `[start, end)` whose input `o*stride + off` lies in `[0, in_len)`.
fn valid_range(off: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let start = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let last = in_len as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let end = (last / s + 1).min(out_len as isize);
    let start = start.min(end);
    (start as usize, end as usize)
}

struct Tap {
    off_y: isize,
    off_x: isize,
    ox: (usize, usize),
}

fn taps(g: &ConvGeom, w_in: usize, ow: usize) -> Vec<Tap> {
    let pad = g.pad() as isize;
    let mut out = Vec::with_capacity(g.k * g.k);
    for ky in 0..g.k {
        for kx in 0..g.k {
            let off_y = (ky * g.dilation) as isize - pad;
            let off_x = (kx * g.dilation) as isize - pad;
            out.push(Tap {
                off_y,
                off_x,
                ox: valid_range(off_x, g.stride, w_in, ow),
            });
        }
    }
    out
}

pub fn conv2d<R: Real>(x: &Tensor<R>, weight: &[R], g: &ConvGeom) -> Tensor<R> {
    let [n, cin, h, w] = x.shape();
    assert_eq!(cin, g.cin, "conv input channels");
    assert_eq!(weight.len(), g.weight_len(), "conv weight length");
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let mut y = Tensor::zeros([n, g.cout, oh, ow]);
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kk = g.k * g.k;
    let taps = taps(g, w, ow);
    let s = g.stride;
    for b in 0..n {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let out = y.plane_mut(b, co);
            for cig in 0..cin_g {
                let ci = grp * cin_g + cig;
                let inp = x.plane(b, ci);
                let wrow = &weight[(co * cin_g + cig) * kk..(co * cin_g + cig + 1) * kk];
                for (t, &wv) in taps.iter().zip(wrow) {
                    if wv == R::zero() {
                        continue;
                    }
                    let (x0, x1) = t.ox;
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + t.off_y;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = &inp[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut out[oy * ow + x0..oy * ow + x1];
                        if s == 1 {
                            let i0 = (x0 as isize + t.off_x) as usize;
                            for (o, &v) in orow.iter_mut().zip(&irow[i0..i0 + (x1 - x0)]) {
                                *o += wv * v;
                            }
                        } else {
                            for (j, o) in orow.iter_mut().enumerate() {
                                let ix = ((x0 + j) * s) as isize + t.off_x;
                                *o += wv * irow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulates the weight gradient into `dw` and returns the input gradient when requested.
pub fn conv2d_backward<R: Real>(
    x: &Tensor<R>,
    weight: &[R],
    dy: &Tensor<R>,
    g: &ConvGeom,
    dw: &mut [R],
    need_dx: bool,
) -> Option<Tensor<R>> {
    let [n, _, h, w] = x.shape();
    let [_, _, oh, ow] = dy.shape();
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let kk = g.k * g.k;
    let taps = taps(g, w, ow);
    let s = g.stride;
    let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
    for b in 0..n {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let dout = dy.plane(b, co);
            for cig in 0..cin_g {
                let ci = grp * cin_g + cig;
                let inp = x.plane(b, ci);
                let base = (co * cin_g + cig) * kk;
                for (ti, t) in taps.iter().enumerate() {
                    let (x0, x1) = t.ox;
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = weight[base + ti];
                    let mut acc = R::zero();
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + t.off_y;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let drow = &dout[oy * ow + x0..oy * ow + x1];
                        if s == 1 {
                            let i0 = (x0 as isize + t.off_x) as usize;
                            let irow = &inp[iy * w + i0..iy * w + i0 + (x1 - x0)];
                            for (&d, &v) in drow.iter().zip(irow) {
                                acc += d * v;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let dxrow = &mut dx.plane_mut(b, ci)[iy * w + i0..iy * w + i0 + (x1 - x0)];
                                for (o, &d) in dxrow.iter_mut().zip(drow) {
                                    *o += wv * d;
                                }
                            }
                        } else {
                            for (j, &d) in drow.iter().enumerate() {
                                let ix = (((x0 + j) * s) as isize + t.off_x) as usize;
                                acc += d * inp[iy * w + ix];
                                if let Some(dx) = dx.as_mut() {
                                    dx.plane_mut(b, ci)[iy * w + ix] += wv * d;
                                }
                            }
                        }
                    }
                    dw[base + ti] += acc;
                }
            }
        }
    }
    dx
}

/// Adds a per-channel bias in place.
pub fn add_bias<R: Real>(y: &mut Tensor<R>, bias: &[R]) {
    let [n, c, _, _] = y.shape();
    for b in 0..n {
        for ch in 0..c {
            let v = bias[ch];
            for o in y.plane_mut(b, ch) {
                *o += v;
            }
        }
    }
}

pub fn bias_backward<R: Real>(dy: &Tensor<R>, dbias: &mut [R]) {
    let [n, c, _, _] = dy.shape();
    for b in 0..n {
        for ch in 0..c {
            dbias[ch] += dy.plane(b, ch).iter().copied().sum::<R>();
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnCache<R> {
    pub xhat: Tensor<R>,
    pub inv_std: Vec<R>,
    pub train: bool,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization with batch statistics; updates the running estimates.
pub fn batch_norm_train<R: Real>(
    x: &Tensor<R>,
    gamma: &[R],
    beta: &[R],
    running_mean: &mut [R],
    running_var: &mut [R],
) -> (Tensor<R>, BnCache<R>) {
    let [n, c, h, w] = x.shape();
    let m = n * h * w;
    let mf = R::lit(m as f64);
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![R::zero(); c];
    let momentum = R::lit(BN_MOMENTUM);
    for ch in 0..c {
        let mut mean = R::zero();
        for b in 0..n {
            mean += x.plane(b, ch).iter().copied().sum::<R>();
        }
        mean /= mf;
        let mut var = R::zero();
        for b in 0..n {
            for &v in x.plane(b, ch) {
                let d = v - mean;
                var += d * d;
            }
        }
        var /= mf;
        let istd = R::one() / (var + R::lit(BN_EPS)).sqrt();
        inv_std[ch] = istd;
        for b in 0..n {
            let xp = x.plane(b, ch);
            let hp = xhat.plane_mut(b, ch);
            for (o, &v) in hp.iter_mut().zip(xp) {
                *o = (v - mean) * istd;
            }
            let yp = y.plane_mut(b, ch);
            for (o, &v) in yp.iter_mut().zip(xhat.plane(b, ch)) {
                *o = gamma[ch] * v + beta[ch];
            }
        }
        let unbiased = if m > 1 { var * mf / R::lit((m - 1) as f64) } else { var };
        running_mean[ch] = (R::one() - momentum) * running_mean[ch] + momentum * mean;
        running_var[ch] = (R::one() - momentum) * running_var[ch] + momentum * unbiased;
    }
    (y, BnCache { xhat, inv_std, train: true })
}

pub fn batch_norm_eval<R: Real>(
    x: &Tensor<R>,
    gamma: &[R],
    beta: &[R],
    running_mean: &[R],
    running_var: &[R],
) -> (Tensor<R>, BnCache<R>) {
    let [n, c, _, _] = x.shape();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![R::zero(); c];
    for ch in 0..c {
        let istd = R::one() / (running_var[ch] + R::lit(BN_EPS)).sqrt();
        inv_std[ch] = istd;
        for b in 0..n {
            for ((o, h), &v) in y
                .plane_mut(b, ch)
                .iter_mut()
                .zip(xhat.plane_mut(b, ch).iter_mut())
                .zip(x.plane(b, ch))
            {
                *h = (v - running_mean[ch]) * istd;
                *o = gamma[ch] * *h + beta[ch];
            }
        }
    }
    (y, BnCache { xhat, inv_std, train: false })
}

/// Returns the input gradient; accumulates into `dgamma` and `dbeta`.
pub fn batch_norm_backward<R: Real>(
    dy: &Tensor<R>,
    cache: &BnCache<R>,
    gamma: &[R],
    dgamma: &mut [R],
    dbeta: &mut [R],
) -> Tensor<R> {
    let [n, c, h, w] = dy.shape();
    let mf = R::lit((n * h * w) as f64);
    let mut dx = Tensor::zeros(dy.shape());
    for ch in 0..c {
        let mut sg = R::zero();
        let mut sb = R::zero();
        for b in 0..n {
            for (&d, &xh) in dy.plane(b, ch).iter().zip(cache.xhat.plane(b, ch)) {
                sg += d * xh;
                sb += d;
            }
        }
        dgamma[ch] += sg;
        dbeta[ch] += sb;
        let k = gamma[ch] * cache.inv_std[ch];
        for b in 0..n {
            let dxp = dx.plane_mut(b, ch);
            for ((o, &d), &xh) in dxp.iter_mut().zip(dy.plane(b, ch)).zip(cache.xhat.plane(b, ch)) {
                *o = if cache.train {
                    k * (d - (sb + xh * sg) / mf)
                } else {
                    k * d
                };
            }
        }
    }
    dx
}

pub fn relu_inplace<R: Real>(x: &mut Tensor<R>) {
    for v in x.data_mut() {
        if *v < R::zero() {
            *v = R::zero();
        }
    }
}

/// Masks `dy` where the ReLU output was not positive.
pub fn relu_backward_inplace<R: Real>(dy: &mut Tensor<R>, y: &Tensor<R>) {
    for (d, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= R::zero() {
            *d = R::zero();
        }
    }
}

/// Source index pair and interpolation weight per output coordinate
/// (half-pixel centres, edges clamped).
fn interp_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm_floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let lambda = src - i0 as f64;
            (i0, i1, if i0 == i1 { 0.0 } else { lambda })
        })
        .collect()
}

fn libm_floor(x: f64) -> f64 {
    num_traits::Float::floor(x)
}

pub fn upsample_bilinear<R: Real>(x: &Tensor<R>, oh: usize, ow: usize) -> Tensor<R> {
    let [n, c, h, w] = x.shape();
    if h == oh && w == ow {
        return x.clone();
    }
    let ay = interp_axis(h, oh);
    let ax = interp_axis(w, ow);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let inp = x.plane(b, ch);
            let out = y.plane_mut(b, ch);
            for (oy, &(y0, y1, ly)) in ay.iter().enumerate() {
                let ly = R::lit(ly);
                for (ox, &(x0, x1, lx)) in ax.iter().enumerate() {
                    let lx = R::lit(lx);
                    let top = inp[y0 * w + x0] * (R::one() - lx) + inp[y0 * w + x1] * lx;
                    let bot = inp[y1 * w + x0] * (R::one() - lx) + inp[y1 * w + x1] * lx;
                    out[oy * ow + ox] = top * (R::one() - ly) + bot * ly;
                }
            }
        }
    }
    y
}

pub fn upsample_bilinear_backward<R: Real>(dy: &Tensor<R>, h: usize, w: usize) -> Tensor<R> {
    let [n, c, oh, ow] = dy.shape();
    if h == oh && w == ow {
        return dy.clone();
    }
    let ay = interp_axis(h, oh);
    let ax = interp_axis(w, ow);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let d = dy.plane(b, ch);
            let out = dx.plane_mut(b, ch);
            for (oy, &(y0, y1, ly)) in ay.iter().enumerate() {
                let ly = R::lit(ly);
                for (ox, &(x0, x1, lx)) in ax.iter().enumerate() {
                    let lx = R::lit(lx);
                    let g = d[oy * ow + ox];
                    let gt = g * (R::one() - ly);
                    let gb = g * ly;
                    out[y0 * w + x0] += gt * (R::one() - lx);
                    out[y0 * w + x1] += gt * lx;
                    out[y1 * w + x0] += gb * (R::one() - lx);
                    out[y1 * w + x1] += gb * lx;
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let [n, c, h, w] = x.shape();
    let inv = R::lit(1.0 / (h * w) as f64);
    let mut y = Tensor::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            y.plane_mut(b, ch)[0] = x.plane(b, ch).iter().copied().sum::<R>() * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<R: Real>(dy: &Tensor<R>, h: usize, w: usize) -> Tensor<R> {
    let [n, c, _, _] = dy.shape();
    let inv = R::lit(1.0 / (h * w) as f64);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let g = dy.plane(b, ch)[0] * inv;
            for v in dx.plane_mut(b, ch) {
                *v = g;
            }
        }
    }
    dx
}

pub fn concat_channels<R: Real>(items: &[&Tensor<R>]) -> Tensor<R> {
    let [n, _, h, w] = items[0].shape();
    let c: usize = items.iter().map(|t| t.c()).sum();
    let mut y = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        let mut off = 0;
        for t in items {
            assert_eq!((t.n(), t.h(), t.w()), (n, h, w), "concat shape mismatch");
            for ch in 0..t.c() {
                y.plane_mut(b, off + ch).copy_from_slice(t.plane(b, ch));
            }
            off += t.c();
        }
    }
    y
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels<R: Real>(dy: &Tensor<R>, channels: &[usize]) -> Vec<Tensor<R>> {
    let [n, _, h, w] = dy.shape();
    let mut out = Vec::with_capacity(channels.len());
    let mut off = 0;
    for &c in channels {
        let mut t = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                t.plane_mut(b, ch).copy_from_slice(dy.plane(b, off + ch));
            }
        }
        off += c;
        out.push(t);
    }
    out
}
