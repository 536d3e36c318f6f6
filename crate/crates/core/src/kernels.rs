//! Convolution and normalization kernels (forward and backward).
//!
//! Convolutions lower to GEMM through `im2col`; column buffers are
//! recomputed during the backward pass rather than kept alive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Float, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Reflect,
}

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize, padding: Padding) -> Self {
        Self {
            kernel,
            stride,
            pad,
            padding,
        }
    }

    /// Output extent of a forward convolution, `None` if the kernel does not
    /// fit.
    pub fn out_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel || input == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution.
    pub fn transposed_out_size(&self, input: usize, output_padding: usize) -> Option<usize> {
        ((input.max(1) - 1) * self.stride + self.kernel + output_padding).checked_sub(2 * self.pad)
    }

    /// For every (kernel tap, output position) the source coordinate, or
    /// `None` where zero padding applies.
    fn tap_map(&self, input: usize, output: usize) -> Result<Vec<Option<usize>>> {
        if self.padding == Padding::Reflect && self.pad >= input {
            return Err(Error::Shape(format!(
                "reflection padding {} needs an input extent above it, got {input}",
                self.pad
            )));
        }
        let n = input as isize;
        let mut map = Vec::with_capacity(self.kernel * output);
        for k in 0..self.kernel {
            for o in 0..output {
                let i = (o * self.stride + k) as isize - self.pad as isize;
                map.push(match self.padding {
                    Padding::Zero => (0..n).contains(&i).then_some(i as usize),
                    Padding::Reflect => {
                        let r = if i < 0 {
                            -i
                        } else if i >= n {
                            2 * (n - 1) - i
                        } else {
                            i
                        };
                        Some(r as usize)
                    }
                });
            }
        }
        Ok(map)
    }
}

struct Lowering {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    ymap: Vec<Option<usize>>,
    xmap: Vec<Option<usize>>,
}

impl Lowering {
    fn new(geom: &ConvGeom, c: usize, h: usize, w: usize) -> Result<Self> {
        let (ho, wo) = match (geom.out_size(h), geom.out_size(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Shape(format!(
                    "{k}x{k} kernel with padding {p} does not fit a {h}x{w} input",
                    k = geom.kernel,
                    p = geom.pad
                )))
            }
        };
        Ok(Self {
            c,
            h,
            w,
            ho,
            wo,
            k: geom.kernel,
            ymap: geom.tap_map(h, ho)?,
            xmap: geom.tap_map(w, wo)?,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Float>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let xm = &self.xmap[kx * self.wo..(kx + 1) * self.wo];
                    for oy in 0..self.ho {
                        let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        match self.ymap[ky * self.ho + oy] {
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                for (o, m) in out.iter_mut().zip(xm) {
                                    *o = m.map_or(T::zero(), |ix| src[ix]);
                                }
                            }
                            None => out.iter_mut().for_each(|o| *o = T::zero()),
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Float>(&self, cols: &[T], x: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    let xm = &self.xmap[kx * self.wo..(kx + 1) * self.wo];
                    for oy in 0..self.ho {
                        if let Some(iy) = self.ymap[ky * self.ho + oy] {
                            let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                            let g = &src[oy * self.wo..(oy + 1) * self.wo];
                            for (&v, m) in g.iter().zip(xm) {
                                if let Some(ix) = *m {
                                    dst[ix] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions with at most this many output channels skip the
/// im2col lowering; its buffer would dwarf the useful work.
const DIRECT_MAX_OUT: usize = 8;

fn uses_direct(geom: &ConvGeom, co: usize) -> bool {
    geom.stride == 1 && co <= DIRECT_MAX_OUT
}

/// Dot product with independent lanes so the reduction vectorizes.
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

/// Direct stride-1 convolution over an explicitly padded input plane.
struct Direct {
    k: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    hp: usize,
    wp: usize,
    ymap: Vec<Option<usize>>,
    xmap: Vec<Option<usize>>,
}

impl Direct {
    fn new(geom: &ConvGeom, low: &Lowering) -> Self {
        let pad = ConvGeom::new(1, 1, geom.pad, geom.padding);
        let (hp, wp) = (low.h + 2 * geom.pad, low.w + 2 * geom.pad);
        Self {
            k: geom.kernel,
            c: low.c,
            h: low.h,
            w: low.w,
            ho: low.ho,
            wo: low.wo,
            hp,
            wp,
            ymap: pad.tap_map(low.h, hp).expect("validated by the lowering"),
            xmap: pad.tap_map(low.w, wp).expect("validated by the lowering"),
        }
    }

    fn pad<T: Float>(&self, plane: &[T], out: &mut [T]) {
        for (jy, my) in self.ymap.iter().enumerate() {
            let row = &mut out[jy * self.wp..(jy + 1) * self.wp];
            match my {
                Some(iy) => {
                    let src = &plane[iy * self.w..(iy + 1) * self.w];
                    for (o, mx) in row.iter_mut().zip(&self.xmap) {
                        *o = mx.map_or(T::zero(), |ix| src[ix]);
                    }
                }
                None => row.iter_mut().for_each(|o| *o = T::zero()),
            }
        }
    }

    fn unpad_add<T: Float>(&self, padded: &[T], plane: &mut [T]) {
        for (jy, my) in self.ymap.iter().enumerate() {
            if let Some(iy) = my {
                let row = &padded[jy * self.wp..(jy + 1) * self.wp];
                let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                for (&v, mx) in row.iter().zip(&self.xmap) {
                    if let Some(ix) = mx {
                        dst[*ix] += v;
                    }
                }
            }
        }
    }

    fn forward<T: Float>(&self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, co: usize) -> Tensor<T> {
        let nb = x.shape()[0];
        let (k, plane, op) = (self.k, self.h * self.w, self.ho * self.wo);
        let mut out = Tensor::zeros(&[nb, co, self.ho, self.wo]);
        let mut xp = vec![T::zero(); self.hp * self.wp];
        for n in 0..nb {
            let y = &mut out.data_mut()[n * co * op..(n + 1) * co * op];
            for (o, &bias) in y.chunks_mut(op).zip(b.data()) {
                o.iter_mut().for_each(|v| *v = bias);
            }
            for ci in 0..self.c {
                let base = (n * self.c + ci) * plane;
                self.pad(&x.data()[base..base + plane], &mut xp);
                for (o, yc) in y.chunks_mut(op).enumerate() {
                    let wk = &w.data()[(o * self.c + ci) * k * k..][..k * k];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wk[ky * k + kx];
                            for oy in 0..self.ho {
                                let src = &xp[(oy + ky) * self.wp + kx..][..self.wo];
                                let dst = &mut yc[oy * self.wo..(oy + 1) * self.wo];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward<T: Float>(&self, x: &Tensor<T>, w: &Tensor<T>, gy: &Tensor<T>, co: usize, need_dx: bool, need_params: bool) -> ConvGrads<T> {
        let nb = x.shape()[0];
        let (k, plane, op) = (self.k, self.h * self.w, self.ho * self.wo);
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let mut dw = need_params.then(|| Tensor::zeros(w.shape()));
        let mut db = need_params.then(|| Tensor::zeros(&[co]));
        let mut xp = vec![T::zero(); self.hp * self.wp];
        let mut dxp = vec![T::zero(); self.hp * self.wp];
        for n in 0..nb {
            let g = &gy.data()[n * co * op..(n + 1) * co * op];
            if let Some(db) = db.as_mut() {
                for (acc, gc) in db.data_mut().iter_mut().zip(g.chunks(op)) {
                    *acc += gc.iter().copied().sum::<T>();
                }
            }
            for ci in 0..self.c {
                let base = (n * self.c + ci) * plane;
                if need_params {
                    self.pad(&x.data()[base..base + plane], &mut xp);
                }
                dxp.iter_mut().for_each(|v| *v = T::zero());
                for (o, gc) in g.chunks(op).enumerate() {
                    let widx = (o * self.c + ci) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = T::zero();
                            let wv = w.data()[widx + ky * k + kx];
                            for oy in 0..self.ho {
                                let grow = &gc[oy * self.wo..(oy + 1) * self.wo];
                                let off = (oy + ky) * self.wp + kx;
                                if need_params {
                                    acc += dot(grow, &xp[off..off + self.wo]);
                                }
                                if need_dx {
                                    for (d, &gv) in dxp[off..off + self.wo].iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw.data_mut()[widx + ky * k + kx] += acc;
                            }
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    self.unpad_add(&dxp, &mut dx.data_mut()[base..base + plane]);
                }
            }
        }
        ConvGrads { dx, dw, db }
    }
}

fn check_weight<T: Float>(w: &Tensor<T>, geom: &ConvGeom, in_channels: usize, transposed: bool) -> Result<[usize; 4]> {
    let dims = w.dims4();
    let cin = if transposed { dims[0] } else { dims[1] };
    if cin != in_channels || dims[2] != geom.kernel || dims[3] != geom.kernel {
        return Err(Error::Shape(format!(
            "weight {:?} does not match {in_channels} input channels and a {k}x{k} kernel",
            w.shape(),
            k = geom.kernel
        )));
    }
    Ok(dims)
}

/// 2-D convolution. `w` is `[out, in, k, k]`, `b` is `[out]`.
pub fn conv2d<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, geom: &ConvGeom) -> Result<Tensor<T>> {
    let [nb, c, h, wd] = x.dims4();
    let [co, ..] = check_weight(w, geom, c, false)?;
    let low = Lowering::new(geom, c, h, wd)?;
    if uses_direct(geom, co) {
        return Ok(Direct::new(geom, &low).forward(x, w, b, co));
    }
    let (rows, p) = (low.rows(), low.positions());
    let mut cols = vec![T::zero(); rows * p];
    let mut out = Tensor::zeros(&[nb, co, low.ho, low.wo]);
    let in_per = c * h * wd;
    for n in 0..nb {
        low.im2col(&x.data()[n * in_per..(n + 1) * in_per], &mut cols);
        let y = &mut out.data_mut()[n * co * p..(n + 1) * co * p];
        matmul(co, rows, p, w.data(), false, &cols, false, y, T::zero());
        for (o, &bias) in y.chunks_mut(p).zip(b.data()) {
            o.iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeom,
    gy: &Tensor<T>,
    need_dx: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    let [nb, c, h, wd] = x.dims4();
    let [co, ..] = check_weight(w, geom, c, false)?;
    let low = Lowering::new(geom, c, h, wd)?;
    if uses_direct(geom, co) {
        return Ok(Direct::new(geom, &low).backward(x, w, gy, co, need_dx, need_params));
    }
    let (rows, p) = (low.rows(), low.positions());
    let in_per = c * h * wd;
    let mut cols = vec![T::zero(); rows * p];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_params.then(|| Tensor::zeros(w.shape()));
    let mut db = need_params.then(|| Tensor::zeros(&[co]));
    for n in 0..nb {
        let g = &gy.data()[n * co * p..(n + 1) * co * p];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            low.im2col(&x.data()[n * in_per..(n + 1) * in_per], &mut cols);
            matmul(co, p, rows, g, false, &cols, true, dw.data_mut(), T::one());
            for (acc, row) in db.data_mut().iter_mut().zip(g.chunks(p)) {
                *acc += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            matmul(rows, co, p, w.data(), true, g, false, &mut cols, T::zero());
            low.col2im(&cols, &mut dx.data_mut()[n * in_per..(n + 1) * in_per]);
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

fn transposed_lowering(geom: &ConvGeom, co: usize, h: usize, w: usize, output_padding: usize) -> Result<Lowering> {
    if geom.padding != Padding::Zero {
        return Err(Error::Shape("transposed convolution supports zero padding only".into()));
    }
    let (ho, wo) = match (
        geom.transposed_out_size(h, output_padding),
        geom.transposed_out_size(w, output_padding),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => return Err(Error::Shape(format!("transposed convolution does not fit a {h}x{w} input"))),
    };
    let low = Lowering::new(geom, co, ho, wo)?;
    if low.ho != h || low.wo != w {
        return Err(Error::Shape(format!(
            "output padding {output_padding} is inconsistent with stride {}",
            geom.stride
        )));
    }
    Ok(low)
}

/// Fractionally strided convolution. `w` is `[in, out, k, k]`.
pub fn conv_transpose2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    geom: &ConvGeom,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let [nb, ci, h, wd] = x.dims4();
    let [_, co, ..] = check_weight(w, geom, ci, true)?;
    let low = transposed_lowering(geom, co, h, wd, output_padding)?;
    let (rows, p) = (low.rows(), h * wd);
    let mut cols = vec![T::zero(); rows * p];
    let out_per = co * low.h * low.w;
    let mut out = Tensor::zeros(&[nb, co, low.h, low.w]);
    for n in 0..nb {
        matmul(rows, ci, p, w.data(), true, &x.data()[n * ci * p..(n + 1) * ci * p], false, &mut cols, T::zero());
        let y = &mut out.data_mut()[n * out_per..(n + 1) * out_per];
        low.col2im(&cols, y);
        for (o, &bias) in y.chunks_mut(low.h * low.w).zip(b.data()) {
            o.iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeom,
    output_padding: usize,
    gy: &Tensor<T>,
    need_dx: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    let [nb, ci, h, wd] = x.dims4();
    let [_, co, ..] = check_weight(w, geom, ci, true)?;
    let low = transposed_lowering(geom, co, h, wd, output_padding)?;
    let (rows, p) = (low.rows(), h * wd);
    let out_per = co * low.h * low.w;
    let mut cols = vec![T::zero(); rows * p];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_params.then(|| Tensor::zeros(w.shape()));
    let mut db = need_params.then(|| Tensor::zeros(&[co]));
    for n in 0..nb {
        let g = &gy.data()[n * out_per..(n + 1) * out_per];
        low.im2col(g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let d = &mut dx.data_mut()[n * ci * p..(n + 1) * ci * p];
            matmul(ci, rows, p, w.data(), false, &cols, false, d, T::zero());
        }
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let xs = &x.data()[n * ci * p..(n + 1) * ci * p];
            matmul(ci, p, rows, xs, false, &cols, true, dw.data_mut(), T::one());
            for (acc, plane) in db.data_mut().iter_mut().zip(g.chunks(low.h * low.w)) {
                *acc += plane.iter().copied().sum::<T>();
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Standardize contiguous groups of `group` elements: returns the normalized
/// values and each group's inverse standard deviation.
pub fn normalize_groups<T: Float>(x: &[T], group: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / group.max(1));
    for (src, dst) in x.chunks(group).zip(out.chunks_mut(group)) {
        let len = src.len() as f64;
        let mean = src.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / len;
        let var = src
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap() - mean;
                d * d
            })
            .sum::<f64>()
            / len;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = T::lit((s.to_f64().unwrap() - mean) * inv_std);
        }
        inv.push(T::lit(inv_std));
    }
    (out, inv)
}

pub fn normalize_groups_backward<T: Float>(xhat: &[T], inv_std: &[T], gy: &[T], group: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); xhat.len()];
    for (((xh, g), d), &s) in xhat
        .chunks(group)
        .zip(gy.chunks(group))
        .zip(dx.chunks_mut(group))
        .zip(inv_std)
    {
        let len = xh.len() as f64;
        let mean_g = g.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / len;
        let mean_gx = g
            .iter()
            .zip(xh)
            .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
            .sum::<f64>()
            / len;
        let s = s.to_f64().unwrap();
        for ((o, &gi), &xi) in d.iter_mut().zip(g).zip(xh) {
            *o = T::lit(s * (gi.to_f64().unwrap() - mean_g - xi.to_f64().unwrap() * mean_gx));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let [nb, c, h, wd] = x.dims4();
        let [co, _, k, _] = w.dims4();
        let ho = g.out_size(h).unwrap();
        let wo = g.out_size(wd).unwrap();
        let mut out = Tensor::zeros(&[nb, co, ho, wo]);
        let fetch = |n: usize, ci: usize, iy: isize, ix: isize| -> f64 {
            let (hh, ww) = (h as isize, wd as isize);
            let (iy, ix) = match g.padding {
                Padding::Zero => {
                    if iy < 0 || ix < 0 || iy >= hh || ix >= ww {
                        return 0.0;
                    }
                    (iy, ix)
                }
                Padding::Reflect => {
                    let r = |i: isize, n: isize| if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
                    (r(iy, hh), r(ix, ww))
                }
            };
            x.data()[((n * c + ci) * h + iy as usize) * wd + ix as usize]
        };
        for n in 0..nb {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    acc += w.data()[((o * c + ci) * k + ky) * k + kx] * fetch(n, ci, iy, ix);
                                }
                            }
                        }
                        out.data_mut()[((n * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], phase: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64) * 0.37 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive_for_all_geometries() {
        for geom in [
            ConvGeom::new(3, 1, 1, Padding::Reflect),
            ConvGeom::new(3, 2, 1, Padding::Zero),
            ConvGeom::new(4, 2, 1, Padding::Zero),
            ConvGeom::new(7, 1, 3, Padding::Reflect),
        ] {
            // 4 output channels take the direct path at stride 1, 12 the lowering.
            for co in [4, 12] {
                let x = ramp(&[2, 3, 8, 8], 0.1);
                let w = ramp(&[co, 3, geom.kernel, geom.kernel], 0.7);
                let b = ramp(&[co], 1.3);
                let fast = conv2d(&x, &w, &b, &geom).unwrap();
                let slow = naive_conv(&x, &w, &b, &geom);
                assert!(fast.max_abs_diff(&slow) < 1e-12, "{geom:?} co={co}");
            }
        }
    }

    #[test]
    fn direct_and_lowered_backward_agree() {
        // Padding the output channels past the direct-path limit with zero
        // gradient forces the lowering on the same problem.
        for geom in [ConvGeom::new(3, 1, 1, Padding::Reflect), ConvGeom::new(7, 1, 3, Padding::Zero)] {
            let x = ramp(&[2, 5, 9, 9], 0.3);
            let k = geom.kernel;
            let small = ramp(&[3, 5, k, k], 0.8);
            let mut wide = Tensor::zeros(&[3 + DIRECT_MAX_OUT, 5, k, k]);
            wide.data_mut()[..small.len()].copy_from_slice(small.data());
            let gy_small = ramp(&[2, 3, 9, 9], 1.7);
            let mut gy_wide = Tensor::zeros(&[2, 3 + DIRECT_MAX_OUT, 9, 9]);
            let op = 81;
            for n in 0..2 {
                let src = &gy_small.data()[n * 3 * op..(n + 1) * 3 * op];
                gy_wide.data_mut()[n * (3 + DIRECT_MAX_OUT) * op..][..3 * op].copy_from_slice(src);
            }
            let a = conv2d_backward(&x, &small, &geom, &gy_small, true, true).unwrap();
            let b = conv2d_backward(&x, &wide, &geom, &gy_wide, true, true).unwrap();
            assert!(a.dx.unwrap().max_abs_diff(&b.dx.unwrap()) < 1e-10);
            let (dwa, dwb) = (a.dw.unwrap(), b.dw.unwrap());
            let diff = dwa.data().iter().zip(dwb.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10);
            assert!(a.db.unwrap().data().iter().zip(b.db.unwrap().data()).all(|(p, q)| (p - q).abs() < 1e-10));
        }
    }

    #[test]
    fn conv_output_sizes() {
        let d = ConvGeom::new(4, 2, 1, Padding::Zero);
        assert_eq!(d.out_size(64), Some(32));
        assert_eq!(d.out_size(2), Some(1));
        let u = ConvGeom::new(3, 2, 1, Padding::Zero);
        assert_eq!(u.transposed_out_size(16, 1), Some(32));
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> for zero bias.
        let geom = ConvGeom::new(3, 2, 1, Padding::Zero);
        let x = ramp(&[1, 3, 8, 8], 0.2);
        let w = ramp(&[4, 3, 3, 3], 0.9);
        let y = ramp(&[1, 4, 4, 4], 2.1);
        let cx = conv2d(&x, &w, &Tensor::zeros(&[4]), &geom).unwrap();
        let ty = conv_transpose2d(&y, &w, &Tensor::zeros(&[3]), &geom, 1).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert_eq!(ty.shape(), &[1, 3, 8, 8]);
    }

    #[test]
    fn reflect_padding_needs_room() {
        let geom = ConvGeom::new(7, 1, 3, Padding::Reflect);
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let w = Tensor::zeros(&[1, 1, 7, 7]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), &geom).is_err());
    }

    #[test]
    fn normalized_groups_have_zero_mean_unit_variance() {
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 1.7).cos() * 3.0 + 5.0).collect();
        let (y, _) = normalize_groups(&x, 16);
        for g in y.chunks(16) {
            let m = g.iter().sum::<f64>() / 16.0;
            let v = g.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
