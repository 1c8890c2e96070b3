//! 2-D cross-correlation via im2col + GEMM.

use super::{gemm, Element, MatRef, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

pub(crate) struct ConvSaved<T: Element> {
    x: Tensor<T>,
    w: Tensor<T>,
    bias: Option<Tensor<T>>,
    geo: Geometry,
    cols: Vec<T>,
}

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit in the padded input.
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (stride > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

fn im2col<T: Element>(x: &[T], g: &Geometry) -> Vec<T> {
    let l = g.cols();
    let mut cols = vec![T::zero(); g.rows() * l];
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * l..(row + 1) * l];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut dst_row[n * plane + oy * g.ow..n * plane + (oy + 1) * g.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Element>(cols: &[T], g: &Geometry) -> Vec<T> {
    let l = g.cols();
    let plane = g.oh * g.ow;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &cols[row * l..(row + 1) * l];
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[n * plane + oy * g.ow..n * plane + (oy + 1) * g.ow];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let idx = base + iy as usize * g.w + ix as usize;
                                x[idx] = x[idx] + v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Element> ConvSaved<T> {
    pub fn inputs(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.x, &self.w];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    pub fn backward(&self, g: &[T], grads: &mut Vec<(Tensor<T>, Vec<T>)>) {
        let geo = &self.geo;
        let plane = geo.oh * geo.ow;
        let l = geo.cols();
        // N x O x P  ->  O x (N * P)
        let mut gmat = vec![T::zero(); geo.o * l];
        for n in 0..geo.n {
            for o in 0..geo.o {
                let src = &g[(n * geo.o + o) * plane..(n * geo.o + o + 1) * plane];
                gmat[o * l + n * plane..o * l + (n + 1) * plane].copy_from_slice(src);
            }
        }
        let kk = geo.rows();
        if self.w.requires_grad() {
            let mut gw = vec![T::zero(); geo.o * kk];
            gemm(
                geo.o,
                l,
                kk,
                MatRef::row_major(&gmat, l),
                MatRef::transposed(&self.cols, l),
                T::zero(),
                &mut gw,
            );
            grads.push((self.w.clone(), gw));
        }
        if let Some(b) = &self.bias {
            if b.requires_grad() {
                let gb = (0..geo.o)
                    .map(|o| gmat[o * l..(o + 1) * l].iter().fold(T::zero(), |a, &v| a + v))
                    .collect();
                grads.push((b.clone(), gb));
            }
        }
        if self.x.requires_grad() {
            let mut gcols = vec![T::zero(); kk * l];
            gemm(
                kk,
                geo.o,
                l,
                MatRef::transposed(self.w.data(), kk),
                MatRef::row_major(&gmat, l),
                T::zero(),
                &mut gcols,
            );
            grads.push((self.x.clone(), col2im(&gcols, geo)));
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Cross-correlation of `N x C x H x W` input with `O x C x k x k` weights.
    pub fn conv2d(
        &self,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(Error::shape("conv2d bias", b.shape(), &ws[..1]));
            }
        }
        let k = ws[2];
        let (oh, ow) = match (
            conv_out_len(xs[2], k, stride, pad),
            conv_out_len(xs[3], k, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::InvalidShape(format!(
                    "kernel {k}x{k} (stride {stride}, pad {pad}) does not fit input {xs:?}"
                )))
            }
        };
        let geo = Geometry {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let cols = im2col(self.data(), &geo);
        let l = geo.cols();
        let mut omat = vec![T::zero(); geo.o * l];
        gemm(
            geo.o,
            geo.rows(),
            l,
            MatRef::row_major(w.data(), geo.rows()),
            MatRef::row_major(&cols, l),
            T::zero(),
            &mut omat,
        );
        let plane = oh * ow;
        let mut out = vec![T::zero(); geo.n * geo.o * plane];
        for n in 0..geo.n {
            for o in 0..geo.o {
                let b = bias.map_or(T::zero(), |b| b.data()[o]);
                let src = &omat[o * l + n * plane..o * l + (n + 1) * plane];
                let dst = &mut out[(n * geo.o + o) * plane..(n * geo.o + o + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let needs_cols = w.requires_grad();
        Ok(Tensor::from_op(
            vec![geo.n, geo.o, oh, ow],
            out,
            super::ops::Op::Conv2d(ConvSaved {
                x: self.clone(),
                w: w.clone(),
                bias: bias.cloned(),
                geo,
                cols: if needs_cols { cols } else { Vec::new() },
            }),
        ))
    }
}
