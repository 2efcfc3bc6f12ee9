//! 2-D convolution over `N×C×F×T` feature maps via im2col + GEMM.
//!
//! Stride applies to the frequency axis only; the time axis always uses
//! stride 1 with 'same' padding so frame count is preserved.

use super::ops::gemm;
use super::{Graph, Grads, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    f_in: usize,
    t: usize,
    kf: usize,
    kt: usize,
    stride: usize,
    f_out: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.kf * self.kt
    }

    fn cols(&self) -> usize {
        self.f_out * self.t
    }

    /// Unfold one example into a `(C·kf·kt) × (F_out·T)` matrix.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (pf, pt) = (self.kf / 2, self.kt / 2);
        let cols = self.cols();
        for ci in 0..self.c_in {
            for i in 0..self.kf {
                for j in 0..self.kt {
                    let row = (ci * self.kf + i) * self.kt + j;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for fo in 0..self.f_out {
                        let fi = (fo * self.stride + i) as isize - pf as isize;
                        let out = &mut dst[fo * self.t..(fo + 1) * self.t];
                        if fi < 0 || fi >= self.f_in as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &x[(ci * self.f_in + fi as usize) * self.t..][..self.t];
                        for (to, o) in out.iter_mut().enumerate() {
                            let ti = to as isize + j as isize - pt as isize;
                            *o = if ti < 0 || ti >= self.t as isize {
                                0.0
                            } else {
                                src[ti as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-add columns back into `dx`.
    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let (pf, pt) = (self.kf / 2, self.kt / 2);
        let cols = self.cols();
        for ci in 0..self.c_in {
            for i in 0..self.kf {
                for j in 0..self.kt {
                    let row = (ci * self.kf + i) * self.kt + j;
                    let src = &col[row * cols..(row + 1) * cols];
                    for fo in 0..self.f_out {
                        let fi = (fo * self.stride + i) as isize - pf as isize;
                        if fi < 0 || fi >= self.f_in as isize {
                            continue;
                        }
                        let dst = &mut dx[(ci * self.f_in + fi as usize) * self.t..][..self.t];
                        let s = &src[fo * self.t..(fo + 1) * self.t];
                        for (to, v) in s.iter().enumerate() {
                            let ti = to as isize + j as isize - pt as isize;
                            if ti >= 0 && ti < self.t as isize {
                                dst[ti as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// `x: N×Cin×F×T`, `w: Cout×Cin×kf×kt` (odd sizes), `b: Cout`.
    /// Output is `N×Cout×ceil(F/stride)×T`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride_freq: usize) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let ([nb, c_in, f_in, t], [c_out, c_in_w, kf, kt]) = (&xs[..], &ws[..]) else {
            return Err(Error::shape(format!(
                "conv2d expects 4-D input and kernel, got {xs:?} and {ws:?}"
            )));
        };
        let (nb, c_in, f_in, t, c_out, kf, kt) = (*nb, *c_in, *f_in, *t, *c_out, *kf, *kt);
        if c_in != *c_in_w || self.shape(b) != [c_out] {
            return Err(Error::shape(format!(
                "conv2d input {xs:?}, kernel {ws:?}, bias {:?}",
                self.shape(b)
            )));
        }
        if kf % 2 == 0 || kt % 2 == 0 || stride_freq == 0 {
            return Err(Error::invalid(format!(
                "conv2d needs odd kernel sizes and positive stride, got {kf}x{kt} stride {stride_freq}"
            )));
        }
        let f_out = (f_in + 2 * (kf / 2) - kf) / stride_freq + 1;
        let geo = Geometry {
            c_in,
            f_in,
            t,
            kf,
            kt,
            stride: stride_freq,
            f_out,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let (xd, wd, bd) = (self.data(x.idx), self.data(w.idx), self.data(b.idx));
        let mut out = vec![0.0; nb * c_out * cols];
        let mut col = vec![0.0; rows * cols];
        for n in 0..nb {
            geo.im2col(&xd[n * c_in * f_in * t..(n + 1) * c_in * f_in * t], &mut col);
            let dst = &mut out[n * c_out * cols..(n + 1) * c_out * cols];
            for (co, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(bd[co]);
            }
            gemm(c_out, rows, cols, wd, (rows as isize, 1), &col, (cols as isize, 1), dst, 1.0);
        }
        let value = Tensor::from_vec(vec![nb, c_out, f_out, t], out)?;
        Ok(self.record(
            value,
            &[x, w, b],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                let (xd, wd) = (g.data(x.idx), g.data(w.idx));
                let per_in = c_in * f_in * t;
                let per_out = c_out * cols;
                if let Some(gb) = grads.slot(g, b) {
                    for n in 0..nb {
                        for (co, chunk) in grad[n * per_out..(n + 1) * per_out]
                            .chunks(cols)
                            .enumerate()
                        {
                            gb[co] += chunk.iter().sum::<f64>();
                        }
                    }
                }
                let mut col = vec![0.0; rows * cols];
                if grads.slot(g, w).is_some() {
                    for n in 0..nb {
                        geo.im2col(&xd[n * per_in..(n + 1) * per_in], &mut col);
                        let gw = grads.slot(g, w).expect("checked above");
                        // dW += dOut · colᵀ
                        gemm(
                            c_out,
                            cols,
                            rows,
                            &grad[n * per_out..],
                            (cols as isize, 1),
                            &col,
                            (1, cols as isize),
                            gw,
                            1.0,
                        );
                    }
                }
                if let Some(gx) = grads.slot(g, x) {
                    for n in 0..nb {
                        col.fill(0.0);
                        // dCol = Wᵀ · dOut
                        gemm(
                            rows,
                            c_out,
                            cols,
                            wd,
                            (1, rows as isize),
                            &grad[n * per_out..],
                            (cols as isize, 1),
                            &mut col,
                            1.0,
                        );
                        geo.col2im(&col, &mut gx[n * per_in..(n + 1) * per_in]);
                    }
                }
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamStore, Precision};

    #[test]
    fn identity_kernel_passes_through() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 8 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.input(Tensor::from_vec(vec![1, 2, 8, 5], data.clone()).unwrap());
        let mut k = vec![0.0; 2 * 2];
        k[0] = 1.0;
        k[3] = 1.0;
        let w = g.constant(Tensor::from_vec(vec![2, 2, 1, 1], k).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        let s = g.sum(y);
        let grads = g.backward(s, &mut ParamStore::new(Precision::F64)).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stride_halves_frequency() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 1, 16, 3]));
        let w = g.constant(Tensor::zeros(&[4, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, b, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 8, 3]);
    }

    #[test]
    fn matches_direct_convolution() {
        let (c_in, c_out, f, t) = (2, 3, 6, 4);
        let xd: Vec<f64> = (0..c_in * f * t).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let wd: Vec<f64> = (0..c_out * c_in * 9).map(|i| ((i * 5 % 7) as f64) * 0.1).collect();
        let bd = vec![0.5, -1.0, 2.0];
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1, c_in, f, t], xd.clone()).unwrap());
        let w = g.constant(Tensor::from_vec(vec![c_out, c_in, 3, 3], wd.clone()).unwrap());
        let b = g.constant(Tensor::from_vec(vec![c_out], bd.clone()).unwrap());
        let y = g.conv2d(x, w, b, 2).unwrap();
        let fo = 3;
        for co in 0..c_out {
            for fi in 0..fo {
                for ti in 0..t {
                    let mut acc = bd[co];
                    for ci in 0..c_in {
                        for i in 0..3 {
                            for j in 0..3 {
                                let ff = (fi * 2 + i) as isize - 1;
                                let tt = ti as isize + j as isize - 1;
                                if ff >= 0 && ff < f as isize && tt >= 0 && tt < t as isize {
                                    acc += wd[((co * c_in + ci) * 3 + i) * 3 + j]
                                        * xd[(ci * f + ff as usize) * t + tt as usize];
                                }
                            }
                        }
                    }
                    let got = g.value(y).data()[(co * fo + fi) * t + ti];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}
