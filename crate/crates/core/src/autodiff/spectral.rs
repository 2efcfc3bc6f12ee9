//! Differentiable inverse STFT. The forward pass is the same linear map as
//! [`crate::stft::istft`]; the backward pass applies its adjoint.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{Graph, Grads, Tensor, Var};
use crate::error::{Error, Result};
use crate::stft::{StftConfig, NORMALIZER_EPS};

struct Synthesis {
    cfg: StftConfig,
    n_frames: usize,
    source_len: usize,
    window: Vec<f64>,
    /// Reciprocal of the overlap-add normalizer, zero where uncovered.
    inv_norm: Vec<f64>,
    ifft: Arc<dyn Fft<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl Synthesis {
    fn new(cfg: StftConfig, n_frames: usize, source_len: usize) -> Self {
        let mut planner = FftPlanner::new();
        let norm = cfg.overlap_normalizer(n_frames);
        Self {
            cfg,
            n_frames,
            source_len,
            window: cfg.window.coefficients(cfg.frame_len),
            inv_norm: norm[..source_len]
                .iter()
                .map(|&v| if v >= NORMALIZER_EPS { 1.0 / v } else { 0.0 })
                .collect(),
            ifft: planner.plan_fft_inverse(cfg.frame_len),
            fft: planner.plan_fft_forward(cfg.frame_len),
        }
    }

    /// `ri`: `frames × bins × 2` → `source_len` samples.
    fn forward(&self, ri: &[f64], out: &mut [f64]) {
        let n = self.cfg.frame_len;
        let k = self.cfg.n_bins;
        let mut acc = vec![0.0; self.cfg.span(self.n_frames)];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for l in 0..self.n_frames {
            let frame = &ri[l * k * 2..(l + 1) * k * 2];
            for (m, slot) in buf.iter_mut().enumerate() {
                *slot = if m < k {
                    Complex64::new(frame[2 * m], frame[2 * m + 1])
                } else {
                    Complex64::new(frame[2 * (n - m)], -frame[2 * (n - m) + 1])
                };
            }
            buf[0].im = 0.0;
            if n % 2 == 0 {
                buf[n / 2].im = 0.0;
            }
            self.ifft.process(&mut buf);
            let start = l * self.cfg.hop_len;
            for m in 0..n {
                acc[start + m] += buf[m].re / n as f64 * self.window[m];
            }
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = acc[i] * self.inv_norm[i];
        }
    }

    /// Adjoint: time-domain gradient → `frames × bins × 2` gradient (added).
    fn adjoint(&self, grad: &[f64], dri: &mut [f64]) {
        let n = self.cfg.frame_len;
        let k = self.cfg.n_bins;
        let mut scaled = vec![0.0; self.cfg.span(self.n_frames)];
        for i in 0..self.source_len {
            scaled[i] = grad[i] * self.inv_norm[i];
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for l in 0..self.n_frames {
            let start = l * self.cfg.hop_len;
            for (m, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(scaled[start + m] * self.window[m], 0.0);
            }
            self.fft.process(&mut buf);
            let frame = &mut dri[l * k * 2..(l + 1) * k * 2];
            for m in 0..k {
                let edge = m == 0 || (n % 2 == 0 && m == n / 2);
                let c = if edge { 1.0 } else { 2.0 } / n as f64;
                frame[2 * m] += c * buf[m].re;
                if !edge {
                    frame[2 * m + 1] += c * buf[m].im;
                }
            }
        }
    }
}

impl Graph {
    /// Inverse STFT inside the graph. `ri` is `L×K×2` (output `S`) or
    /// `N×L×K×2` (output `N×S`), with `S = source_len`.
    pub fn istft_layer(&mut self, ri: Var, cfg: &StftConfig, source_len: usize) -> Result<Var> {
        self.check(ri)?;
        cfg.validate()?;
        let shape = self.shape(ri).to_vec();
        let (batch, frames, bins, batched) = match shape[..] {
            [l, k, 2] => (1, l, k, false),
            [nb, l, k, 2] => (nb, l, k, true),
            _ => {
                return Err(Error::shape(format!(
                    "istft_layer expects [L, K, 2] or [N, L, K, 2], got {shape:?}"
                )))
            }
        };
        if bins != cfg.n_bins || frames == 0 {
            return Err(Error::shape(format!(
                "istft_layer got {frames} frames x {bins} bins, config has {} bins",
                cfg.n_bins
            )));
        }
        if source_len > cfg.span(frames) {
            return Err(Error::shape(format!(
                "source_len {source_len} exceeds span of {frames} frames"
            )));
        }
        let synth = Arc::new(Synthesis::new(*cfg, frames, source_len));
        let per_in = frames * bins * 2;
        let src = self.data(ri.idx);
        let mut out = vec![0.0; batch * source_len];
        for b in 0..batch {
            synth.forward(
                &src[b * per_in..(b + 1) * per_in],
                &mut out[b * source_len..(b + 1) * source_len],
            );
        }
        let out_shape = if batched {
            vec![batch, source_len]
        } else {
            vec![source_len]
        };
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.record(
            value,
            &[ri],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                if let Some(gx) = grads.slot(g, ri) {
                    for b in 0..batch {
                        synth.adjoint(
                            &grad[b * source_len..(b + 1) * source_len],
                            &mut gx[b * per_in..(b + 1) * per_in],
                        );
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
    fn zero_input_zero_output_and_gradient() {
        let cfg = StftConfig::default();
        let mut g = Graph::new();
        let ri = g.input(Tensor::zeros(&[3, 257, 2]));
        let y = g.istft_layer(ri, &cfg, 1000).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let sq = g.square(y);
        let loss = g.sum(sq);
        let grads = g.backward(loss, &mut ParamStore::new(Precision::F64)).unwrap();
        assert!(grads.get(ri).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_bins_rejected() {
        let mut g = Graph::new();
        let ri = g.input(Tensor::zeros(&[3, 256, 2]));
        assert!(matches!(
            g.istft_layer(ri, &StftConfig::default(), 100),
            Err(Error::Shape(_))
        ));
    }
}
