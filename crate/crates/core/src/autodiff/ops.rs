use std::rc::Rc;

use super::tensor::strides;
use super::{Graph, Grads, Tensor, Var};
use crate::error::{Error, Result};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// For each flat index of `out_shape`, the flat index into `in_shape`
/// under numpy broadcasting (`in_shape` must broadcast to `out_shape`).
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let offset = out_shape.len() - in_shape.len();
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = (0..out_shape.len())
        .map(|i| {
            if i < offset || in_shape[i - offset] == 1 {
                0
            } else {
                in_strides[i - offset]
            }
        })
        .collect();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// Partial derivatives (d/da, d/db) at (a, b).
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (1.0, 1.0),
            BinOp::Sub => (1.0, -1.0),
            BinOp::Mul => (b, a),
            BinOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

impl Graph {
    fn binary(&mut self, a: Var, b: Var, op: BinOp) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let maps = if sa == sb {
            None
        } else {
            Some(Rc::new((
                broadcast_map(&out_shape, &sa),
                broadcast_map(&out_shape, &sb),
            )))
        };
        let (da, db) = (self.data(a.idx), self.data(b.idx));
        let data: Vec<f64> = match &maps {
            None => da.iter().zip(db).map(|(x, y)| op.apply(*x, *y)).collect(),
            Some(m) => m
                .0
                .iter()
                .zip(&m.1)
                .map(|(&i, &j)| op.apply(da[i], db[j]))
                .collect(),
        };
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.record(
            value,
            &[a, b],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                let (da, db) = (g.data(a.idx), g.data(b.idx));
                let n = grad.len();
                let idx = |k: usize, side: usize| match &maps {
                    None => k,
                    Some(m) => {
                        if side == 0 {
                            m.0[k]
                        } else {
                            m.1[k]
                        }
                    }
                };
                if let Some(ga) = grads.slot(g, a) {
                    for k in 0..n {
                        let (i, j) = (idx(k, 0), idx(k, 1));
                        ga[i] += grad[k] * op.partials(da[i], db[j]).0;
                    }
                }
                if let Some(gb) = grads.slot(g, b) {
                    for k in 0..n {
                        let (i, j) = (idx(k, 0), idx(k, 1));
                        gb[j] += grad[k] * op.partials(da[i], db[j]).1;
                    }
                }
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Div)
    }

    /// Elementwise map with derivative expressed through input and output.
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        let out_idx = self.nodes.len();
        self.record(
            value,
            &[x],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                let xs = g.data(x.idx);
                let ys = g.data(out_idx);
                if let Some(gx) = grads.slot(g, x) {
                    for i in 0..grad.len() {
                        gx[i] += grad[i] * df(xs[i], ys[i]);
                    }
                }
            }),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v >= 0.0 { v } else { slope * v },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| c * v, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.record(
            Tensor::scalar(total),
            &[x],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                if let Some(gx) = grads.slot(g, x) {
                    gx.iter_mut().for_each(|v| *v += grad[0]);
                }
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let in_shape = self.shape(x).to_vec();
        let mut out_shape = in_shape.clone();
        for &a in axes {
            if a >= in_shape.len() {
                return Err(Error::shape(format!(
                    "axis {a} out of range for {in_shape:?}"
                )));
            }
            out_shape[a] = 1;
        }
        let map = Rc::new(broadcast_map(&in_shape, &out_shape));
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &j) in self.data(x.idx).iter().zip(map.iter()) {
            out[j] += v;
        }
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                if let Some(gx) = grads.slot(g, x) {
                    for (d, &j) in gx.iter_mut().zip(map.iter()) {
                        *d += grad[j];
                    }
                }
            }),
        ))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                grads.add(g, x, grad);
            }),
        ))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        self.check(x)?;
        let in_shape = self.shape(x).to_vec();
        if a >= in_shape.len() || b >= in_shape.len() {
            return Err(Error::shape(format!(
                "transpose axes ({a}, {b}) out of range for {in_shape:?}"
            )));
        }
        let mut out_shape = in_shape.clone();
        out_shape.swap(a, b);
        let mut perm_strides = strides(&in_shape);
        perm_strides.swap(a, b);
        // Source index for each output position.
        let n: usize = out_shape.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        let mut pos = 0usize;
        for _ in 0..n {
            map.push(pos);
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                pos += perm_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                pos -= perm_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        let src = self.data(x.idx);
        let data = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(out_shape, data)?;
        let map = Rc::new(map);
        Ok(self.record(
            value,
            &[x],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                if let Some(gx) = grads.slot(g, x) {
                    for (k, &i) in map.iter().enumerate() {
                        gx[i] += grad[k];
                    }
                }
            }),
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (len_in, len_out) = (shape[axis], end - start);
        let src = self.data(x.idx);
        let mut data = Vec::with_capacity(outer * len_out * inner);
        for o in 0..outer {
            let base = o * len_in * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len_out;
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                if let Some(gx) = grads.slot(g, x) {
                    for o in 0..outer {
                        let dst = o * len_in * inner + start * inner;
                        let src = o * len_out * inner;
                        for i in 0..len_out * inner {
                            gx[dst + i] += grad[src + i];
                        }
                    }
                }
            }),
        ))
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("pad axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len_in = shape[axis];
        let len_out = len_in + before + after;
        let src = self.data(x.idx);
        let mut data = vec![0.0; outer * len_out * inner];
        for o in 0..outer {
            let dst = o * len_out * inner + before * inner;
            data[dst..dst + len_in * inner]
                .copy_from_slice(&src[o * len_in * inner..(o + 1) * len_in * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len_out;
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                if let Some(gx) = grads.slot(g, x) {
                    for o in 0..outer {
                        let src = o * len_out * inner + before * inner;
                        for i in 0..len_in * inner {
                            gx[o * len_in * inner + i] += grad[src + i];
                        }
                    }
                }
            }),
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        for &x in xs {
            self.check(x)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} of {base:?}")));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat of {:?} with {:?} on axis {axis}",
                    base, s
                )));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&lens) {
                let src = self.data(x.idx);
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let value = Tensor::from_vec(out_shape, data)?;
        let parts: Vec<(Var, usize)> = xs.iter().copied().zip(lens).collect();
        Ok(self.record(
            value,
            xs,
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                let mut offset = 0;
                for &(x, len) in &parts {
                    if let Some(gx) = grads.slot(g, x) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for i in 0..len * inner {
                                gx[o * len * inner + i] += grad[src + i];
                            }
                        }
                    }
                    offset += len;
                }
            }),
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let src = self.data(x.idx);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let out_idx = self.nodes.len();
        Ok(self.record(
            value,
            &[x],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                let y = g.data(out_idx);
                if let Some(gx) = grads.slot(g, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| grad[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] += y[at(k)] * (grad[at(k)] - dot);
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Matrix product. Supports `(M,K)·(K,N)`, batched `(B,M,K)·(B,K,N)`
    /// and shared right operand `(B,M,K)·(K,N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, b_batched) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, false),
            ([bt, m, k], [bt2, k2, n]) if bt == bt2 && k == k2 => (*bt, *m, *k, *n, true),
            ([bt, m, k], [k2, n]) if k == k2 => (*bt, *m, *k, *n, false),
            _ => {
                return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
            }
        };
        let (da, db) = (self.data(a.idx), self.data(b.idx));
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let boff = if b_batched { t * k * n } else { 0 };
            gemm(
                m,
                k,
                n,
                &da[t * m * k..],
                (k as isize, 1),
                &db[boff..],
                (n as isize, 1),
                &mut out[t * m * n..],
                1.0,
            );
        }
        let out_shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.record(
            value,
            &[a, b],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                let (da, db) = (g.data(a.idx), g.data(b.idx));
                if let Some(ga) = grads.slot(g, a) {
                    // dA = dC · Bᵀ
                    for t in 0..batch {
                        let boff = if b_batched { t * k * n } else { 0 };
                        gemm(
                            m,
                            n,
                            k,
                            &grad[t * m * n..],
                            (n as isize, 1),
                            &db[boff..],
                            (1, n as isize),
                            &mut ga[t * m * k..],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = grads.slot(g, b) {
                    // dB = Aᵀ · dC
                    for t in 0..batch {
                        let boff = if b_batched { t * k * n } else { 0 };
                        gemm(
                            k,
                            m,
                            n,
                            &da[t * m * k..],
                            (1, k as isize),
                            &grad[t * m * n..],
                            (n as isize, 1),
                            &mut gb[boff..],
                            1.0,
                        );
                    }
                }
            }),
        ))
    }

    /// Nearest-neighbour upsampling of axis 2 of an `N×C×F×T` tensor.
    pub fn upsample_freq(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        let [nb, c, f, t] = shape[..] else {
            return Err(Error::shape(format!("upsample expects N×C×F×T, got {shape:?}")));
        };
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let src = self.data(x.idx);
        let fo = f * factor;
        let mut out = vec![0.0; nb * c * fo * t];
        for plane in 0..nb * c {
            for fi in 0..f {
                let row = &src[(plane * f + fi) * t..(plane * f + fi + 1) * t];
                for r in 0..factor {
                    let dst = (plane * fo + fi * factor + r) * t;
                    out[dst..dst + t].copy_from_slice(row);
                }
            }
        }
        let value = Tensor::from_vec(vec![nb, c, fo, t], out)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                if let Some(gx) = grads.slot(g, x) {
                    for plane in 0..nb * c {
                        for fi in 0..f {
                            for r in 0..factor {
                                let src = (plane * fo + fi * factor + r) * t;
                                let dst = (plane * f + fi) * t;
                                for j in 0..t {
                                    gx[dst + j] += grad[src + j];
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Normalize an `N×C×F×T` tensor over `(C, F)` for every frame, then
    /// apply a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let shape = self.shape(x).to_vec();
        let [nb, c, f, t] = shape[..] else {
            return Err(Error::shape(format!("layer_norm expects N×C×F×T, got {shape:?}")));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "layer_norm affine params must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let m = (c * f) as f64;
        let src = self.data(x.idx);
        let (gm, bt) = (self.data(gamma.idx), self.data(beta.idx));
        let at = move |n: usize, ch: usize, fi: usize, ti: usize| ((n * c + ch) * f + fi) * t + ti;
        let mut stats = vec![(0.0, 0.0); nb * t];
        let mut out = vec![0.0; src.len()];
        for n in 0..nb {
            let mut sum = vec![0.0; t];
            let mut sq = vec![0.0; t];
            for ch in 0..c {
                for fi in 0..f {
                    let row = &src[at(n, ch, fi, 0)..at(n, ch, fi, 0) + t];
                    for (ti, v) in row.iter().enumerate() {
                        sum[ti] += v;
                    }
                }
            }
            let means: Vec<f64> = sum.iter().map(|s| s / m).collect();
            for ch in 0..c {
                for fi in 0..f {
                    let row = &src[at(n, ch, fi, 0)..at(n, ch, fi, 0) + t];
                    for (ti, v) in row.iter().enumerate() {
                        sq[ti] += (v - means[ti]).powi(2);
                    }
                }
            }
            for ti in 0..t {
                stats[n * t + ti] = (means[ti], 1.0 / (sq[ti] / m + eps).sqrt());
            }
            for ch in 0..c {
                for fi in 0..f {
                    let base = at(n, ch, fi, 0);
                    for ti in 0..t {
                        let (mu, inv) = stats[n * t + ti];
                        out[base + ti] = gm[ch] * (src[base + ti] - mu) * inv + bt[ch];
                    }
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.record(
            value,
            &[x, gamma, beta],
            Box::new(move |g: &Graph, grad: &[f64], grads: &mut Grads| {
                let src = g.data(x.idx);
                let gm = g.data(gamma.idx);
                let xhat = |i: usize, n: usize, ti: usize| {
                    let (mu, inv) = stats[n * t + ti];
                    (src[i] - mu) * inv
                };
                if let Some(gg) = grads.slot(g, gamma) {
                    for n in 0..nb {
                        for ch in 0..c {
                            for fi in 0..f {
                                let base = at(n, ch, fi, 0);
                                for ti in 0..t {
                                    gg[ch] += grad[base + ti] * xhat(base + ti, n, ti);
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = grads.slot(g, beta) {
                    for n in 0..nb {
                        for ch in 0..c {
                            let base = at(n, ch, 0, 0);
                            gb[ch] += grad[base..base + f * t].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gx) = grads.slot(g, x) {
                    for n in 0..nb {
                        let mut s1 = vec![0.0; t];
                        let mut s2 = vec![0.0; t];
                        for ch in 0..c {
                            for fi in 0..f {
                                let base = at(n, ch, fi, 0);
                                for ti in 0..t {
                                    let dxh = grad[base + ti] * gm[ch];
                                    s1[ti] += dxh;
                                    s2[ti] += dxh * xhat(base + ti, n, ti);
                                }
                            }
                        }
                        for ch in 0..c {
                            for fi in 0..f {
                                let base = at(n, ch, fi, 0);
                                for ti in 0..t {
                                    let inv = stats[n * t + ti].1;
                                    let dxh = grad[base + ti] * gm[ch];
                                    gx[base + ti] += inv / m
                                        * (m * dxh - s1[ti] - xhat(base + ti, n, ti) * s2[ti]);
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// `C += alpha · A·B` with `A: m×k`, `B: k×n`, `C: m×n` row-major; operand
/// strides given as (row, col).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    alpha: f64,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let a_need = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1 + 1;
    let b_need = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1 + 1;
    assert!(a.len() as isize >= a_need && b.len() as isize >= b_need && c.len() >= m * n);
    // SAFETY: bounds on all three operands are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
