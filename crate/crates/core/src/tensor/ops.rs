use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Op, Result, Tensor, TensorError};

type Shape = (usize, usize);

fn broadcast(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(TensorError::ShapeMismatch { op, lhs: a, rhs: b }),
    }
}

/// Flat index into an operand of shape `s` broadcast to the output.
#[inline]
fn bidx(s: Shape, i: usize, j: usize) -> usize {
    let r = if s.0 == 1 { 0 } else { i };
    let c = if s.1 == 1 { 0 } else { j };
    r * s.1 + c
}

/// Sums a gradient of shape `out` down to the broadcast operand shape `s`.
fn reduce_to(g: &[f64], out: Shape, s: Shape) -> Vec<f64> {
    if out == s {
        return g.to_vec();
    }
    let mut r = vec![0.0; s.0 * s.1];
    for i in 0..out.0 {
        for j in 0..out.1 {
            r[bidx(s, i, j)] += g[i * out.1 + j];
        }
    }
    r
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    // `a` is stored as m×k (or k×m when transposed); likewise `b`.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn stable_softmax(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn unary(&self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.rows(), self.cols(), data, op, vec![self.clone()], name)
    }

    fn binary(&self, other: &Tensor, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let out = broadcast(name, sa, sb)?;
        let (a, b) = (self.data(), other.data());
        let data = if sa == sb {
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut d = Vec::with_capacity(out.0 * out.1);
            for i in 0..out.0 {
                for j in 0..out.1 {
                    d.push(f(a[bidx(sa, i, j)], b[bidx(sb, i, j)]));
                }
            }
            d
        };
        drop((a, b));
        Tensor::from_op(out.0, out.1, data, op, vec![self.clone(), other.clone()], name)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let ((m, k), (k2, n)) = (self.shape(), other.shape());
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: (m, k), rhs: (k2, n) });
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), false, &other.data(), false, &mut c);
        Tensor::from_op(m, n, c, Op::MatMul, vec![self.clone(), other.clone()], "matmul")
    }

    /// Elementwise sum with row/column broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.unary(Op::Scale(s), "scale", |v| v * s)
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::InvalidArgument { op: "concat", reason: "no inputs".into() })?;
        match axis {
            0 => {
                let cols = first.cols();
                let mut data = Vec::new();
                for p in parts {
                    if p.cols() != cols {
                        return Err(TensorError::ShapeMismatch { op: "concat", lhs: first.shape(), rhs: p.shape() });
                    }
                    data.extend_from_slice(&p.data());
                }
                let rows = data.len() / cols;
                let sizes = parts.iter().map(Tensor::rows).collect();
                Tensor::from_op(rows, cols, data, Op::Concat { axis, sizes }, parts.to_vec(), "concat")
            }
            1 => {
                let rows = first.rows();
                if let Some(p) = parts.iter().find(|p| p.rows() != rows) {
                    return Err(TensorError::ShapeMismatch { op: "concat", lhs: first.shape(), rhs: p.shape() });
                }
                let cols: usize = parts.iter().map(Tensor::cols).sum();
                let mut data = Vec::with_capacity(rows * cols);
                let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
                for i in 0..rows {
                    for (p, v) in parts.iter().zip(&views) {
                        data.extend_from_slice(&v[i * p.cols()..(i + 1) * p.cols()]);
                    }
                }
                drop(views);
                let sizes = parts.iter().map(Tensor::cols).collect();
                Tensor::from_op(rows, cols, data, Op::Concat { axis, sizes }, parts.to_vec(), "concat")
            }
            _ => Err(TensorError::InvalidAxis { op: "concat", axis }),
        }
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(TensorError::InvalidAxis { op: "slice", axis }),
        };
        if len == 0 || start + len > extent {
            return Err(TensorError::IndexOutOfRange { op: "slice", index: start + len, len: extent });
        }
        let d = self.data();
        let (rows, cols, data) = if axis == 0 {
            (len, c, d[start * c..(start + len) * c].to_vec())
        } else {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&d[i * c + start..i * c + start + len]);
            }
            (r, len, out)
        };
        drop(d);
        Tensor::from_op(rows, cols, data, Op::Slice { axis, start }, vec![self.clone()], "slice")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        let d = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        drop(d);
        Tensor::from_op(c, r, out, Op::Transpose, vec![self.clone()], "transpose")
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let name = if mean { "mean" } else { "sum" };
        let (r, c) = self.shape();
        let d = self.data();
        let (rows, cols, mut out, count) = match axis {
            None => (1, 1, vec![d.iter().sum::<f64>()], (r * c) as f64),
            Some(0) => {
                let mut s = vec![0.0; c];
                for i in 0..r {
                    s.iter_mut().zip(&d[i * c..(i + 1) * c]).for_each(|(a, b)| *a += b);
                }
                (1, c, s, r as f64)
            }
            Some(1) => (r, 1, d.chunks(c).map(|row| row.iter().sum()).collect(), c as f64),
            Some(axis) => return Err(TensorError::InvalidAxis { op: name, axis }),
        };
        drop(d);
        if mean {
            out.iter_mut().for_each(|v| *v /= count);
        }
        let op = if mean { Op::Mean { axis } } else { Op::Sum { axis } };
        Tensor::from_op(rows, cols, out, op, vec![self.clone()], name)
    }

    /// Sum over all elements (`None`), rows (`Some(0)`) or columns (`Some(1)`).
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(axis, false)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(axis, true)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Op::Exp, "exp", f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(Op::Log, "log", f64::ln)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Op::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(Op::Tanh, "tanh", f64::tanh)
    }

    pub fn elu(&self, alpha: f64) -> Result<Tensor> {
        self.unary(Op::Elu(alpha), "elu", move |v| if v > 0.0 { v } else { alpha * v.exp_m1() })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        self.unary(Op::LeakyRelu(slope), "leaky_relu", move |v| if v > 0.0 { v } else { slope * v })
    }

    /// Elementwise `x^p` for non-negative `x`.
    pub fn pow(&self, p: f64) -> Result<Tensor> {
        if self.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::InvalidArgument { op: "pow", reason: "negative base".into() });
        }
        self.unary(Op::Pow(p), "pow", move |v| v.powf(p))
    }

    fn softmax_impl(&self, axis: usize, log: bool) -> Result<Tensor> {
        let name = if log { "log_softmax" } else { "softmax" };
        if axis > 1 {
            return Err(TensorError::InvalidAxis { op: name, axis });
        }
        let src = if axis == 1 { self.to_vec() } else { self.transpose()?.to_vec() };
        let (r, c) = if axis == 1 { self.shape() } else { (self.cols(), self.rows()) };
        let mut out = src.clone();
        for (row, orig) in out.chunks_mut(c).zip(src.chunks(c)) {
            if log {
                let max = orig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + orig.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().zip(orig).for_each(|(o, v)| *o = v - lse);
            } else {
                stable_softmax(row);
            }
        }
        let data = if axis == 1 { out } else { transpose_vec(&out, r, c) };
        let op = if log { Op::LogSoftmax { axis } } else { Op::Softmax { axis } };
        Tensor::from_op(self.rows(), self.cols(), data, op, vec![self.clone()], name)
    }

    /// Softmax along `axis` (1: within each row, 0: within each column).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.softmax_impl(axis, true)
    }

    /// Inverted dropout. Identity when not training; otherwise zeroes each
    /// element with probability `rate` and scales survivors by `1/(1-rate)`.
    pub fn dropout(&self, rate: f64, training: bool, seed: u64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument { op: "dropout", reason: format!("rate {rate} outside [0, 1)") });
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Tensor::from_op(self.rows(), self.cols(), data, Op::Mask(mask), vec![self.clone()], "dropout")
    }

    /// Multiplies by a fixed elementwise mask (no gradient to the mask).
    pub fn mask(&self, mask: Vec<f64>) -> Result<Tensor> {
        if mask.len() != self.len() {
            return Err(TensorError::ShapeMismatch { op: "mask", lhs: self.shape(), rhs: (mask.len(), 1) });
        }
        let data = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Tensor::from_op(self.rows(), self.cols(), data, Op::Mask(mask), vec![self.clone()], "mask")
    }

    /// Row `idx[i]` of `self` becomes row `i` of the output.
    pub fn gather_rows(&self, idx: &Rc<Vec<usize>>) -> Result<Tensor> {
        let (r, c) = self.shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: bad, len: r });
        }
        if idx.is_empty() {
            return Err(TensorError::InvalidArgument { op: "gather_rows", reason: "empty index".into() });
        }
        let d = self.data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        drop(d);
        Tensor::from_op(idx.len(), c, out, Op::GatherRows(idx.clone()), vec![self.clone()], "gather_rows")
    }

    /// Adds row `i` of `self` into row `idx[i]` of an `out_rows × cols` zero matrix.
    pub fn scatter_add_rows(&self, idx: &Rc<Vec<usize>>, out_rows: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        if idx.len() != r {
            return Err(TensorError::ShapeMismatch { op: "scatter_add_rows", lhs: (r, c), rhs: (idx.len(), 1) });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(TensorError::IndexOutOfRange { op: "scatter_add_rows", index: bad, len: out_rows });
        }
        let d = self.data();
        let mut out = vec![0.0; out_rows * c];
        for (i, &t) in idx.iter().enumerate() {
            out[t * c..(t + 1) * c].iter_mut().zip(&d[i * c..(i + 1) * c]).for_each(|(o, v)| *o += v);
        }
        drop(d);
        Tensor::from_op(out_rows, c, out, Op::ScatterAddRows(idx.clone()), vec![self.clone()], "scatter_add_rows")
    }

    /// Column-wise softmax over groups of rows sharing a segment id.
    pub fn segment_softmax(&self, segments: &Rc<Vec<usize>>) -> Result<Tensor> {
        let (r, c) = self.shape();
        if segments.len() != r {
            return Err(TensorError::ShapeMismatch { op: "segment_softmax", lhs: (r, c), rhs: (segments.len(), 1) });
        }
        let nseg = segments.iter().max().map_or(0, |m| m + 1);
        let d = self.data();
        let mut max = vec![f64::NEG_INFINITY; nseg * c];
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..c {
                max[s * c + j] = max[s * c + j].max(d[i * c + j]);
            }
        }
        let mut out = vec![0.0; r * c];
        let mut sum = vec![0.0; nseg * c];
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let e = (d[i * c + j] - max[s * c + j]).exp();
                out[i * c + j] = e;
                sum[s * c + j] += e;
            }
        }
        drop(d);
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] /= sum[s * c + j];
            }
        }
        Tensor::from_op(r, c, out, Op::SegmentSoftmax(segments.clone()), vec![self.clone()], "segment_softmax")
    }

    /// Per-head dot product: `out[i, h] = Σ_k x[i, h·D + k] · a[h, k]` for
    /// `x: n × (H·D)` and `a: H × D`.
    pub fn head_dot(&self, a: &Tensor) -> Result<Tensor> {
        let (n, hd) = self.shape();
        let (heads, d) = a.shape();
        if heads * d != hd {
            return Err(TensorError::ShapeMismatch { op: "head_dot", lhs: (n, hd), rhs: (heads, d) });
        }
        let (x, av) = (self.data(), a.data());
        let mut out = vec![0.0; n * heads];
        for i in 0..n {
            for h in 0..heads {
                let row = &x[i * hd + h * d..i * hd + (h + 1) * d];
                out[i * heads + h] = row.iter().zip(&av[h * d..(h + 1) * d]).map(|(p, q)| p * q).sum();
            }
        }
        drop((x, av));
        Tensor::from_op(n, heads, out, Op::HeadDot { heads }, vec![self.clone(), a.clone()], "head_dot")
    }

    /// Scales each head block: `out[e, h·D + k] = m[e, h·D + k] · alpha[e, h]`.
    pub fn head_scale(&self, alpha: &Tensor) -> Result<Tensor> {
        let (e, hd) = self.shape();
        let (e2, heads) = alpha.shape();
        if e != e2 || heads == 0 || hd % heads != 0 {
            return Err(TensorError::ShapeMismatch { op: "head_scale", lhs: (e, hd), rhs: (e2, heads) });
        }
        let d = hd / heads;
        let (m, a) = (self.data(), alpha.data());
        let mut out = vec![0.0; e * hd];
        for i in 0..e {
            for h in 0..heads {
                let s = a[i * heads + h];
                for k in 0..d {
                    out[i * hd + h * d + k] = m[i * hd + h * d + k] * s;
                }
            }
        }
        drop((m, a));
        Tensor::from_op(e, hd, out, Op::HeadScale { heads }, vec![self.clone(), alpha.clone()], "head_scale")
    }

    /// Averages the `heads` column blocks of width `D`: `n × (H·D) → n × D`.
    pub fn head_mean(&self, heads: usize) -> Result<Tensor> {
        let (n, hd) = self.shape();
        if heads == 0 || hd % heads != 0 {
            return Err(TensorError::InvalidArgument { op: "head_mean", reason: format!("{hd} columns not divisible into {heads} heads") });
        }
        let d = hd / heads;
        let x = self.data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for h in 0..heads {
                for k in 0..d {
                    out[i * d + k] += x[i * hd + h * d + k];
                }
            }
        }
        drop(x);
        out.iter_mut().for_each(|v| *v /= heads as f64);
        Tensor::from_op(n, d, out, Op::HeadMean { heads }, vec![self.clone()], "head_mean")
    }
}

fn transpose_vec(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

/// Gradients for each parent of `t` given `g = ∂L/∂t`.
pub(super) fn backward(op: &Op, t: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let parents = &t.0.parents;
    let out = t.data();
    let pa = || parents[0].data();
    let (r, c) = t.shape();
    match op {
        Op::MatMul => {
            let (a, b) = (&parents[0], &parents[1]);
            let (m, k) = a.shape();
            let n = b.cols();
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, &b.data(), true, &mut ga);
                ga
            });
            let gb = b.requires_grad().then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, &a.data(), true, g, false, &mut gb);
                gb
            });
            vec![ga, gb]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            let (sa, sb) = (a.shape(), b.shape());
            let ga = a.requires_grad().then(|| match op {
                Op::Mul => {
                    let bd = b.data();
                    let mut full = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            full[i * c + j] = g[i * c + j] * bd[bidx(sb, i, j)];
                        }
                    }
                    reduce_to(&full, (r, c), sa)
                }
                _ => reduce_to(g, (r, c), sa),
            });
            let gb = b.requires_grad().then(|| match op {
                Op::Mul => {
                    let ad = a.data();
                    let mut full = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            full[i * c + j] = g[i * c + j] * ad[bidx(sa, i, j)];
                        }
                    }
                    reduce_to(&full, (r, c), sb)
                }
                Op::Sub => reduce_to(&g.iter().map(|v| -v).collect::<Vec<_>>(), (r, c), sb),
                _ => reduce_to(g, (r, c), sb),
            });
            vec![ga, gb]
        }
        Op::Scale(s) => vec![Some(g.iter().map(|v| v * s).collect())],
        Op::Concat { axis, sizes } => {
            let mut grads = Vec::with_capacity(sizes.len());
            let mut offset = 0;
            for (p, &size) in parents.iter().zip(sizes) {
                let pg = p.requires_grad().then(|| {
                    if *axis == 0 {
                        g[offset * c..(offset + size) * c].to_vec()
                    } else {
                        let mut v = Vec::with_capacity(r * size);
                        for i in 0..r {
                            v.extend_from_slice(&g[i * c + offset..i * c + offset + size]);
                        }
                        v
                    }
                });
                grads.push(pg);
                offset += size;
            }
            grads
        }
        Op::Slice { axis, start } => {
            let (pr, pc) = parents[0].shape();
            let mut pg = vec![0.0; pr * pc];
            if *axis == 0 {
                pg[start * pc..(start + r) * pc].copy_from_slice(g);
            } else {
                for i in 0..r {
                    pg[i * pc + start..i * pc + start + c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
            }
            vec![Some(pg)]
        }
        Op::Transpose => vec![Some(transpose_vec(g, r, c))],
        Op::Sum { axis } | Op::Mean { axis } => {
            let (pr, pc) = parents[0].shape();
            let scale = match (op, axis) {
                (Op::Mean { .. }, None) => 1.0 / (pr * pc) as f64,
                (Op::Mean { .. }, Some(0)) => 1.0 / pr as f64,
                (Op::Mean { .. }, Some(_)) => 1.0 / pc as f64,
                _ => 1.0,
            };
            let mut pg = vec![0.0; pr * pc];
            for i in 0..pr {
                for j in 0..pc {
                    let gi = match axis {
                        None => 0,
                        Some(0) => j,
                        Some(_) => i,
                    };
                    pg[i * pc + j] = g[gi] * scale;
                }
            }
            vec![Some(pg)]
        }
        Op::Exp => vec![Some(g.iter().zip(out.iter()).map(|(g, y)| g * y).collect())],
        Op::Log => vec![Some(g.iter().zip(pa().iter()).map(|(g, x)| g / x).collect())],
        Op::Sigmoid => vec![Some(g.iter().zip(out.iter()).map(|(g, y)| g * y * (1.0 - y)).collect())],
        Op::Tanh => vec![Some(g.iter().zip(out.iter()).map(|(g, y)| g * (1.0 - y * y)).collect())],
        Op::Elu(alpha) => vec![Some(
            g.iter()
                .zip(pa().iter())
                .zip(out.iter())
                .map(|((g, &x), &y)| if x > 0.0 { *g } else { g * (y + alpha) })
                .collect(),
        )],
        Op::LeakyRelu(slope) => {
            vec![Some(g.iter().zip(pa().iter()).map(|(g, &x)| if x > 0.0 { *g } else { g * slope }).collect())]
        }
        Op::Pow(p) => vec![Some(
            g.iter()
                .zip(pa().iter())
                .map(|(g, &x)| if x == 0.0 && *p < 1.0 { 0.0 } else { g * p * x.powf(p - 1.0) })
                .collect(),
        )],
        Op::Softmax { axis } | Op::LogSoftmax { axis } => {
            let log = matches!(op, Op::LogSoftmax { .. });
            // Work row-wise on the softmax axis.
            let (gv, yv, rr, cc) = if *axis == 1 {
                (g.to_vec(), out.to_vec(), r, c)
            } else {
                (transpose_vec(g, r, c), transpose_vec(&out, r, c), c, r)
            };
            let mut pg = vec![0.0; rr * cc];
            for i in 0..rr {
                let gr = &gv[i * cc..(i + 1) * cc];
                let yr = &yv[i * cc..(i + 1) * cc];
                if log {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..cc {
                        pg[i * cc + j] = gr[j] - yr[j].exp() * gsum;
                    }
                } else {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..cc {
                        pg[i * cc + j] = yr[j] * (gr[j] - dot);
                    }
                }
            }
            let pg = if *axis == 1 { pg } else { transpose_vec(&pg, rr, cc) };
            vec![Some(pg)]
        }
        Op::Mask(mask) => vec![Some(g.iter().zip(mask).map(|(g, m)| g * m).collect())],
        Op::GatherRows(idx) => {
            let pr = parents[0].rows();
            let mut pg = vec![0.0; pr * c];
            for (i, &s) in idx.iter().enumerate() {
                pg[s * c..(s + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(p, v)| *p += v);
            }
            vec![Some(pg)]
        }
        Op::ScatterAddRows(idx) => {
            let mut pg = Vec::with_capacity(idx.len() * c);
            for &t in idx.iter() {
                pg.extend_from_slice(&g[t * c..(t + 1) * c]);
            }
            vec![Some(pg)]
        }
        Op::SegmentSoftmax(segments) => {
            let nseg = segments.iter().max().map_or(0, |m| m + 1);
            let mut dot = vec![0.0; nseg * c];
            for (i, &s) in segments.iter().enumerate() {
                for j in 0..c {
                    dot[s * c + j] += g[i * c + j] * out[i * c + j];
                }
            }
            let mut pg = vec![0.0; r * c];
            for (i, &s) in segments.iter().enumerate() {
                for j in 0..c {
                    pg[i * c + j] = out[i * c + j] * (g[i * c + j] - dot[s * c + j]);
                }
            }
            vec![Some(pg)]
        }
        Op::HeadDot { heads } => {
            let (x, a) = (&parents[0], &parents[1]);
            let (n, hd) = x.shape();
            let d = hd / heads;
            let (xv, av) = (x.data(), a.data());
            let gx = x.requires_grad().then(|| {
                let mut gx = vec![0.0; n * hd];
                for i in 0..n {
                    for h in 0..*heads {
                        let gi = g[i * heads + h];
                        for k in 0..d {
                            gx[i * hd + h * d + k] = gi * av[h * d + k];
                        }
                    }
                }
                gx
            });
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![0.0; heads * d];
                for i in 0..n {
                    for h in 0..*heads {
                        let gi = g[i * heads + h];
                        for k in 0..d {
                            ga[h * d + k] += gi * xv[i * hd + h * d + k];
                        }
                    }
                }
                ga
            });
            vec![gx, ga]
        }
        Op::HeadScale { heads } => {
            let (m, alpha) = (&parents[0], &parents[1]);
            let (e, hd) = m.shape();
            let d = hd / heads;
            let (mv, av) = (m.data(), alpha.data());
            let gm = m.requires_grad().then(|| {
                let mut gm = vec![0.0; e * hd];
                for i in 0..e {
                    for h in 0..*heads {
                        let s = av[i * heads + h];
                        for k in 0..d {
                            gm[i * hd + h * d + k] = g[i * hd + h * d + k] * s;
                        }
                    }
                }
                gm
            });
            let ga = alpha.requires_grad().then(|| {
                let mut ga = vec![0.0; e * heads];
                for i in 0..e {
                    for h in 0..*heads {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += g[i * hd + h * d + k] * mv[i * hd + h * d + k];
                        }
                        ga[i * heads + h] = acc;
                    }
                }
                ga
            });
            vec![gm, ga]
        }
        Op::HeadMean { heads } => {
            let (n, hd) = parents[0].shape();
            let d = hd / heads;
            let inv = 1.0 / *heads as f64;
            let mut pg = vec![0.0; n * hd];
            for i in 0..n {
                for h in 0..*heads {
                    for k in 0..d {
                        pg[i * hd + h * d + k] = g[i * d + k] * inv;
                    }
                }
            }
            vec![Some(pg)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::constant(rows, cols, data.to_vec()).unwrap()
    }

    fn p(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::param(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = t(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        assert_eq!(Tensor::identity(3).matmul(&a).unwrap().to_vec(), a.to_vec());
        assert!(matches!(a.matmul(&t(2, 2, &[1.; 4])), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_symmetric() {
        assert_eq!(t(1, 2, &[0., 0.]).softmax(1).unwrap().to_vec(), vec![0.5, 0.5]);
        assert!(matches!(t(1, 2, &[0., 0.]).softmax(2), Err(TensorError::InvalidAxis { .. })));
        // column softmax
        let s = t(2, 1, &[0., 0.]).softmax(0).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let x = p(1, 1, &[3.0]);
        x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let w = p(2, 3, &[0.5, -1., 2., 3., 0., 1.]);
        w.sum(None).unwrap().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let x = p(1, 4, &[0.0; 4]);
        x.sigmoid().unwrap().sum(None).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = p(1, 2, &[1., 2.]);
        assert!(matches!(x.exp().unwrap().backward(), Err(TensorError::NonScalarLoss((1, 2)))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = p(1, 3, &[0.1, 0.2, 0.3]);
        let y = x.tanh().unwrap();
        y.sum(None).unwrap().backward().unwrap();
        let single = x.grad().unwrap();
        x.zero_grad();
        let y = x.tanh().unwrap();
        y.sum(None).unwrap().add(&y.sum(None).unwrap()).unwrap().backward().unwrap();
        let double = x.grad().unwrap();
        for (s, d) in single.iter().zip(&double) {
            assert!((2.0 * s - d).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = p(1, 1, &[2.0]);
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = t(1, 1, &[0.0]);
        assert!(matches!(x.log(), Err(TensorError::NonFiniteValue { op: "log" })));
        assert!(Tensor::constant(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn broadcasting() {
        let a = t(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let row = t(1, 3, &[10., 20., 30.]);
        let col = t(2, 1, &[100., 200.]);
        assert_eq!(a.add(&row).unwrap().to_vec(), vec![11., 22., 33., 14., 25., 36.]);
        assert_eq!(a.add(&col).unwrap().to_vec(), vec![101., 102., 103., 204., 205., 206.]);
        assert!(a.add(&t(3, 1, &[0.; 3])).is_err());
    }

    #[test]
    fn dropout_modes() {
        let x = t(10, 10, &[1.0; 100]);
        let eval = x.dropout(0.2, false, 1).unwrap();
        assert!(eval.ptr_eq(&x));
        let train = x.dropout(0.2, true, 1).unwrap();
        assert!(train.to_vec().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
        assert_eq!(train.to_vec(), x.dropout(0.2, true, 1).unwrap().to_vec());
        assert!(x.dropout(1.0, true, 1).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let x = t(100, 100, &[1.0; 10_000]);
        let mean = x.dropout(0.2, true, 42).unwrap().mean(None).unwrap().item();
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let x = t(3, 2, &[1., 2., 3., 4., 5., 6.]);
        let idx = Rc::new(vec![2, 0, 2]);
        assert_eq!(x.gather_rows(&idx).unwrap().to_vec(), vec![5., 6., 1., 2., 5., 6.]);
        let s = x.scatter_add_rows(&idx, 3).unwrap();
        assert_eq!(s.to_vec(), vec![3., 4., 0., 0., 6., 8.]);
        assert!(x.gather_rows(&Rc::new(vec![3])).is_err());
    }

    #[test]
    fn segment_softmax_normalizes_groups() {
        let s = t(4, 2, &[1., 0., 2., 5., 3., -1., 0., 0.]);
        let seg = Rc::new(vec![0, 1, 0, 1]);
        let y = s.segment_softmax(&seg).unwrap();
        for col in 0..2 {
            assert!((y.get(0, col) + y.get(2, col) - 1.0).abs() < 1e-15);
            assert!((y.get(1, col) + y.get(3, col) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn head_ops() {
        let x = t(1, 4, &[1., 2., 3., 4.]);
        let a = t(2, 2, &[1., 1., 0., 2.]);
        assert_eq!(x.head_dot(&a).unwrap().to_vec(), vec![3., 8.]);
        let alpha = t(1, 2, &[2., 0.5]);
        assert_eq!(x.head_scale(&alpha).unwrap().to_vec(), vec![2., 4., 1.5, 2.]);
        assert_eq!(x.head_mean(2).unwrap().to_vec(), vec![2., 3.]);
    }
}
