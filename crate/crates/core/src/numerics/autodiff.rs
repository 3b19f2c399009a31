//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! [`Graph::backward`] walks the record in reverse and accumulates the
//! adjoint of each node. Nodes built only from constants are never
//! visited. A graph is private to one forward/backward pass.

use num_complex::Complex64;

use super::fft::{half_len, fft_real_1d, ifft_real_1d};
use super::kernels::{self, matmul_raw, sigmoid, softplus, standardize};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::ssd;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable value together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffValue {
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

impl DiffValue {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            requires_grad: true,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        Self {
            requires_grad: false,
            ..Self::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// matrix + row vector broadcast over rows
    AddRow(Var, Var),
    /// tensor minus a one-element tensor
    SubScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    /// exp(-softplus(x)) == sigmoid(-x)
    Decay(Var),
    /// indicator 1[x > 0], zero derivative
    Step,
    Sum(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Rfft(Var),
    Irfft(Var),
    ComplexPower(Var),
    ComplexScale(Var, Var),
    DivColMean(Var, f64),
    Ssd {
        x: Var,
        a: Var,
        b: Var,
        c: Var,
        groups: usize,
    },
    VecSim(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    fn zip_map(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{what}: shape mismatch");
        Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, "add", |p, q| p + q);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, "sub", |p, q| p - q);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, "mul", |p, q| p * q);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        let cols = xv.cols();
        assert_eq!(rv.len(), cols, "add_row: width mismatch");
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(cols) {
            for (o, &b) in chunk.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(v, Op::AddRow(x, row), &[x, row])
    }

    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "sub_scalar expects a one-element tensor");
        let sv = self.value(s).data()[0];
        let v = self.map(x, |p| p - sv);
        self.push(v, Op::SubScalar(x, s), &[x, s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = kernels::matmul(self.value(a), self.value(b)).expect("matmul shapes");
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.map(a, kernels::silu_scalar);
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.map(a, softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// `exp(-softplus(x))`, a decay in `(0, 1)`.
    pub fn decay(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| sigmoid(-x).max(f64::MIN_POSITIVE));
        self.push(v, Op::Decay(a), &[a])
    }

    pub fn step(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(v, Op::Step, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean over rows of an `L x C` matrix, giving `1 x C`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        self.push(Tensor::from_parts(vec![1, cols], out), Op::MeanRows(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = kernels::softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        assert!(g.len() == d && s.len() == d, "layer_norm: gain/shift width");
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let (h, inv) = standardize(xv.row(r), eps);
            xhat.extend(h);
            inv_std.push(inv);
        }
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + s[i % d])
            .collect();
        let v = Tensor::from_parts(vec![rows, d], out);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            &[x, gain, shift],
        )
    }

    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        let v = kernels::depthwise_conv1d(self.value(x), self.value(kernel), self.value(bias))
            .expect("conv shapes");
        self.push(v, Op::Conv1d { x, kernel, bias }, &[x, kernel, bias])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols: row count mismatch");
                out.extend_from_slice(pv.row(r));
            }
        }
        let v = Tensor::from_parts(vec![rows, total], out);
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows: width mismatch");
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(x.row(i));
        }
        let v = Tensor::from_parts(vec![index.len(), cols], out);
        self.push(v, Op::GatherRows(a, index.to_vec()), &[a])
    }

    /// Column-wise real FFT of `L x C`; the result has shape `[2, L', C]`
    /// holding the real plane followed by the imaginary plane.
    pub fn rfft_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (len, cols) = (x.rows(), x.cols());
        let half = half_len(len);
        let mut out = vec![0.0; 2 * half * cols];
        for c in 0..cols {
            let spec = fft_real_1d(&x.column(c)).expect("non-empty column");
            for (k, z) in spec.iter().enumerate() {
                out[k * cols + c] = z.re;
                out[(half + k) * cols + c] = z.im;
            }
        }
        self.push(
            Tensor::from_parts(vec![2, half, cols], out),
            Op::Rfft(a),
            &[a],
        )
    }

    /// Inverse of [`Graph::rfft_cols`] back to `len x C`.
    pub fn irfft_cols(&mut self, s: Var, len: usize) -> Var {
        let sv = self.value(s);
        let (half, cols) = split_planes(sv);
        assert_eq!(half, half_len(len), "irfft: bin count vs length");
        let mut out = vec![0.0; len * cols];
        for c in 0..cols {
            let spec: Vec<Complex64> = (0..half)
                .map(|k| Complex64::new(sv.data()[k * cols + c], sv.data()[(half + k) * cols + c]))
                .collect();
            let sig = ifft_real_1d(&spec, len).expect("consistent lengths");
            for (t, v) in sig.into_iter().enumerate() {
                out[t * cols + c] = v;
            }
        }
        self.push(Tensor::from_parts(vec![len, cols], out), Op::Irfft(s), &[s])
    }

    /// `re² + im²` of a `[2, L', C]` spectrum, giving `L' x C`.
    pub fn complex_power(&mut self, s: Var) -> Var {
        let sv = self.value(s);
        let (half, cols) = split_planes(sv);
        let n = half * cols;
        let d = sv.data();
        let out = (0..n).map(|i| d[i] * d[i] + d[n + i] * d[n + i]).collect();
        self.push(
            Tensor::from_parts(vec![half, cols], out),
            Op::ComplexPower(s),
            &[s],
        )
    }

    /// Scales both planes of a `[2, L', C]` spectrum by a real `L' x C` mask.
    pub fn complex_scale(&mut self, s: Var, w: Var) -> Var {
        let (sv, wv) = (self.value(s), self.value(w));
        let (half, cols) = split_planes(sv);
        let n = half * cols;
        assert_eq!(wv.len(), n, "complex_scale: mask size");
        let out = sv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &z)| z * wv.data()[i % n])
            .collect();
        self.push(
            Tensor::from_parts(sv.shape().to_vec(), out),
            Op::ComplexScale(s, w),
            &[s, w],
        )
    }

    /// Divides each column by its mean (plus `eps`).
    pub fn div_col_mean(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let means = col_means(x);
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v / (means[i % cols] + eps))
            .collect();
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::DivColMean(a, eps),
            &[a],
        )
    }

    /// State-space scan `y = SSD(a, b, c)(x)` computed with the chunked
    /// algorithm; see [`crate::ssd`].
    pub fn ssd(&mut self, x: Var, a: Var, b: Var, c: Var, groups: usize, chunk: usize) -> Var {
        let dims = ssd::ScanDims::infer(self.value(x), self.value(b), groups)
            .expect("ssd dimensions");
        let y = ssd::scan_chunked_raw(
            self.value(x).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            dims,
            chunk,
        );
        let v = Tensor::from_parts(vec![dims.len, dims.channels], y);
        self.push(v, Op::Ssd { x, a, b, c, groups }, &[x, a, b, c])
    }

    /// Complex cosine similarities between the columns of two `[2, K', ·]`
    /// spectra: `out[i, j] = Re(u_i · conj(v_j)) / (|u_i| |v_j|)`.
    pub fn vec_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uv, vv) = (self.value(u), self.value(v));
        let (ku, n) = split_planes(uv);
        let (kv, m) = split_planes(vv);
        if ku != kv {
            return Err(Error::shape("vec_sim: spectra differ in bin count"));
        }
        let un = plane_col_norms(uv);
        let vn = plane_col_norms(vv);
        if un.iter().chain(&vn).any(|&x| x == 0.0) {
            return Err(Error::invalid("vec_sim of a zero-magnitude vector"));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = plane_dot(uv, vv, i, j) / (un[i] * vn[j]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::VecSim(u, v), &[u, v]))
    }

    /// Mean cross-entropy of `N x K` logits against `labels`, a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = (lv.rows(), lv.cols());
        if labels.len() != n {
            return Err(Error::shape("cross_entropy: one label per row"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} outside [0, {k})")));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv.data()[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            kernels::softmax_in_place(&mut probs[r * k..(r + 1) * k]);
        }
        let v = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, d) in t.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), delta));
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.acc(grads, *a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, gd.iter().map(|g| g * s).collect()),
            Op::AddRow(x, row) => {
                self.acc(grads, *x, gd.to_vec());
                if self.needs(*row) {
                    let cols = g.cols();
                    let mut gr = vec![0.0; cols];
                    for chunk in gd.chunks(cols) {
                        for (a, b) in gr.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    self.acc(grads, *row, gr);
                }
            }
            Op::SubScalar(x, s) => {
                self.acc(grads, *x, gd.to_vec());
                self.acc(grads, *s, vec![-gd.iter().sum::<f64>()]);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.needs(*a) {
                    let bt = bv.transpose();
                    self.acc(grads, *a, matmul_raw(gd, bt.data(), m, n, k));
                }
                if self.needs(*b) {
                    let at = av.transpose();
                    self.acc(grads, *b, matmul_raw(at.data(), gd, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                self.acc(grads, *a, gt.into_data());
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, gd.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect());
            }
            Op::Exp(a) => self.acc(grads, *a, gd.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Decay(a) => {
                let d = gd.iter().zip(out).map(|(g, y)| -g * y * (1.0 - y)).collect();
                self.acc(grads, *a, d);
            }
            Op::Step => {}
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![gd[0]; n]);
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let scale = 1.0 / rows as f64;
                let row: Vec<f64> = gd.iter().map(|g| g * scale).collect();
                self.acc(grads, *a, row.repeat(rows));
            }
            Op::SoftmaxRows(a) => {
                let cols = g.cols();
                let mut d = vec![0.0; gd.len()];
                for ((dr, gr), yr) in d
                    .chunks_mut(cols)
                    .zip(gd.chunks(cols))
                    .zip(out.chunks(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let gv = self.value(*gain).data();
                if self.needs(*gain) {
                    let mut gg = vec![0.0; d];
                    for (i, (gi, h)) in gd.iter().zip(xhat).enumerate() {
                        gg[i % d] += gi * h;
                    }
                    self.acc(grads, *gain, gg);
                }
                if self.needs(*shift) {
                    let mut gs = vec![0.0; d];
                    for (i, gi) in gd.iter().enumerate() {
                        gs[i % d] += gi;
                    }
                    self.acc(grads, *shift, gs);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let dh: Vec<f64> =
                            gd[span.clone()].iter().zip(gv).map(|(g, w)| g * w).collect();
                        let h = &xhat[span.clone()];
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        let n = d as f64;
                        for c in 0..d {
                            dx[r * d + c] = inv / n * (n * dh[c] - sum_dh - h[c] * sum_dh_h);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Conv1d { x, kernel, bias } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (len, ch) = (xv.rows(), xv.cols());
                let k = kv.rows();
                let mut dx = vec![0.0; len * ch];
                let mut dk = vec![0.0; k * ch];
                let mut db = vec![0.0; ch];
                for t in 0..len {
                    for c in 0..ch {
                        db[c] += gd[t * ch + c];
                    }
                    for j in 0..k {
                        let Some(s) = (t + j).checked_sub(k - 1) else {
                            continue;
                        };
                        for c in 0..ch {
                            let gv = gd[t * ch + c];
                            dx[s * ch + c] += gv * kv.data()[j * ch + c];
                            dk[j * ch + c] += gv * xv.data()[s * ch + c];
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *kernel, dk);
                self.acc(grads, *bias, db);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (rows, cols) = (src.rows(), src.cols());
                let w = g.cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows(a, index) => {
                let src = self.value(*a);
                let cols = src.cols();
                let mut d = vec![0.0; src.len()];
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += gd[r * cols + c];
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Rfft(a) => {
                // adjoint: x̄ = L · irfft(ḡ / c_k), c_k = 1 on self-conjugate bins, 2 elsewhere
                let len = self.value(*a).rows();
                let (half, cols) = split_planes(g);
                let mut d = vec![0.0; len * cols];
                for c in 0..cols {
                    let spec: Vec<Complex64> = (0..half)
                        .map(|k| {
                            let w = if k == 0 || 2 * k == len { 1.0 } else { 0.5 };
                            Complex64::new(gd[k * cols + c] * w, gd[(half + k) * cols + c] * w)
                        })
                        .collect();
                    let sig = ifft_real_1d(&spec, len).expect("consistent lengths");
                    for (t, v) in sig.into_iter().enumerate() {
                        d[t * cols + c] = v * len as f64;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Irfft(s) => {
                // adjoint: (c_k / L) · rfft(ḡ), self-conjugate imaginary parts dropped
                let (len, cols) = (g.rows(), g.cols());
                let half = half_len(len);
                let mut d = vec![0.0; 2 * half * cols];
                for c in 0..cols {
                    let spec = fft_real_1d(&g.column(c)).expect("non-empty");
                    for (k, z) in spec.iter().enumerate() {
                        let self_conj = k == 0 || 2 * k == len;
                        let w = if self_conj { 1.0 } else { 2.0 } / len as f64;
                        d[k * cols + c] = z.re * w;
                        d[(half + k) * cols + c] = if self_conj { 0.0 } else { z.im * w };
                    }
                }
                self.acc(grads, *s, d);
            }
            Op::ComplexPower(s) => {
                let sv = self.value(*s).data();
                let n = gd.len();
                let mut d = vec![0.0; 2 * n];
                for i in 0..n {
                    d[i] = 2.0 * gd[i] * sv[i];
                    d[n + i] = 2.0 * gd[i] * sv[n + i];
                }
                self.acc(grads, *s, d);
            }
            Op::ComplexScale(s, w) => {
                let (sv, wv) = (self.value(*s).data(), self.value(*w).data());
                let n = wv.len();
                if self.needs(*s) {
                    self.acc(grads, *s, gd.iter().enumerate().map(|(i, g)| g * wv[i % n]).collect());
                }
                if self.needs(*w) {
                    let d = (0..n)
                        .map(|i| gd[i] * sv[i] + gd[n + i] * sv[n + i])
                        .collect();
                    self.acc(grads, *w, d);
                }
            }
            Op::DivColMean(a, eps) => {
                let x = self.value(*a);
                let (rows, cols) = (x.rows(), x.cols());
                let means = col_means(x);
                let mut gx_dot = vec![0.0; cols];
                for (i, (gv, xv)) in gd.iter().zip(x.data()).enumerate() {
                    gx_dot[i % cols] += gv * xv;
                }
                let d = gd
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| {
                        let c = i % cols;
                        let den = means[c] + eps;
                        gv / den - gx_dot[c] / (rows as f64 * den * den)
                    })
                    .collect();
                self.acc(grads, *a, d);
            }
            Op::Ssd { x, a, b, c, groups } => {
                let dims = ssd::ScanDims::infer(self.value(*x), self.value(*b), *groups)
                    .expect("ssd dimensions");
                let adj = ssd::scan_backward_raw(
                    self.value(*x).data(),
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    gd,
                    dims,
                );
                self.acc(grads, *x, adj.x);
                self.acc(grads, *a, adj.a);
                self.acc(grads, *b, adj.b);
                self.acc(grads, *c, adj.c);
            }
            Op::VecSim(u, v) => {
                let (uv, vv) = (self.value(*u), self.value(*v));
                let (kb, n) = split_planes(uv);
                let m = vv.cols();
                let un = plane_col_norms(uv);
                let vn = plane_col_norms(vv);
                let mut du = vec![0.0; uv.len()];
                let mut dv = vec![0.0; vv.len()];
                for i in 0..n {
                    for j in 0..m {
                        let gij = gd[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let s = out[i * m + j];
                        for plane in 0..2 {
                            for k in 0..kb {
                                let ui = uv.data()[(plane * kb + k) * n + i];
                                let vj = vv.data()[(plane * kb + k) * m + j];
                                du[(plane * kb + k) * n + i] +=
                                    gij * (vj / vn[j] - s * ui / un[i]) / un[i];
                                dv[(plane * kb + k) * m + j] +=
                                    gij * (ui / un[i] - s * vj / vn[j]) / vn[j];
                            }
                        }
                    }
                }
                self.acc(grads, *u, du);
                self.acc(grads, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let scale = gd[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                self.acc(grads, *logits, d);
            }
        }
    }
}

/// `(bins, cols)` of a `[2, bins, cols]` spectrum.
fn split_planes(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [2, half, cols] => (*half, *cols),
        other => panic!("expected a [2, bins, cols] spectrum, got {other:?}"),
    }
}

fn col_means(x: &Tensor) -> Vec<f64> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut m = vec![0.0; cols];
    for (i, v) in x.data().iter().enumerate() {
        m[i % cols] += v;
    }
    m.iter_mut().for_each(|v| *v /= rows as f64);
    m
}

fn plane_col_norms(t: &Tensor) -> Vec<f64> {
    let (_, cols) = split_planes(t);
    let mut n = vec![0.0; cols];
    for (i, v) in t.data().iter().enumerate() {
        n[i % cols] += v * v;
    }
    n.into_iter().map(f64::sqrt).collect()
}

/// `Re(u_i · conj(v_j))` for column `i` of `u` and column `j` of `v`.
fn plane_dot(u: &Tensor, v: &Tensor, i: usize, j: usize) -> f64 {
    let (kb, n) = split_planes(u);
    let m = v.cols();
    (0..2 * kb)
        .map(|r| u.data()[r * n + i] * v.data()[r * m + j])
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn self_dot_gradient_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.5, -1.5]));
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, -3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]));
        let c = g.constant(Tensor::vector(vec![2.0]));
        let p = g.mul(x, c);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn decay_is_exp_negative_softplus() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-3.0, 0.0, 2.5]));
        let d = g.decay(x);
        for (&v, &raw) in g.value(d).data().iter().zip(&[-3.0, 0.0, 2.5]) {
            assert!((v - (-softplus(raw)).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        assert!(g.cross_entropy(l, &[2]).is_err());
    }
}
