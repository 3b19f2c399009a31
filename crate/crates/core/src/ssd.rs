//! Scalar-decay state-space scan and its semiseparable dual.
//!
//! For every channel `c` belonging to group `g`, with hidden state
//! `h ∈ R^d` starting at zero:
//!
//! ```text
//! h_t = a[t, c] · h_{t-1} + B_g[t] · x[t, c]
//! y[t, c] = C_g[t] · h_t
//! ```
//!
//! Unrolling gives `y = M x` with the lower-triangular matrix
//! `M[t, s] = (C_g[t] · B_g[s]) · Π_{r=s+1..=t} a[r, c]`. Three evaluation
//! orders are provided and must agree:
//!
//! * [`ssd_sequential`]: the recurrence, O(L·d) per channel.
//! * [`ssd_dual_materialized`]: builds `M` explicitly, O(L²) per channel.
//! * [`ssd_chunked`]: dual form inside blocks of `chunk` steps, recurrence
//!   across blocks.
//!
//! Channels are split into `G` contiguous groups of `D'/G`; the columns
//! of `B` and `C` are laid out group-major (`g * d + j`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Longest sequence [`ssd_dual_materialized`] accepts.
pub const MATERIALIZED_MAX_LEN: usize = 4096;

pub const DEFAULT_CHUNK: usize = 64;

/// Extents of one scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub groups: usize,
    pub state: usize,
}

impl ScanDims {
    pub(crate) fn infer(x: &Tensor, b: &Tensor, groups: usize) -> Result<Self> {
        let (len, channels) = x.dims2()?;
        let (blen, bw) = b.dims2()?;
        if groups == 0 || bw == 0 || bw % groups != 0 {
            return Err(Error::shape(format!(
                "B width {bw} is not a positive multiple of {groups} groups"
            )));
        }
        if channels % groups != 0 {
            return Err(Error::shape(format!(
                "{channels} channels do not split into {groups} groups"
            )));
        }
        if blen != len {
            return Err(Error::shape("B and X differ in length"));
        }
        Ok(Self {
            len,
            channels,
            groups,
            state: bw / groups,
        })
    }

    fn per_group(&self) -> usize {
        self.channels / self.groups
    }

    fn bc_width(&self) -> usize {
        self.groups * self.state
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsdConfig {
    pub chunk: usize,
}

impl Default for SsdConfig {
    fn default() -> Self {
        Self {
            chunk: DEFAULT_CHUNK,
        }
    }
}

/// Validated `(X, A, B, C)` quadruple.
#[derive(Clone, Debug)]
pub struct SsdInputs {
    x: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    dims: ScanDims,
}

impl SsdInputs {
    /// `x`, `a`: `L x D'`; `b`, `c`: `L x (G·d)`. Every decay must lie in `(0, 1]`.
    pub fn new(x: Tensor, a: Tensor, b: Tensor, c: Tensor, groups: usize) -> Result<Self> {
        let dims = ScanDims::infer(&x, &b, groups)?;
        if a.shape() != x.shape() {
            return Err(Error::shape(format!(
                "decay shape {:?} differs from X {:?}",
                a.shape(),
                x.shape()
            )));
        }
        if c.shape() != b.shape() {
            return Err(Error::shape("C shape differs from B"));
        }
        if let Some(bad) = a.data().iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::invalid(format!("decay {bad} outside (0, 1]")));
        }
        Ok(Self { x, a, b, c, dims })
    }

    pub fn dims(&self) -> ScanDims {
        self.dims
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn c(&self) -> &Tensor {
        &self.c
    }

    fn output(&self, y: Vec<f64>) -> Tensor {
        Tensor::from_parts(vec![self.dims.len, self.dims.channels], y)
    }
}

pub fn ssd_sequential(inputs: &SsdInputs) -> Tensor {
    inputs.output(scan_sequential_raw(
        inputs.x.data(),
        inputs.a.data(),
        inputs.b.data(),
        inputs.c.data(),
        inputs.dims,
    ))
}

pub fn ssd_dual_materialized(inputs: &SsdInputs) -> Result<Tensor> {
    if inputs.dims.len > MATERIALIZED_MAX_LEN {
        return Err(Error::ResourceLimit(format!(
            "materialized dual form limited to L <= {MATERIALIZED_MAX_LEN}, got {}",
            inputs.dims.len
        )));
    }
    Ok(inputs.output(scan_materialized_raw(
        inputs.x.data(),
        inputs.a.data(),
        inputs.b.data(),
        inputs.c.data(),
        inputs.dims,
    )))
}

pub fn ssd_chunked(inputs: &SsdInputs, cfg: &SsdConfig) -> Result<Tensor> {
    if cfg.chunk == 0 {
        return Err(Error::invalid("chunk must be >= 1"));
    }
    Ok(inputs.output(scan_chunked_raw(
        inputs.x.data(),
        inputs.a.data(),
        inputs.b.data(),
        inputs.c.data(),
        inputs.dims,
        cfg.chunk,
    )))
}

#[inline]
fn bc_row(m: &[f64], dims: ScanDims, t: usize, g: usize) -> &[f64] {
    let w = dims.bc_width();
    &m[t * w + g * dims.state..t * w + (g + 1) * dims.state]
}

#[inline]
fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn scan_sequential_raw(
    x: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    dims: ScanDims,
) -> Vec<f64> {
    let ScanDims {
        len, channels, state, ..
    } = dims;
    let mut y = vec![0.0; len * channels];
    let mut h = vec![0.0; state];
    for ch in 0..channels {
        let g = ch / dims.per_group();
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..len {
            let (at, xt) = (a[t * channels + ch], x[t * channels + ch]);
            for (hv, bv) in h.iter_mut().zip(bc_row(b, dims, t, g)) {
                *hv = at * *hv + bv * xt;
            }
            y[t * channels + ch] = dot(bc_row(c, dims, t, g), &h);
        }
    }
    y
}

/// `C_g[t] · B_g[s]` for `t, s` in `[start, end)`, row-major over `t`.
fn group_scores(b: &[f64], c: &[f64], dims: ScanDims, g: usize, start: usize, end: usize) -> Vec<f64> {
    let n = end - start;
    let mut cb = vec![0.0; n * n];
    for t in 0..n {
        let ct = bc_row(c, dims, start + t, g);
        for s in 0..=t {
            cb[t * n + s] = dot(ct, bc_row(b, dims, start + s, g));
        }
    }
    cb
}

pub(crate) fn scan_materialized_raw(
    x: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    dims: ScanDims,
) -> Vec<f64> {
    let ScanDims { len, channels, .. } = dims;
    let mut y = vec![0.0; len * channels];
    let mut mask = vec![0.0; len * len];
    let per_group = dims.per_group();
    for g in 0..dims.groups {
        let cb = group_scores(b, c, dims, g, 0, len);
        for ch in g * per_group..(g + 1) * per_group {
            // M[t, s] = CB[t, s] · Π_{r=s+1..=t} a[r]
            for t in 0..len {
                let mut decay = 1.0;
                for s in (0..=t).rev() {
                    mask[t * len + s] = cb[t * len + s] * decay;
                    decay *= a[s * channels + ch];
                }
            }
            for t in 0..len {
                let row = &mask[t * len..t * len + t + 1];
                y[t * channels + ch] = row
                    .iter()
                    .enumerate()
                    .map(|(s, m)| m * x[s * channels + ch])
                    .sum();
            }
        }
    }
    y
}

pub(crate) fn scan_chunked_raw(
    x: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    dims: ScanDims,
    chunk: usize,
) -> Vec<f64> {
    let ScanDims {
        len,
        channels,
        state,
        ..
    } = dims;
    let mut y = vec![0.0; len * channels];
    let mut h = vec![0.0; channels * state];
    let mut start = 0;
    while start < len {
        let end = (start + chunk).min(len);
        let n = end - start;
        let per_group = dims.per_group();
        for g in 0..dims.groups {
            let cb = group_scores(b, c, dims, g, start, end);
            for ch in g * per_group..(g + 1) * per_group {
                let hc = &mut h[ch * state..(ch + 1) * state];
                for t in 0..n {
                    let mut acc = 0.0;
                    let mut decay = 1.0;
                    for s in (0..=t).rev() {
                        acc += cb[t * n + s] * decay * x[(start + s) * channels + ch];
                        decay *= a[(start + s) * channels + ch];
                    }
                    // decay now spans the chunk prefix up to t
                    acc += decay * dot(bc_row(c, dims, start + t, g), hc);
                    y[(start + t) * channels + ch] = acc;
                }
                let mut carry = vec![0.0; state];
                let mut decay = 1.0;
                for s in (start..end).rev() {
                    let xs = x[s * channels + ch];
                    for (cv, bv) in carry.iter_mut().zip(bc_row(b, dims, s, g)) {
                        *cv += decay * bv * xs;
                    }
                    decay *= a[s * channels + ch];
                }
                for (hv, cv) in hc.iter_mut().zip(&carry) {
                    *hv = decay * *hv + cv;
                }
            }
        }
        start = end;
    }
    y
}

/// Adjoints of the scan inputs.
pub(crate) struct ScanAdjoint {
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Reverse pass of the recurrence given the output adjoint `gy`.
pub(crate) fn scan_backward_raw(
    x: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    gy: &[f64],
    dims: ScanDims,
) -> ScanAdjoint {
    let ScanDims {
        len,
        channels,
        state,
        ..
    } = dims;
    let w = dims.bc_width();
    let mut adj = ScanAdjoint {
        x: vec![0.0; len * channels],
        a: vec![0.0; len * channels],
        b: vec![0.0; len * w],
        c: vec![0.0; len * w],
    };
    let mut hist = vec![0.0; (len + 1) * state];
    let mut gh = vec![0.0; state];
    for ch in 0..channels {
        let g = ch / dims.per_group();
        // hist[t + 1] holds h_t; hist[0] is the zero initial state
        for t in 0..len {
            let (at, xt) = (a[t * channels + ch], x[t * channels + ch]);
            let brow = bc_row(b, dims, t, g);
            for j in 0..state {
                hist[(t + 1) * state + j] = at * hist[t * state + j] + brow[j] * xt;
            }
        }
        gh.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..len).rev() {
            let gyt = gy[t * channels + ch];
            let crow = bc_row(c, dims, t, g);
            let brow = bc_row(b, dims, t, g);
            let h_t = &hist[(t + 1) * state..(t + 2) * state];
            let h_prev = &hist[t * state..(t + 1) * state];
            let off = t * w + g * state;
            for j in 0..state {
                gh[j] += gyt * crow[j];
                adj.c[off + j] += gyt * h_t[j];
            }
            let xt = x[t * channels + ch];
            adj.x[t * channels + ch] = dot(brow, &gh);
            for j in 0..state {
                adj.b[off + j] += xt * gh[j];
            }
            adj.a[t * channels + ch] = dot(&gh, h_prev);
            let at = a[t * channels + ch];
            gh.iter_mut().for_each(|v| *v *= at);
        }
    }
    adj
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut ChaCha8Rng, len: usize, ch: usize, groups: usize, d: usize) -> SsdInputs {
        let mut m = |r: usize, c: usize, lo: f64, hi: f64| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        let x = m(len, ch, -1.0, 1.0);
        let a = m(len, ch, 0.05, 1.0);
        let b = m(len, groups * d, -1.0, 1.0);
        let c = m(len, groups * d, -1.0, 1.0);
        SsdInputs::new(x, a, b, c, groups).unwrap()
    }

    #[test]
    fn single_step() {
        let inp = SsdInputs::new(
            Tensor::matrix(1, 1, vec![2.0]).unwrap(),
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap(),
            Tensor::matrix(1, 2, vec![3.0, 0.25]).unwrap(),
            1,
        )
        .unwrap();
        let expected = (0.5 * 3.0 - 0.25) * 2.0;
        assert!((ssd_sequential(&inp).data()[0] - expected).abs() < 1e-15);
        assert!((ssd_dual_materialized(&inp).unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn unit_decay_is_prefix_sum() {
        let xs = vec![1.0, -2.0, 0.5, 4.0, 3.0];
        let inp = SsdInputs::new(
            Tensor::matrix(5, 1, xs.clone()).unwrap(),
            Tensor::full(&[5, 1], 1.0),
            Tensor::full(&[5, 1], 1.0),
            Tensor::full(&[5, 1], 1.0),
            1,
        )
        .unwrap();
        let y = ssd_sequential(&inp);
        let mut acc = 0.0;
        for (t, x) in xs.iter().enumerate() {
            acc += x;
            assert_eq!(y.data()[t], acc);
        }
    }

    #[test]
    fn unit_decay_mask_is_causal_score_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_inputs(&mut rng, 5, 1, 1, 3);
        let inp = SsdInputs::new(
            base.x().clone(),
            Tensor::full(&[5, 1], 1.0),
            base.b().clone(),
            base.c().clone(),
            1,
        )
        .unwrap();
        let y = ssd_dual_materialized(&inp).unwrap();
        for t in 0..5 {
            let expect: f64 = (0..=t)
                .map(|s| dot(inp.c().row(t), inp.b().row(s)) * inp.x().at(s, 0))
                .sum();
            assert!((y.data()[t] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn three_algorithms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inp = random_inputs(&mut rng, 8, 4, 1, 3);
        let seq = ssd_sequential(&inp);
        assert!(seq.max_abs_diff(&ssd_dual_materialized(&inp).unwrap()) < 1e-12);

        let inp = random_inputs(&mut rng, 13, 4, 2, 2);
        let seq = ssd_sequential(&inp);
        let chunked = ssd_chunked(&inp, &SsdConfig { chunk: 4 }).unwrap();
        assert!(seq.max_abs_diff(&chunked) < 1e-9);
        let one = ssd_chunked(&inp, &SsdConfig { chunk: 1 }).unwrap();
        assert!(seq.max_abs_diff(&one) < 1e-12);
        let whole = ssd_chunked(&inp, &SsdConfig { chunk: 13 }).unwrap();
        assert!(whole.max_abs_diff(&ssd_dual_materialized(&inp).unwrap()) < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let ok = || Tensor::full(&[2, 2], 0.5);
        assert!(matches!(
            SsdInputs::new(ok(), Tensor::full(&[2, 2], 1.5), ok(), ok(), 1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(SsdInputs::new(ok(), Tensor::zeros(&[2, 2]), ok(), ok(), 1).is_err());
        assert!(SsdInputs::new(ok(), ok(), ok(), ok(), 3).is_err());
        let inp = SsdInputs::new(ok(), ok(), ok(), ok(), 1).unwrap();
        assert!(ssd_chunked(&inp, &SsdConfig { chunk: 0 }).is_err());
    }

    #[test]
    fn materialized_guard() {
        let n = MATERIALIZED_MAX_LEN + 1;
        let inp = SsdInputs::new(
            Tensor::zeros(&[n, 1]),
            Tensor::full(&[n, 1], 1.0),
            Tensor::zeros(&[n, 1]),
            Tensor::zeros(&[n, 1]),
            1,
        )
        .unwrap();
        assert!(matches!(
            ssd_dual_materialized(&inp),
            Err(Error::ResourceLimit(_))
        ));
    }
}
