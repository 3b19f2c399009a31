//! Elementary forward kernels shared by the differentiable graph and the
//! plain inference helpers.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Entrywise `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| silu_scalar(v)).collect(),
    )
}

/// `(m x k) · (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {m}x{k} · {k2}x{n}"
        )));
    }
    Ok(Tensor::from_parts(
        vec![m, n],
        matmul_raw(a.data(), b.data(), m, k, n),
    ))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Causal depthwise convolution along the rows of an `L x C` matrix.
///
/// `out[t, c] = bias[c] + Σ_j kernel[j, c] · x[t + j - (k - 1), c]`, with
/// zeros standing in for negative time indices.
pub fn depthwise_conv1d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (len, ch) = x.dims2()?;
    let (k, kc) = kernel.dims2()?;
    if k == 0 {
        return Err(Error::invalid("convolution kernel width must be >= 1"));
    }
    if kc != ch || bias.len() != ch {
        return Err(Error::shape(format!(
            "conv expects {ch} channels, kernel has {kc}, bias has {}",
            bias.len()
        )));
    }
    Ok(Tensor::from_parts(
        vec![len, ch],
        conv_raw(x.data(), kernel.data(), bias.data(), len, ch, k),
    ))
}

pub(crate) fn conv_raw(
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    len: usize,
    ch: usize,
    k: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * ch);
    for _ in 0..len {
        out.extend_from_slice(bias);
    }
    for t in 0..len {
        for j in 0..k {
            let Some(s) = (t + j).checked_sub(k - 1) else {
                continue;
            };
            let orow = &mut out[t * ch..(t + 1) * ch];
            let xrow = &x[s * ch..(s + 1) * ch];
            let krow = &kernel[j * ch..(j + 1) * ch];
            for c in 0..ch {
                orow[c] += krow[c] * xrow[c];
            }
        }
    }
    out
}

/// Row-wise standardization with population variance, then `gain`/`shift`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, d) = x.dims2()?;
    if d == 0 {
        return Err(Error::invalid("layer_norm needs D >= 1"));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    if gain.len() != d || shift.len() != d {
        return Err(Error::shape("layer_norm gain/shift width differs from D"));
    }
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let (xhat, _) = standardize(x.row(r), eps);
        for c in 0..d {
            out[r * d + c] = xhat[c] * gain.data()[c] + shift.data()[c];
        }
    }
    Ok(Tensor::from_parts(vec![rows, d], out))
}

/// Returns the standardized row and `1/sqrt(var + eps)`.
pub(crate) fn standardize(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * inv).collect(), inv)
}

/// Numerically stable softmax of each row.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = x.data().to_vec();
    for r in 0..rows {
        softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(50.0) - 50.0).abs() < 1e-12);
        // 1 / (1 + e^-1)
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu_scalar(1.0) - oracle).abs() < 1e-15);
        assert!((silu_scalar(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn softplus_round_trips() {
        for y in [1e-3, 0.5, 1.0, 7.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12);
        }
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = Tensor::matrix(4, 2, (0..8).map(f64::from).collect()).unwrap();
        let mut kernel = Tensor::zeros(&[3, 2]);
        kernel.data_mut()[4] = 1.0;
        kernel.data_mut()[5] = 1.0;
        let out = depthwise_conv1d(&x, &kernel, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = Tensor::matrix(3, 2, vec![1.0; 6]).unwrap();
        let out =
            depthwise_conv1d(&x, &Tensor::zeros(&[2, 2]), &Tensor::vector(vec![0.5, -2.0]))
                .unwrap();
        assert_eq!(out.data(), &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        // L=3, k=2, C=2
        let x = [0.3, -1.2, 0.7, 0.4, -0.5, 2.0];
        let kern = [0.9, -0.1, 0.25, 0.6];
        let bias = [0.05, -0.02];
        let out = depthwise_conv1d(
            &Tensor::matrix(3, 2, x.to_vec()).unwrap(),
            &Tensor::matrix(2, 2, kern.to_vec()).unwrap(),
            &Tensor::vector(bias.to_vec()),
        )
        .unwrap();
        for t in 0..3usize {
            for c in 0..2 {
                let mut acc = bias[c];
                for j in 0..2usize {
                    let src = t as isize + j as isize - 1;
                    if src >= 0 {
                        acc += kern[j * 2 + c] * x[src as usize * 2 + c];
                    }
                }
                assert!((out.at(t, c) - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(depthwise_conv1d(&x, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let c = layer_norm(&Tensor::matrix(1, 2, vec![3.0, 3.0]).unwrap(), &ones, &zeros, 1e-5)
            .unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let s = layer_norm(&Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap(), &ones, &zeros, 1e-14)
            .unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && (s.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_statistics() {
        let row: Vec<f64> = (0..9).map(|i| ((i * 37) % 11) as f64 * 0.7 - 2.0).collect();
        let d = row.len();
        let out = layer_norm(
            &Tensor::matrix(1, d, row).unwrap(),
            &Tensor::full(&[d], 1.0),
            &Tensor::zeros(&[d]),
            1e-12,
        )
        .unwrap();
        let mean = out.data().iter().sum::<f64>() / d as f64;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax_rows(&Tensor::matrix(1, 3, vec![0.1, 2.0, -1.0]).unwrap());
        let b = softmax_rows(&Tensor::matrix(1, 3, vec![100.1, 102.0, 99.0]).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
