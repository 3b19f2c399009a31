//! Real-input FFT pair returning the nonnegative-frequency half spectrum.
//!
//! Power-of-two lengths use an iterative radix-2 transform; every other
//! length goes through Bluestein's chirp-z reformulation on a padded
//! power-of-two grid. [`dft_oracle`] is the O(L²) reference both are
//! checked against.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::tensor::{ComplexTensor, Tensor};
use crate::error::{Error, Result};

/// Number of bins kept for a real signal of length `len`.
pub fn half_len(len: usize) -> usize {
    len / 2 + 1
}

/// Forward transform of a real signal, bins `0..=len/2`.
pub fn fft_real_1d(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(Error::invalid("fft of an empty signal"));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    buf.truncate(half_len(x.len()));
    Ok(buf)
}

/// Inverse of [`fft_real_1d`]. Imaginary parts of the DC bin (and the
/// Nyquist bin for even `len`) are discarded.
pub fn ifft_real_1d(s: &[Complex64], len: usize) -> Result<Vec<f64>> {
    if len == 0 || s.len() != half_len(len) {
        return Err(Error::invalid(format!(
            "half spectrum of {} bins does not match signal length {}",
            s.len(),
            len
        )));
    }
    let mut full = vec![Complex64::new(0.0, 0.0); len];
    full[0] = Complex64::new(s[0].re, 0.0);
    for k in 1..s.len() {
        if 2 * k == len {
            full[k] = Complex64::new(s[k].re, 0.0);
        } else {
            full[k] = s[k];
            full[len - k] = s[k].conj();
        }
    }
    fft_in_place(&mut full, true);
    let scale = 1.0 / len as f64;
    Ok(full.into_iter().map(|z| z.re * scale).collect())
}

/// Direct O(L²) evaluation of the DFT definition, half spectrum only.
pub fn dft_oracle(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(Error::invalid("dft of an empty signal"));
    }
    let n = x.len();
    Ok((0..half_len(n))
        .map(|k| {
            x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (t, &v)| {
                // reduce k·t mod n before scaling so the angle stays small
                let phase = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                acc + Complex64::from_polar(v, phase)
            })
        })
        .collect())
}

/// Entrywise `re² + im²`.
pub fn power_spectrum(s: &[Complex64]) -> Vec<f64> {
    s.iter().map(|z| z.norm_sqr()).collect()
}

/// Column-wise real FFT of an `L x C` matrix, returning `L' x C`.
pub fn rfft_cols(x: &Tensor) -> Result<ComplexTensor> {
    let (len, cols) = x.dims2()?;
    if len == 0 {
        return Err(Error::invalid("fft of an empty signal"));
    }
    let half = half_len(len);
    let mut out = vec![Complex64::new(0.0, 0.0); half * cols];
    for c in 0..cols {
        let spec = fft_real_1d(&x.column(c))?;
        for (k, z) in spec.into_iter().enumerate() {
            out[k * cols + c] = z;
        }
    }
    Ok(ComplexTensor::from_parts(vec![half, cols], out))
}

/// Column-wise inverse of [`rfft_cols`].
pub fn irfft_cols(s: &ComplexTensor, len: usize) -> Result<Tensor> {
    let cols = s.cols();
    let mut out = vec![0.0; len * cols];
    for c in 0..cols {
        let sig = ifft_real_1d(&s.column(c), len)?;
        for (t, v) in sig.into_iter().enumerate() {
            out[t * cols + c] = v;
        }
    }
    Ok(Tensor::from_parts(vec![len, cols], out))
}

/// Unnormalized complex DFT of arbitrary length; `inverse` flips the sign
/// of the exponent (no 1/N scaling).
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        bluestein(buf, inverse);
    }
}

fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    // twiddles for the largest stage; smaller stages stride through them
    let twiddles: Vec<Complex64> = (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect();
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let stride = n / size;
        for start in (0..n).step_by(size) {
            for k in 0..half {
                let w = twiddles[k * stride];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        size *= 2;
    }
}

fn bluestein(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            // k² mod 2n keeps the chirp angle bounded
            let k2 = (k * k) % (2 * n);
            Complex64::from_polar(1.0, sign * PI * k2 as f64 / n as f64)
        })
        .collect();

    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = buf[k] * chirp[k];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    radix2(&mut a, false);
    radix2(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    radix2(&mut a, true);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        buf[k] = a[k] * scale * chirp[k];
    }
}
