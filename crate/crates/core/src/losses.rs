//! Complex-domain similarity, the prototype contrastive loss, cross-entropy
//! and their weighted sum.
//!
//! The contrastive term compares each utterance's pooled vector with class
//! prototypes after both are moved to the frequency domain by a real FFT.
//! Row `i` of the similarity matrix scores anchor `i` against the prototype
//! of every sample `j` in the batch; the target is the diagonal. Samples that
//! share a label therefore contribute a copy of the positive term to the
//! denominator.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fft_real_1d, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One prototype row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub prototypes: Tensor,
}

impl PrototypeBank {
    pub fn new(prototypes: Tensor) -> Result<Self> {
        let (k, _) = prototypes.dims2()?;
        for r in 0..k {
            if prototypes.row(r).iter().all(|&v| v == 0.0) {
                return Err(Error::invalid(format!("prototype {r} is all zeros")));
            }
        }
        Ok(Self { prototypes })
    }

    pub fn classes(&self) -> usize {
        self.prototypes.rows()
    }
}

/// `Re(Σ U_k · conj(V_k)) / (|U| · |V|)`.
pub fn vec_sim(u: &[Complex64], v: &[Complex64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("vec_sim operands differ in length"));
    }
    let nu = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let nv = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("vec_sim of a zero-magnitude vector"));
    }
    let re: f64 = u.iter().zip(v).map(|(a, b)| (a * b.conj()).re).sum();
    Ok(re / (nu * nv))
}

/// Half spectrum of a real vector of length `D >= 2`.
pub fn to_complex_domain(v: &[f64]) -> Result<Vec<Complex64>> {
    if v.len() < 2 {
        return Err(Error::invalid("complex-domain mapping needs D >= 2"));
    }
    fft_real_1d(v)
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} outside [0, {})",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// InfoNCE over batch prototypes, evaluated directly from the definition.
pub fn cmdt_loss(
    pooled: &Tensor,
    labels: &[usize],
    bank: &PrototypeBank,
    cfg: &LossConfig,
) -> Result<f64> {
    let n = pooled.rows();
    if n == 0 || labels.len() != n {
        return Err(Error::invalid("cmdt needs one label per pooled row, N >= 1"));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= bank.classes()) {
        return Err(Error::invalid(format!("label {bad} has no prototype")));
    }
    let anchors: Vec<_> = (0..n)
        .map(|i| to_complex_domain(pooled.row(i)))
        .collect::<Result<_>>()?;
    let targets: Vec<_> = labels
        .iter()
        .map(|&l| to_complex_domain(bank.prototypes.row(l)))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (i, anchor) in anchors.iter().enumerate() {
        let sims: Vec<f64> = targets
            .iter()
            .map(|t| vec_sim(anchor, t).map(|s| s / cfg.tau))
            .collect::<Result<_>>()?;
        total += cross_entropy(&sims, i)?;
    }
    Ok(total / n as f64)
}

/// `ce + λ · cmdt`.
pub fn ser_loss(ce: f64, cmdt: f64, cfg: &LossConfig) -> f64 {
    ce + cfg.lambda * cmdt
}

/// Graph form of [`cmdt_loss`]: `pooled` is `N x D`, `prototypes` is `K x D`.
pub fn cmdt_loss_graph(
    g: &mut Graph,
    pooled: Var,
    labels: &[usize],
    prototypes: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let (n, d) = (g.shape(pooled)[0], g.shape(pooled)[1]);
    if n == 0 || labels.len() != n {
        return Err(Error::invalid("cmdt needs one label per pooled row, N >= 1"));
    }
    if d < 2 {
        return Err(Error::invalid("complex-domain mapping needs D >= 2"));
    }
    let k = g.shape(prototypes)[0];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} has no prototype")));
    }
    let anchors_t = g.transpose(pooled);
    let anchors = g.rfft_cols(anchors_t);
    let targets = g.gather_rows(prototypes, labels);
    let targets_t = g.transpose(targets);
    let targets = g.rfft_cols(targets_t);
    let sims = g.vec_sim(anchors, targets)?;
    let logits = g.scale(sims, 1.0 / cfg.tau);
    let diagonal: Vec<usize> = (0..n).collect();
    g.cross_entropy(logits, &diagonal)
}
