//! Synthetic emotion-cue corpus.
//!
//! An utterance of class `c` is
//!
//! ```text
//! x[t, d] = env_c(t)·u[d] + 1[d ∈ S]·A·cos(2π·f_c·t/L + φ) + ε[t, d]
//! ```
//!
//! with a fresh token direction `u ~ N(0, s²)`, channel subset `S`, phase
//! `φ` and noise `ε ~ N(0, σ²)` per utterance. The envelope is the temporal
//! cue and the carrier bin `f_c` the frequency cue; either can be made
//! uninformative by giving every class the same value.

use std::f64::consts::TAU;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::feature::FeatureFile;
use crate::error::{Error, Result};
use crate::numerics::fft::half_len;
use crate::numerics::{fft_real_1d, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    Flat,
    Rising,
    Falling,
    /// Triangle peaking mid-utterance.
    Peak,
    /// One minus [`Envelope::Peak`].
    Valley,
}

impl Envelope {
    pub const ALL: [Envelope; 5] = [
        Envelope::Rising,
        Envelope::Falling,
        Envelope::Peak,
        Envelope::Valley,
        Envelope::Flat,
    ];

    pub fn at(self, t: usize, len: usize) -> f64 {
        let s = if len > 1 {
            t as f64 / (len - 1) as f64
        } else {
            0.5
        };
        let tri = 1.0 - (2.0 * s - 1.0).abs();
        match self {
            Envelope::Flat => 1.0,
            Envelope::Rising => s,
            Envelope::Falling => 1.0 - s,
            Envelope::Peak => tri,
            Envelope::Valley => 1.0 - tri,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub len: usize,
    pub dim: usize,
    /// Carrier bin per class, in `1..=len/2`.
    pub carriers: Vec<usize>,
    pub envelopes: Vec<Envelope>,
    pub noise: f64,
    pub carrier_amplitude: f64,
    /// Standard deviation of the token direction entries.
    pub token_scale: f64,
    /// Share of channels carrying the sinusoid.
    pub channel_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::both_cues(4, 40, 64, 32, 0.1, 0)
    }
}

impl SyntheticSpec {
    /// Distinct carriers spread over the band and distinct envelopes.
    pub fn both_cues(classes: usize, per_class: usize, len: usize, dim: usize, noise: f64, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            len,
            dim,
            carriers: spread_carriers(classes, len),
            envelopes: (0..classes).map(|c| Envelope::ALL[c % Envelope::ALL.len()]).collect(),
            noise,
            carrier_amplitude: 1.0,
            token_scale: 1.0,
            channel_fraction: 0.5,
            seed,
        }
    }

    /// Distinct carriers in white noise: one shared flat envelope and no
    /// token direction, so the carrier bin is the only class signal.
    pub fn frequency_only(classes: usize, per_class: usize, len: usize, dim: usize, noise: f64, seed: u64) -> Self {
        Self {
            envelopes: vec![Envelope::Flat; classes],
            token_scale: 0.0,
            ..Self::both_cues(classes, per_class, len, dim, noise, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synth.{m}")));
        if self.classes < 2 || self.per_class == 0 || self.len == 0 || self.dim == 0 {
            return fail("classes >= 2 and per_class, len, dim >= 1 required".into());
        }
        if self.carriers.len() != self.classes || self.envelopes.len() != self.classes {
            return fail(format!("carriers and envelopes need {} entries", self.classes));
        }
        if let Some(&bad) = self.carriers.iter().find(|&&b| b == 0 || b >= half_len(self.len)) {
            return fail(format!("carrier bin {bad} outside 1..={}", self.len / 2));
        }
        if !(self.noise >= 0.0 && self.carrier_amplitude >= 0.0 && self.token_scale >= 0.0) {
            return fail("noise, carrier_amplitude and token_scale must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.channel_fraction) {
            return fail("channel_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class{c}")).collect()
    }
}

/// `classes` bins evenly spaced strictly inside `(0, len/2]`.
fn spread_carriers(classes: usize, len: usize) -> Vec<usize> {
    let top = (len / 2).max(1);
    (0..classes)
        .map(|c| (((c + 1) * top) / (classes + 1)).max(1))
        .collect()
}

/// Utterances in class-major order, ids `c{class}_{index}`.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<FeatureFile>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let token = Normal::new(0.0, spec.token_scale).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let active = (spec.channel_fraction * spec.dim as f64).round() as usize;
    let (len, dim) = (spec.len, spec.dim);
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for c in 0..spec.classes {
        let env: Vec<f64> = (0..len).map(|t| spec.envelopes[c].at(t, len)).collect();
        for i in 0..spec.per_class {
            let u: Vec<f64> = (0..dim).map(|_| token.sample(&mut rng)).collect();
            let phase = rng.random_range(0.0..TAU);
            let mut carrier_on = vec![false; dim];
            for d in sample(&mut rng, dim, active) {
                carrier_on[d] = true;
            }
            let mut data = Vec::with_capacity(len * dim);
            for (t, &e) in env.iter().enumerate() {
                let wave = spec.carrier_amplitude
                    * (TAU * spec.carriers[c] as f64 * t as f64 / len as f64 + phase).cos();
                for d in 0..dim {
                    let mut v = e * u[d] + noise.sample(&mut rng);
                    if carrier_on[d] {
                        v += wave;
                    }
                    data.push(v);
                }
            }
            let features = Tensor::matrix(len, dim, data)?;
            out.push(FeatureFile::new(format!("c{c}_{i:04}"), c as u32, features)?);
        }
    }
    Ok(out)
}

/// Channel-summed power per bin, DC excluded (entry 0 is always zero).
pub fn periodogram(features: &Tensor) -> Result<Vec<f64>> {
    let (len, dim) = features.dims2()?;
    let mut power = vec![0.0; half_len(len)];
    for d in 0..dim {
        for (k, z) in fft_real_1d(&features.column(d))?.iter().enumerate().skip(1) {
            power[k] += z.norm_sqr();
        }
    }
    Ok(power)
}

/// Class whose carrier is closest to the periodogram's peak bin; ties go
/// to the lowest class id.
pub fn nearest_carrier(features: &Tensor, carriers: &[usize]) -> Result<usize> {
    let power = periodogram(features)?;
    let peak = power
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
        .0;
    carriers
        .iter()
        .enumerate()
        .min_by_key(|(_, &b)| b.abs_diff(peak))
        .map(|(c, _)| c)
        .ok_or_else(|| Error::invalid("no carriers"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn carriers_are_spread() {
        assert_eq!(spread_carriers(4, 64), vec![6, 12, 19, 25]);
        assert!(SyntheticSpec::default().validate().is_ok());
    }

    #[test]
    fn envelopes() {
        assert_eq!(Envelope::Rising.at(0, 5), 0.0);
        assert_eq!(Envelope::Peak.at(2, 5), 1.0);
        assert_eq!(Envelope::Valley.at(2, 5), 0.0);
        assert_eq!(Envelope::Falling.at(4, 5), 0.0);
    }

    #[test]
    fn rejects_out_of_band_carrier() {
        let mut spec = SyntheticSpec::default();
        spec.carriers[0] = 33;
        assert!(spec.validate().is_err());
        spec.carriers[0] = 0;
        assert!(spec.validate().is_err());
    }
}
