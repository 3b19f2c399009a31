//! Temporal-frequency Mamba block.
//!
//! ```text
//! n    = LayerNorm(x)
//! Φᵀ   = n · W_T          Φᶠ = n · W_F            (width 2D' + 2Gd)
//! Yᵀ   = SSD(split(SiLU(conv(Φᵀ))))
//! Yᶠ   = SSD(split(IFFT(gate(FFT([X|B|C] of Φᶠ)))), decay from Φᶠ's A columns)
//! out  = x + [Yᵀ | Yᶠ] · W_out + b_out
//! ```
//!
//! Projection columns are ordered `[X | B | C | A]` with widths
//! `[D', G·d, G·d, D']`. Raw decay columns are mapped through
//! `exp(-softplus(·))` before the scan.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::{sigmoid, softplus_inverse};
use crate::numerics::{ComplexTensor, Graph, Var};
use crate::params::{uniform_init, Bound, ParamId, ParamStore};
use crate::ssd::DEFAULT_CHUNK;

/// Added to per-column mean power before normalizing.
pub const POWER_NORM_EPS: f64 = 1e-12;

/// Initial threshold on mean-normalized power.
pub const INITIAL_OMEGA: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `sigmoid((p - ω) / slope)`, differentiable in the spectrum and ω.
    #[default]
    Soft,
    /// `1[p > ω]`.
    Hard,
}

/// Which branches a block runs next to the temporal one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchLayout {
    TemporalOnly,
    #[default]
    TemporalFrequency,
    /// Two independent temporal branches (control without the spectral path).
    DualTemporal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TfBlockConfig {
    /// Expansion width D'.
    pub d_inner: usize,
    /// State size d per group.
    pub d_state: usize,
    pub groups: usize,
    pub conv_kernel: usize,
    pub chunk: usize,
    pub gate_mode: GateMode,
    pub gate_slope: f64,
    /// Divide the power spectrum by its per-column mean before gating.
    pub normalize_power: bool,
    pub layout: BranchLayout,
    pub norm_eps: f64,
}

impl Default for TfBlockConfig {
    fn default() -> Self {
        Self {
            d_inner: 32,
            d_state: 8,
            groups: 1,
            conv_kernel: 4,
            chunk: DEFAULT_CHUNK,
            gate_mode: GateMode::Soft,
            gate_slope: 1.0,
            normalize_power: true,
            layout: BranchLayout::TemporalFrequency,
            norm_eps: 1e-5,
        }
    }
}

impl TfBlockConfig {
    /// Width of each input projection, `2D' + 2Gd`.
    pub fn proj_width(&self) -> usize {
        2 * self.d_inner + 2 * self.groups * self.d_state
    }

    pub fn branch_count(&self) -> usize {
        match self.layout {
            BranchLayout::TemporalOnly => 1,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("block.{m}")));
        if self.d_inner == 0 || self.d_state == 0 || self.groups == 0 {
            return fail("d_inner, d_state and groups must be >= 1");
        }
        if self.d_inner % self.groups != 0 {
            return fail("d_inner must be divisible by groups");
        }
        if self.conv_kernel == 0 {
            return fail("conv_kernel must be >= 1");
        }
        if self.chunk == 0 {
            return fail("chunk must be >= 1");
        }
        if !(self.gate_slope > 0.0) {
            return fail("gate_slope must be positive");
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive");
        }
        Ok(())
    }

    /// Learnable scalars of one block with model width `d_model`.
    pub fn param_count(&self, d_model: usize) -> usize {
        let p = self.proj_width();
        let temporal = d_model * p + self.conv_kernel * p + p;
        let second = match self.layout {
            BranchLayout::TemporalOnly => 0,
            BranchLayout::TemporalFrequency => d_model * p + 1,
            BranchLayout::DualTemporal => temporal,
        };
        let out = self.branch_count() * self.d_inner * d_model + d_model;
        2 * d_model + temporal + second + out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalParams {
    pub w_in: ParamId,
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrequencyParams {
    pub w_in: ParamId,
    /// ω = softplus(rho_omega).
    pub rho_omega: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SecondBranch {
    None,
    Frequency(FrequencyParams),
    Temporal(TemporalParams),
}

/// Handles to one block's tensors in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TfBlockParams {
    pub norm_gain: ParamId,
    pub norm_shift: ParamId,
    pub temporal: TemporalParams,
    pub second: SecondBranch,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl TfBlockParams {
    /// Registers freshly initialized tensors under `prefix.*`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        cfg: &TfBlockConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let p = cfg.proj_width();
        let temporal_branch = |store: &mut ParamStore, rng: &mut _, name: &str| TemporalParams {
            w_in: store.add(
                format!("{prefix}.{name}.w_in"),
                uniform_init(rng, &[d_model, p], d_model),
            ),
            conv_kernel: store.add(
                format!("{prefix}.{name}.conv_kernel"),
                uniform_init(rng, &[cfg.conv_kernel, p], cfg.conv_kernel),
            ),
            conv_bias: store.add(
                format!("{prefix}.{name}.conv_bias"),
                uniform_init(rng, &[p], cfg.conv_kernel),
            ),
        };
        let norm_gain = store.add(
            format!("{prefix}.norm.gain"),
            crate::numerics::Tensor::full(&[d_model], 1.0),
        );
        let norm_shift = store.add(
            format!("{prefix}.norm.shift"),
            crate::numerics::Tensor::zeros(&[d_model]),
        );
        let temporal = temporal_branch(store, rng, "temporal");
        let second = match cfg.layout {
            BranchLayout::TemporalOnly => SecondBranch::None,
            BranchLayout::TemporalFrequency => SecondBranch::Frequency(FrequencyParams {
                w_in: store.add(
                    format!("{prefix}.frequency.w_in"),
                    uniform_init(rng, &[d_model, p], d_model),
                ),
                rho_omega: store.add(
                    format!("{prefix}.frequency.rho_omega"),
                    crate::numerics::Tensor::scalar(softplus_inverse(INITIAL_OMEGA)),
                ),
            }),
            BranchLayout::DualTemporal => {
                SecondBranch::Temporal(temporal_branch(store, rng, "temporal2"))
            }
        };
        let fan = cfg.branch_count() * cfg.d_inner;
        let w_out = store.add(
            format!("{prefix}.w_out"),
            uniform_init(rng, &[fan, d_model], fan),
        );
        let b_out = store.add(format!("{prefix}.b_out"), uniform_init(rng, &[d_model], fan));
        Self {
            norm_gain,
            norm_shift,
            temporal,
            second,
            w_out,
            b_out,
        }
    }
}

/// Intermediate values of one block forward, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub phi_t: Var,
    pub y_t: Var,
    /// `[2, L', D'+2Gd]` spectrum before and after gating.
    pub spectrum_before: Option<Var>,
    pub spectrum_after: Option<Var>,
    pub y_second: Option<Var>,
    pub output: Var,
}

struct Split {
    x: Var,
    b: Var,
    c: Var,
}

fn split_xbc(g: &mut Graph, m: Var, cfg: &TfBlockConfig) -> Split {
    let di = cfg.d_inner;
    let gd = cfg.groups * cfg.d_state;
    Split {
        x: g.slice_cols(m, 0, di),
        b: g.slice_cols(m, di, di + gd),
        c: g.slice_cols(m, di + gd, di + 2 * gd),
    }
}

fn xbc_width(cfg: &TfBlockConfig) -> usize {
    cfg.d_inner + 2 * cfg.groups * cfg.d_state
}

fn check_width(g: &Graph, v: Var, width: usize, what: &str) -> Result<()> {
    let shape = g.shape(v);
    if shape.len() != 2 || shape[1] != width || shape[0] == 0 {
        return Err(Error::shape(format!(
            "{what}: expected L x {width} with L >= 1, got {shape:?}"
        )));
    }
    Ok(())
}

/// `(Φᵀ, Φᶠ) = (LN(x)·W_T, LN(x)·W_F)`.
pub fn project_inputs(
    g: &mut Graph,
    bound: &Bound,
    params: &TfBlockParams,
    input: Var,
    cfg: &TfBlockConfig,
) -> Result<(Var, Option<Var>)> {
    let d = g.value(bound.var(params.norm_gain)).len();
    check_width(g, input, d, "block input")?;
    let n = g.layer_norm(
        input,
        bound.var(params.norm_gain),
        bound.var(params.norm_shift),
        cfg.norm_eps,
    );
    let phi_t = g.matmul(n, bound.var(params.temporal.w_in));
    let phi_second = match params.second {
        SecondBranch::None => None,
        SecondBranch::Frequency(f) => Some(g.matmul(n, bound.var(f.w_in))),
        SecondBranch::Temporal(t) => Some(g.matmul(n, bound.var(t.w_in))),
    };
    Ok((phi_t, phi_second))
}

/// Causal conv and SiLU over all channels, split `[X|B|C|A]`, then the scan.
pub fn temporal_branch(
    g: &mut Graph,
    phi_t: Var,
    conv_kernel: Var,
    conv_bias: Var,
    cfg: &TfBlockConfig,
) -> Result<Var> {
    check_width(g, phi_t, cfg.proj_width(), "temporal projection")?;
    let conv = g.depthwise_conv1d(phi_t, conv_kernel, conv_bias);
    let act = g.silu(conv);
    let parts = split_xbc(g, act, cfg);
    let a_raw = g.slice_cols(act, xbc_width(cfg), cfg.proj_width());
    let decay = g.decay(a_raw);
    Ok(g.ssd(parts.x, decay, parts.b, parts.c, cfg.groups, cfg.chunk))
}

/// Gate mask applied to a `[2, L', C]` spectrum; `omega` is a one-element var.
pub fn spectral_gate_graph(g: &mut Graph, theta: Var, omega: Var, cfg: &TfBlockConfig) -> Var {
    let mut power = g.complex_power(theta);
    if cfg.normalize_power {
        power = g.div_col_mean(power, POWER_NORM_EPS);
    }
    let margin = g.sub_scalar(power, omega);
    let mask = match cfg.gate_mode {
        GateMode::Soft => {
            let z = g.scale(margin, 1.0 / cfg.gate_slope);
            g.sigmoid(z)
        }
        GateMode::Hard => g.step(margin),
    };
    g.complex_scale(theta, mask)
}

/// Output of [`frequency_branch`].
#[derive(Clone, Copy, Debug)]
pub struct FrequencyOutput {
    pub y: Var,
    pub spectrum_before: Var,
    pub spectrum_after: Var,
}

/// FFT along time of the `[X|B|C]` columns, spectral gate, inverse FFT,
/// then the scan. Decay columns bypass the transform.
pub fn frequency_branch(
    g: &mut Graph,
    phi_f: Var,
    rho_omega: Var,
    cfg: &TfBlockConfig,
) -> Result<FrequencyOutput> {
    check_width(g, phi_f, cfg.proj_width(), "frequency projection")?;
    let len = g.shape(phi_f)[0];
    let xbc = g.slice_cols(phi_f, 0, xbc_width(cfg));
    let a_raw = g.slice_cols(phi_f, xbc_width(cfg), cfg.proj_width());
    let theta = g.rfft_cols(xbc);
    let omega = g.softplus(rho_omega);
    let gated = spectral_gate_graph(g, theta, omega, cfg);
    let rec = g.irfft_cols(gated, len);
    let parts = split_xbc(g, rec, cfg);
    let decay = g.decay(a_raw);
    let y = g.ssd(parts.x, decay, parts.b, parts.c, cfg.groups, cfg.chunk);
    Ok(FrequencyOutput {
        y,
        spectrum_before: theta,
        spectrum_after: gated,
    })
}

/// `x + [Yᵀ | Y₂] · W_out + b_out`.
pub fn tf_block_forward(
    g: &mut Graph,
    bound: &Bound,
    params: &TfBlockParams,
    input: Var,
    cfg: &TfBlockConfig,
) -> Result<Var> {
    Ok(tf_block_forward_traced(g, bound, params, input, cfg)?.output)
}

pub fn tf_block_forward_traced(
    g: &mut Graph,
    bound: &Bound,
    params: &TfBlockParams,
    input: Var,
    cfg: &TfBlockConfig,
) -> Result<BlockTrace> {
    let (phi_t, phi_second) = project_inputs(g, bound, params, input, cfg)?;
    let t = params.temporal;
    let y_t = temporal_branch(
        g,
        phi_t,
        bound.var(t.conv_kernel),
        bound.var(t.conv_bias),
        cfg,
    )?;
    let mut trace = BlockTrace {
        phi_t,
        y_t,
        spectrum_before: None,
        spectrum_after: None,
        y_second: None,
        output: input,
    };
    let mixed = match (params.second, phi_second) {
        (SecondBranch::Frequency(f), Some(phi_f)) => {
            let out = frequency_branch(g, phi_f, bound.var(f.rho_omega), cfg)?;
            trace.spectrum_before = Some(out.spectrum_before);
            trace.spectrum_after = Some(out.spectrum_after);
            trace.y_second = Some(out.y);
            g.concat_cols(&[y_t, out.y])
        }
        (SecondBranch::Temporal(t2), Some(phi_2)) => {
            let y2 = temporal_branch(
                g,
                phi_2,
                bound.var(t2.conv_kernel),
                bound.var(t2.conv_bias),
                cfg,
            )?;
            trace.y_second = Some(y2);
            g.concat_cols(&[y_t, y2])
        }
        _ => y_t,
    };
    let proj = g.matmul(mixed, bound.var(params.w_out));
    let proj = g.add_row(proj, bound.var(params.b_out));
    trace.output = g.add(input, proj);
    Ok(trace)
}

/// Spectral gate on raw power, outside any graph.
///
/// Hard mode keeps bins with `|Θ|² > ω`; soft mode scales every bin by
/// `sigmoid((|Θ|² − ω) / slope)`.
pub fn spectral_gate(
    theta: &ComplexTensor,
    omega: f64,
    slope: f64,
    mode: GateMode,
) -> Result<ComplexTensor> {
    if !(slope > 0.0) {
        return Err(Error::invalid("gate slope must be positive"));
    }
    if !(omega >= 0.0) {
        return Err(Error::invalid("gate threshold must be nonnegative"));
    }
    let data: Vec<Complex64> = theta
        .data()
        .iter()
        .map(|z| {
            let p = z.norm_sqr();
            let w = match mode {
                GateMode::Hard => {
                    if p > omega {
                        1.0
                    } else {
                        0.0
                    }
                }
                GateMode::Soft => sigmoid((p - omega) / slope),
            };
            z * w
        })
        .collect();
    ComplexTensor::new(theta.shape().to_vec(), data)
}
