//! Embedding intake, self-attention encoder, block stack, mean pooling and
//! the MLP classifier, plus the class prototypes used by the contrastive loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cmdt_loss_graph, LossConfig};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{uniform_init, Bound, ParamId, ParamStore};
use crate::tf_block::{tf_block_forward, TfBlockConfig, TfBlockParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width of the input features.
    pub d_in: usize,
    pub heads: usize,
    /// Model width after the encoder's input projection. Without the
    /// encoder the model runs at `d_in` and this field is unused.
    pub d_model: usize,
    pub block: TfBlockConfig,
    pub n_blocks: usize,
    pub classes: usize,
    pub mlp_hidden: usize,
    pub use_attention: bool,
    pub use_blocks: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 1024,
            heads: 8,
            d_model: 1024,
            block: TfBlockConfig::default(),
            n_blocks: 1,
            classes: 4,
            mlp_hidden: 256,
            use_attention: true,
            use_blocks: true,
        }
    }
}

impl ModelConfig {
    /// Width of the token stream after the encoder, and of the pooled vector.
    pub fn width(&self) -> usize {
        if self.use_attention {
            self.d_model
        } else {
            self.d_in
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("model.{m}")));
        if self.d_in == 0 {
            return fail("d_in must be >= 1");
        }
        if self.use_attention {
            if self.d_model == 0 || self.heads == 0 {
                return fail("d_model and heads must be >= 1");
            }
            if self.d_model % self.heads != 0 {
                return fail(&format!(
                    "d_model ({}) must be divisible by heads ({})",
                    self.d_model, self.heads
                ));
            }
        }
        if self.n_blocks == 0 {
            return fail("n_blocks must be >= 1");
        }
        if self.classes < 2 {
            return fail("classes must be >= 2");
        }
        if self.mlp_hidden == 0 {
            return fail("mlp_hidden must be >= 1");
        }
        if self.width() < 2 {
            return fail("model width must be >= 2 for the complex-domain loss");
        }
        self.block.validate()
    }

    /// Closed-form count of learnable scalars.
    pub fn param_count(&self) -> usize {
        let w = self.width();
        let encoder = if self.use_attention {
            let d = self.d_model;
            self.d_in * d + d + 2 * d + 4 * d * d + d
        } else {
            0
        };
        let blocks = if self.use_blocks {
            self.n_blocks * self.block.param_count(w)
        } else {
            0
        };
        encoder
            + blocks
            + classifier_param_count(w, self.mlp_hidden, self.classes)
            + self.classes * w
    }
}

/// Scalars of the two-layer classifier `d → hidden → classes`.
pub fn classifier_param_count(d: usize, hidden: usize, classes: usize) -> usize {
    d * hidden + hidden + hidden * classes + classes
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub norm_gain: ParamId,
    pub norm_shift: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelParams {
    pub encoder: Option<EncoderParams>,
    pub blocks: Vec<TfBlockParams>,
    pub classifier: ClassifierParams,
    pub prototypes: ParamId,
}

/// Configuration, parameter values and handles of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

/// Per-utterance outputs of [`model_forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `1 x K`.
    pub logits: Var,
    /// `1 x width`.
    pub pooled: Var,
}

/// Loss terms of one batch. `cmdt` is present only when `λ > 0`.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub ce: Var,
    pub cmdt: Option<Var>,
    /// `N x K`.
    pub logits: Var,
    /// `N x width`.
    pub pooled: Var,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let w = config.width();
        let encoder = config.use_attention.then(|| {
            let d = config.d_model;
            let mut dense = |store: &mut ParamStore, name: &str, fan: usize, shape: &[usize]| {
                store.add(format!("encoder.{name}"), uniform_init(rng, shape, fan))
            };
            EncoderParams {
                w_in: dense(&mut store, "w_in", config.d_in, &[config.d_in, d]),
                b_in: dense(&mut store, "b_in", config.d_in, &[d]),
                norm_gain: store.add("encoder.norm.gain", Tensor::full(&[d], 1.0)),
                norm_shift: store.add("encoder.norm.shift", Tensor::zeros(&[d])),
                w_q: dense(&mut store, "w_q", d, &[d, d]),
                w_k: dense(&mut store, "w_k", d, &[d, d]),
                w_v: dense(&mut store, "w_v", d, &[d, d]),
                w_o: dense(&mut store, "w_o", d, &[d, d]),
                b_o: dense(&mut store, "b_o", d, &[d]),
            }
        });
        let blocks = if config.use_blocks {
            (0..config.n_blocks)
                .map(|i| TfBlockParams::init(&mut store, &format!("blocks.{i}"), w, &config.block, rng))
                .collect()
        } else {
            Vec::new()
        };
        let (h, k) = (config.mlp_hidden, config.classes);
        let classifier = ClassifierParams {
            w1: store.add("classifier.w1", uniform_init(rng, &[w, h], w)),
            b1: store.add("classifier.b1", uniform_init(rng, &[h], w)),
            w2: store.add("classifier.w2", uniform_init(rng, &[h, k], h)),
            b2: store.add("classifier.b2", uniform_init(rng, &[k], h)),
        };
        let prototypes = store.add("prototypes", uniform_init(rng, &[k, w], w));
        Ok(Self {
            config,
            store,
            params: ModelParams {
                encoder,
                blocks,
                classifier,
                prototypes,
            },
        })
    }

    /// Rebuilds handles for a store whose names and shapes follow `config`,
    /// e.g. one restored from a checkpoint.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let template = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if template.store.names() != store.names() {
            return Err(Error::Config(
                "parameter names do not match the model configuration".into(),
            ));
        }
        for ((name, a), (_, b)) in template.store.iter().zip(store.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Self {
            config: template.config,
            store,
            params: template.params,
        })
    }

    /// Logits and pooled vector of one utterance, outside any training graph.
    pub fn predict(&self, features: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let x = g.constant(features.clone());
        let out = model_forward(&mut g, &bound, &self.params, x, &self.config)?;
        Ok((
            g.value(out.logits).data().to_vec(),
            g.value(out.pooled).data().to_vec(),
        ))
    }
}

/// `Λ₁ = h + MHA(LN(h))` with `h = Λ₀·W_in + b_in`.
pub fn attention_encoder(
    g: &mut Graph,
    bound: &Bound,
    p: &EncoderParams,
    input: Var,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(input).to_vec();
    let d_in = g.shape(bound.var(p.w_in))[0];
    if shape.len() != 2 || shape[0] == 0 || shape[1] != d_in {
        return Err(Error::shape(format!(
            "encoder input: expected L x {d_in} with L >= 1, got {shape:?}"
        )));
    }
    let d = g.shape(bound.var(p.w_in))[1];
    let h = g.matmul(input, bound.var(p.w_in));
    let h = g.add_row(h, bound.var(p.b_in));
    let n = g.layer_norm(h, bound.var(p.norm_gain), bound.var(p.norm_shift), 1e-5);
    let q = g.matmul(n, bound.var(p.w_q));
    let k = g.matmul(n, bound.var(p.w_k));
    let v = g.matmul(n, bound.var(p.w_v));
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, vh));
    }
    let heads_out = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    let o = g.matmul(heads_out, bound.var(p.w_o));
    let o = g.add_row(o, bound.var(p.b_o));
    Ok(g.add(h, o))
}

/// Mean over the token axis of an `L x D` matrix.
pub fn pool_mean(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.dims2()?;
    if rows == 0 {
        return Err(Error::invalid("pooling needs L >= 1"));
    }
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    Ok(Tensor::vector(out))
}

/// `SiLU(pooled·W1 + b1)·W2 + b2` on a `1 x D` or `N x D` var.
pub fn classifier_forward(g: &mut Graph, bound: &Bound, p: &ClassifierParams, pooled: Var) -> Var {
    let h = g.matmul(pooled, bound.var(p.w1));
    let h = g.add_row(h, bound.var(p.b1));
    let h = g.silu(h);
    let o = g.matmul(h, bound.var(p.w2));
    g.add_row(o, bound.var(p.b2))
}

pub fn model_forward(
    g: &mut Graph,
    bound: &Bound,
    params: &ModelParams,
    input: Var,
    cfg: &ModelConfig,
) -> Result<ForwardVars> {
    let shape = g.shape(input).to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] != cfg.d_in {
        return Err(Error::shape(format!(
            "model input: expected L x {} with L >= 1, got {shape:?}",
            cfg.d_in
        )));
    }
    let mut m = match &params.encoder {
        Some(p) => attention_encoder(g, bound, p, input, cfg.heads)?,
        None => input,
    };
    for block in &params.blocks {
        m = tf_block_forward(g, bound, block, m, &cfg.block)?;
    }
    let pooled = g.mean_rows(m);
    let logits = classifier_forward(g, bound, &params.classifier, pooled);
    Ok(ForwardVars { logits, pooled })
}

/// Forward pass of a batch and `ce + λ·cmdt`.
pub fn batch_loss(
    g: &mut Graph,
    bound: &Bound,
    model: &Model,
    batch: &[(&Tensor, usize)],
    loss: &LossConfig,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut logits = Vec::with_capacity(batch.len());
    let mut pooled = Vec::with_capacity(batch.len());
    for (features, _) in batch {
        let x = g.constant((*features).clone());
        let out = model_forward(g, bound, &model.params, x, &model.config)?;
        logits.push(out.logits);
        pooled.push(out.pooled);
    }
    let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
    let logits = g.concat_rows(&logits);
    let pooled = g.concat_rows(&pooled);
    let ce = g.cross_entropy(logits, &labels)?;
    let (total, cmdt) = if loss.lambda > 0.0 {
        let protos = bound.var(model.params.prototypes);
        let cmdt = cmdt_loss_graph(g, pooled, &labels, protos, loss)?;
        let weighted = g.scale(cmdt, loss.lambda);
        (g.add(ce, weighted), Some(cmdt))
    } else {
        (ce, None)
    };
    Ok(BatchLoss {
        total,
        ce,
        cmdt,
        logits,
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_count_example() {
        assert_eq!(classifier_param_count(4, 8, 4), 76);
    }

    #[test]
    fn rejects_degenerate_configs() {
        let base = ModelConfig {
            d_in: 6,
            d_model: 8,
            heads: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bad in [
            ModelConfig { n_blocks: 0, ..base.clone() },
            ModelConfig { classes: 1, ..base.clone() },
            ModelConfig { heads: 3, ..base.clone() },
        ] {
            assert!(matches!(Model::new(bad, &mut rng), Err(Error::Config(_))));
        }
    }

    #[test]
    fn pool_mean_examples() {
        let one = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(pool_mean(&one).unwrap().data(), one.data());
        let sym = Tensor::matrix(2, 2, vec![1.5, -3.0, -1.5, 3.0]).unwrap();
        assert_eq!(pool_mean(&sym).unwrap().data(), &[0.0, 0.0]);
        assert!(pool_mean(&Tensor::zeros(&[0, 3])).is_err());
    }
}
