//! The encoder Transformer with tied embeddings, gated semantic fusion, and
//! the auxiliary semantic head. The baseline variant is the same backbone
//! without the semantic channel.
//!
//! The LM head reuses the embedding table: `logits = H E^T + b`. No separate
//! output matrix exists anywhere in the parameter list. Self-attention runs
//! under a causal mask plus a key-padding mask, both injected additively
//! before the softmax.

pub mod checkpoint;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD_ID;
use crate::numerics::rng::{chacha, derive_seed};
use crate::numerics::{NodeId, NumericsError, Real, Tape};
use crate::semantics::FEATURE_COUNT;

/// Additive mask value for disallowed attention edges.
const MASK_NEG: f64 = -1e9;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config invalid: {0}")]
    BadConfig(String),
    #[error("input invalid: {0}")]
    BadInput(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Fusion,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Baseline => write!(f, "baseline"),
            Variant::Fusion => write!(f, "fusion"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab: usize,
    pub features: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn paper_default(variant: Variant) -> Self {
        ModelConfig {
            d: 128,
            layers: 4,
            heads: 4,
            ffn: 256,
            dropout: 0.1,
            max_len: 28,
            vocab: 40,
            features: FEATURE_COUNT,
            variant,
        }
    }

    /// Small configuration for gradient checks and fast tests.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            dropout: 0.1,
            max_len: 28,
            vocab: 40,
            features: FEATURE_COUNT,
            variant,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d % 2 != 0 {
            return Err(ModelError::BadConfig(format!("d = {} must be even", self.d)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d = {} not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!("dropout = {}", self.dropout)));
        }
        if self.vocab == 0 || self.max_len == 0 || self.layers == 0 || self.ffn == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        Ok(())
    }
}

/// Standard sine/cosine table: `entry(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `entry(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Result<Array2<f64>, ModelError> {
    if d % 2 != 0 {
        return Err(ModelError::BadConfig(format!("positional table needs even d, got {d}")));
    }
    let mut table = Array2::zeros((max_len, d));
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            table[[pos, 2 * i]] = rate.sin();
            table[[pos, 2 * i + 1]] = rate.cos();
        }
    }
    Ok(table)
}

/// One named parameter array; `decay` marks whether weight decay applies.
#[derive(Debug, Clone)]
pub struct Param<F: Real> {
    pub name: String,
    pub value: ArrayD<F>,
    pub decay: bool,
}

pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub params: Vec<Param<F>>,
    index: std::collections::HashMap<String, usize>,
    /// Computed, not learned; excluded from the parameter list.
    pub positions: Array2<F>,
}

/// Node handles produced by one forward pass.
pub struct ForwardPass {
    /// Tape leaves aligned with `Model::params`.
    pub leaves: Vec<NodeId>,
    /// Final hidden states, `(B, T, d)`.
    pub hidden: NodeId,
    /// Tied-head logits, `(B, T, V)`.
    pub lm_logits: NodeId,
    /// Auxiliary semantic predictions in `(0,1)`, fusion only.
    pub aux_pred: Option<NodeId>,
}

/// Handles into the fusion block, exposed so tests can probe the gate.
pub struct FusedEmbedding {
    pub fused: NodeId,
    pub gate: NodeId,
    pub projected: NodeId,
}

/// `h = e + u + g (*) u` with `u = s W_s` and `g = sigmoid([e; s] W_g + b_g)`.
pub fn fuse(
    tape: &mut Tape<impl Real>,
    embedded: NodeId,
    sem: NodeId,
    sem_proj: NodeId,
    gate_w: NodeId,
    gate_b: NodeId,
) -> Result<FusedEmbedding, NumericsError> {
    let projected = tape.matmul(sem, sem_proj)?;
    let cat = tape.concat_last(embedded, sem)?;
    let pre = tape.matmul(cat, gate_w)?;
    let pre = tape.add(pre, gate_b)?;
    let gate = tape.sigmoid(pre);
    let gated = tape.mul(gate, projected)?;
    let residual = tape.add(embedded, projected)?;
    let fused = tape.add(residual, gated)?;
    Ok(FusedEmbedding { fused, gate, projected })
}

impl<F: Real> Model<F> {
    /// Initialize parameters from `seed`.
    ///
    /// Weights draw from a zero-mean uniform distribution with standard
    /// deviation `1/sqrt(fan_in)`; biases, the output bias, and the gate bias
    /// start at zero; layer-norm gains start at one. Parameters are drawn in
    /// manifest order from a dedicated "init" stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = chacha(derive_seed(seed, "init"));
        let mut params: Vec<Param<F>> = Vec::new();

        let mut uniform = |name: &str, shape: &[usize], fan_in: usize, decay: bool| {
            let bound = (3.0 / fan_in as f64).sqrt();
            let value = ArrayD::from_shape_fn(IxDyn(shape), |_| {
                F::from_f64(rng.random_range(-bound..bound))
            });
            Param { name: name.to_string(), value, decay }
        };
        let zeros = |name: &str, shape: &[usize]| Param {
            name: name.to_string(),
            value: ArrayD::zeros(IxDyn(shape)),
            decay: false,
        };
        let ones = |name: &str, shape: &[usize]| Param {
            name: name.to_string(),
            value: ArrayD::from_elem(IxDyn(shape), F::one()),
            decay: false,
        };

        let (d, v, f, ffn) = (config.d, config.vocab, config.features, config.ffn);
        params.push(uniform("embed", &[v, d], d, true));
        params.push(zeros("out_bias", &[v]));
        if config.variant == Variant::Fusion {
            params.push(uniform("sem_proj", &[f, d], f, true));
            params.push(uniform("gate_w", &[d + f, d], d + f, true));
            params.push(zeros("gate_b", &[d]));
        }
        for li in 0..config.layers {
            let p = |s: &str| format!("enc{li}.{s}");
            params.push(uniform(&p("attn_wq"), &[d, d], d, true));
            params.push(zeros(&p("attn_bq"), &[d]));
            params.push(uniform(&p("attn_wk"), &[d, d], d, true));
            params.push(zeros(&p("attn_bk"), &[d]));
            params.push(uniform(&p("attn_wv"), &[d, d], d, true));
            params.push(zeros(&p("attn_bv"), &[d]));
            params.push(uniform(&p("attn_wo"), &[d, d], d, true));
            params.push(zeros(&p("attn_bo"), &[d]));
            params.push(ones(&p("ln1_g"), &[d]));
            params.push(zeros(&p("ln1_b"), &[d]));
            params.push(uniform(&p("ffn_w1"), &[d, ffn], d, true));
            params.push(zeros(&p("ffn_b1"), &[ffn]));
            params.push(uniform(&p("ffn_w2"), &[ffn, d], ffn, true));
            params.push(zeros(&p("ffn_b2"), &[d]));
            params.push(ones(&p("ln2_g"), &[d]));
            params.push(zeros(&p("ln2_b"), &[d]));
        }
        if config.variant == Variant::Fusion {
            params.push(uniform("aux_w1", &[d, d], d, true));
            params.push(zeros("aux_b1", &[d]));
            params.push(uniform("aux_w2", &[d, f], d, true));
            params.push(zeros("aux_b2", &[f]));
        }

        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: Vec<Param<F>>) -> Result<Self, ModelError> {
        config.validate()?;
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let positions = sinusoidal_positions(config.max_len, config.d)?.mapv(F::from_f64);
        Ok(Model { config, params, index, positions })
    }

    pub fn param_index(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn param(&self, name: &str) -> &Param<F> {
        &self.params[self.param_index(name)]
    }

    pub fn parameter_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register every parameter as a trainable tape leaf, in order.
    pub fn leaves(&self, tape: &mut Tape<F>) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Additive attention mask: causal (keys at positions after the query are
    /// blocked) plus key-padding.
    fn attention_mask(&self, ids: &Array2<usize>) -> Array3<F> {
        let (b, t) = ids.dim();
        let neg = F::from_f64(MASK_NEG);
        Array3::from_shape_fn((b, t, t), |(bi, q, k)| {
            if k <= q && ids[[bi, k]] != PAD_ID {
                F::zero()
            } else {
                neg
            }
        })
    }

    /// Teacher-forced pass over a batch of id rows. `sem` must be present
    /// exactly for the fusion variant and row-aligned with `ids`. Dropout
    /// applies when the tape is in train mode.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        ids: &Array2<usize>,
        sem: Option<&Array3<F>>,
    ) -> Result<ForwardPass, ModelError> {
        let leaves = self.leaves(tape);
        self.forward_with_leaves(tape, leaves, ids, sem)
    }

    /// Forward pass over caller-provided parameter leaves (ordered like
    /// `Model::params`); the gradient checker perturbs leaves directly.
    pub fn forward_with_leaves(
        &self,
        tape: &mut Tape<F>,
        leaves: Vec<NodeId>,
        ids: &Array2<usize>,
        sem: Option<&Array3<F>>,
    ) -> Result<ForwardPass, ModelError> {
        let (b, t) = ids.dim();
        let cfg = &self.config;
        if t == 0 || t > cfg.max_len {
            return Err(ModelError::BadInput(format!(
                "sequence length {t} outside 1..={}",
                cfg.max_len
            )));
        }
        if ids.iter().any(|&id| id >= cfg.vocab) {
            return Err(ModelError::BadInput("token id out of vocabulary".into()));
        }
        match (cfg.variant, sem) {
            (Variant::Fusion, None) => {
                return Err(ModelError::BadInput("fusion forward needs a semantic matrix".into()))
            }
            (Variant::Baseline, Some(_)) => {
                return Err(ModelError::BadInput("baseline forward takes no semantic matrix".into()))
            }
            (Variant::Fusion, Some(s)) => {
                if s.dim() != (b, t, cfg.features) {
                    return Err(ModelError::BadInput(format!(
                        "semantic matrix shape {:?} does not match ids {:?}",
                        s.dim(),
                        (b, t, cfg.features)
                    )));
                }
            }
            (Variant::Baseline, None) => {}
        }
        if leaves.len() != self.params.len() {
            return Err(ModelError::BadInput(format!(
                "{} leaves for {} parameters",
                leaves.len(),
                self.params.len()
            )));
        }

        let at = |name: &str| leaves[self.param_index(name)];

        let flat_ids: Vec<usize> = ids.iter().copied().collect();
        let embed = at("embed");
        let gathered = tape.gather_rows(embed, &flat_ids)?;
        let e = tape.reshape(gathered, &[b, t, cfg.d])?;

        let h0 = if let Some(s) = sem {
            let sem_c = tape.constant(s.to_owned().into_dyn());
            let fused = fuse(tape, e, sem_c, at("sem_proj"), at("gate_w"), at("gate_b"))?;
            fused.fused
        } else {
            e
        };

        let pos = self.positions.slice(ndarray::s![..t, ..]).to_owned().into_dyn();
        let pos = tape.constant(pos);
        let mut h = tape.add(h0, pos)?;
        h = tape.dropout(h, cfg.dropout)?;

        let mask = tape.constant(self.attention_mask(ids).into_dyn());
        for li in 0..cfg.layers {
            h = self.encoder_layer(tape, h, mask, li, &leaves)?;
        }

        let e_t = tape.transpose_last2(embed)?;
        let logits = tape.matmul(h, e_t)?;
        let lm_logits = tape.add(logits, at("out_bias"))?;

        let aux_pred = if cfg.variant == Variant::Fusion {
            let z = tape.matmul(h, at("aux_w1"))?;
            let z = tape.add(z, at("aux_b1"))?;
            let z = tape.tanh(z);
            let z = tape.matmul(z, at("aux_w2"))?;
            let z = tape.add(z, at("aux_b2"))?;
            Some(tape.sigmoid(z))
        } else {
            None
        };

        Ok(ForwardPass { leaves, hidden: h, lm_logits, aux_pred })
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape<F>,
        h: NodeId,
        mask: NodeId,
        li: usize,
        leaves: &[NodeId],
    ) -> Result<NodeId, ModelError> {
        let cfg = &self.config;
        let at = |name: String| leaves[self.param_index(&name)];
        let p = |s: &str| format!("enc{li}.{s}");
        let lin = |tape: &mut Tape<F>, x: NodeId, w: NodeId, bias: NodeId| -> Result<NodeId, NumericsError> {
            let y = tape.matmul(x, w)?;
            tape.add(y, bias)
        };

        let q = lin(tape, h, at(p("attn_wq")), at(p("attn_bq")))?;
        let k = lin(tape, h, at(p("attn_wk")), at(p("attn_bk")))?;
        let v = lin(tape, h, at(p("attn_wv")), at(p("attn_bv")))?;

        let dh = cfg.d / cfg.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut merged: Option<NodeId> = None;
        for head in 0..cfg.heads {
            let qh = tape.slice_last(q, head * dh, dh)?;
            let kh = tape.slice_last(k, head * dh, dh)?;
            let vh = tape.slice_last(v, head * dh, dh)?;
            let kt = tape.transpose_last2(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.affine(scores, scale, F::zero());
            let scores = tape.add(scores, mask)?;
            let attn = tape.softmax_last(scores);
            let attn = tape.dropout(attn, cfg.dropout)?;
            let ctx = tape.matmul(attn, vh)?;
            merged = Some(match merged {
                None => ctx,
                Some(m) => tape.concat_last(m, ctx)?,
            });
        }
        let ctx = merged.expect("at least one head");
        let proj = lin(tape, ctx, at(p("attn_wo")), at(p("attn_bo")))?;
        let res1 = tape.add(h, proj)?;
        let x1 = tape.layer_norm(res1, at(p("ln1_g")), at(p("ln1_b")))?;

        let f1 = lin(tape, x1, at(p("ffn_w1")), at(p("ffn_b1")))?;
        let f1 = tape.relu(f1);
        let f2 = lin(tape, f1, at(p("ffn_w2")), at(p("ffn_b2")))?;
        let f2 = tape.dropout(f2, cfg.dropout)?;
        let res2 = tape.add(x1, f2)?;
        Ok(tape.layer_norm(res2, at(p("ln2_g")), at(p("ln2_b")))?)
    }
}
