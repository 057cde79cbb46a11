//! Pre-norm transformer encoder producing one contextual vector per token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::nn::{normal_tensor, LayerNorm, Linear, INIT_STD};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Mode, ParamId, ParamStore, Tensor, TensorError, Var};

/// Additive attention bias for padded key positions.
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            dropout_p: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, detail: String| {
            Err(ConfigError::Invalid {
                key: key.to_string(),
                detail,
            })
        };
        if self.vocab_size < 8 {
            return bad("vocab_size", format!("{} < 8", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len", format!("{} < 2", self.max_seq_len));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(
                "d_model",
                format!("{} not divisible by n_heads {}", self.d_model, self.n_heads),
            );
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers", "n_layers and d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p", format!("{} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Learnable scalars in one encoder block.
    pub fn per_layer_param_count(&self) -> usize {
        let d = self.d_model;
        2 * LayerNorm::param_count(d)
            + 4 * Linear::param_count(d, d)
            + Linear::param_count(d, self.d_ff)
            + Linear::param_count(self.d_ff, d)
    }

    /// Exact learnable scalar count of an [`Encoder`] built from this config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d
            + self.max_seq_len * d
            + self.n_layers * self.per_layer_param_count()
            + LayerNorm::param_count(d)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Token + learned position embeddings followed by pre-norm attention/FFN blocks.
#[derive(Debug, Clone)]
pub struct Encoder<F> {
    config: BackboneConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    _scalar: std::marker::PhantomData<F>,
}

/// Per-layer, per-head attention probability nodes from a traced pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub probs: Vec<Vec<Var>>,
}

impl<F: Scalar> Encoder<F> {
    /// Registers freshly initialised parameters under `prefix`.
    pub fn new<R: Rng + ?Sized>(
        config: BackboneConfig,
        store: &mut ParamStore<F>,
        prefix: &str,
        rng: &mut R,
    ) -> crate::Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok_emb = store.add(
            format!("{prefix}.tok_emb"),
            normal_tensor(vec![config.vocab_size, d], INIT_STD, rng),
            true,
        )?;
        let pos_emb = store.add(
            format!("{prefix}.pos_emb"),
            normal_tensor(vec![config.max_seq_len, d], INIT_STD, rng),
            true,
        )?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("{prefix}.layers.{l}");
            blocks.push(Block {
                ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d)?,
                query: Linear::new(store, &format!("{p}.attn.query"), d, d, rng)?,
                key: Linear::new(store, &format!("{p}.attn.key"), d, d, rng)?,
                value: Linear::new(store, &format!("{p}.attn.value"), d, d, rng)?,
                out: Linear::new(store, &format!("{p}.attn.out"), d, d, rng)?,
                ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d)?,
                ffn_in: Linear::new(store, &format!("{p}.ffn.in"), d, config.d_ff, rng)?,
                ffn_out: Linear::new(store, &format!("{p}.ffn.out"), config.d_ff, d, rng)?,
            });
        }
        let ln_final = LayerNorm::new(store, &format!("{prefix}.ln_final"), d)?;
        Ok(Encoder {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_final,
            _scalar: std::marker::PhantomData,
        })
    }

    /// Rebinds to parameters already present in `store` (e.g. from a checkpoint).
    pub fn bind(
        config: BackboneConfig,
        store: &ParamStore<F>,
        prefix: &str,
    ) -> crate::Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let lookup = |name: String, shape: &[usize]| -> crate::Result<ParamId> {
            crate::checkpoint::expect_param(store, &name, shape)
        };
        let linear = |name: String, i: usize, o: usize| -> crate::Result<Linear> {
            Ok(Linear {
                weight: lookup(format!("{name}.weight"), &[i, o])?,
                bias: lookup(format!("{name}.bias"), &[o])?,
            })
        };
        let norm = |name: String| -> crate::Result<LayerNorm> {
            Ok(LayerNorm {
                gamma: lookup(format!("{name}.gamma"), &[d])?,
                beta: lookup(format!("{name}.beta"), &[d])?,
            })
        };
        let tok_emb = lookup(format!("{prefix}.tok_emb"), &[config.vocab_size, d])?;
        let pos_emb = lookup(format!("{prefix}.pos_emb"), &[config.max_seq_len, d])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("{prefix}.layers.{l}");
            blocks.push(Block {
                ln_attn: norm(format!("{p}.ln_attn"))?,
                query: linear(format!("{p}.attn.query"), d, d)?,
                key: linear(format!("{p}.attn.key"), d, d)?,
                value: linear(format!("{p}.attn.value"), d, d)?,
                out: linear(format!("{p}.attn.out"), d, d)?,
                ln_ffn: norm(format!("{p}.ln_ffn"))?,
                ffn_in: linear(format!("{p}.ffn.in"), d, config.d_ff)?,
                ffn_out: linear(format!("{p}.ffn.out"), config.d_ff, d)?,
            });
        }
        let ln_final = norm(format!("{prefix}.ln_final"))?;
        Ok(Encoder {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_final,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Every parameter id owned by the encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            for n in [b.ln_attn, b.ln_ffn] {
                ids.extend([n.gamma, n.beta]);
            }
            for l in [b.query, b.key, b.value, b.out, b.ffn_in, b.ffn_out] {
                ids.extend([l.weight, l.bias]);
            }
        }
        ids.extend([self.ln_final.gamma, self.ln_final.beta]);
        ids
    }

    /// Contextual representations `[n, d_model]` for `ids`.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ids: &[usize],
        mode: Mode,
        rng: &mut StreamRng,
    ) -> crate::Result<Var> {
        self.encode_padded(g, store, ids, ids.len(), mode, rng)
    }

    /// Like [`Encoder::encode`] but positions `n_valid..` are padding and are
    /// never attended to.
    pub fn encode_padded(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ids: &[usize],
        n_valid: usize,
        mode: Mode,
        rng: &mut StreamRng,
    ) -> crate::Result<Var> {
        Ok(self.forward(g, store, ids, n_valid, mode, rng, None)?)
    }

    /// Encodes and records every attention probability matrix.
    pub fn encode_traced(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ids: &[usize],
        mode: Mode,
        rng: &mut StreamRng,
    ) -> crate::Result<(Var, AttentionTrace)> {
        let mut trace = AttentionTrace::default();
        let h = self.forward(g, store, ids, ids.len(), mode, rng, Some(&mut trace))?;
        Ok((h, trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ids: &[usize],
        n_valid: usize,
        mode: Mode,
        rng: &mut StreamRng,
        mut trace: Option<&mut AttentionTrace>,
    ) -> crate::Result<Var> {
        let n = ids.len();
        let cfg = &self.config;
        if n == 0 || n > cfg.max_seq_len {
            return Err(TensorError::Invalid {
                op: "encode",
                detail: format!("sequence length {n} outside 1..={}", cfg.max_seq_len),
            }
            .into());
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(TensorError::Invalid {
                op: "encode",
                detail: format!("token id {bad} >= vocab size {}", cfg.vocab_size),
            }
            .into());
        }
        if n_valid == 0 || n_valid > n {
            return Err(TensorError::Invalid {
                op: "encode",
                detail: format!("{n_valid} valid positions of {n}"),
            }
            .into());
        }
        let p = F::lit(cfg.dropout_p);
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let te = g.gather_rows(tok, ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pe = g.gather_rows(pos, &positions)?;
        let mut h = g.add(te, pe)?;
        h = g.dropout(h, p, mode, rng)?;

        let mask = if n_valid < n {
            let mut m = Tensor::zeros(vec![n, n]);
            for r in 0..n {
                for c in n_valid..n {
                    m.data_mut()[r * n + c] = F::lit(MASKED_SCORE);
                }
            }
            Some(g.constant(m))
        } else {
            None
        };

        for block in &self.blocks {
            let x = block.ln_attn.forward(g, store, h)?;
            let (attn, probs) = self.attention(g, store, block, x, mask)?;
            if let Some(t) = trace.as_deref_mut() {
                t.probs.push(probs);
            }
            let attn = g.dropout(attn, p, mode, rng)?;
            h = g.add(h, attn)?;

            let x = block.ln_ffn.forward(g, store, h)?;
            let x = block.ffn_in.forward(g, store, x)?;
            let x = g.gelu(x)?;
            let x = block.ffn_out.forward(g, store, x)?;
            let x = g.dropout(x, p, mode, rng)?;
            h = g.add(h, x)?;
        }
        Ok(self.ln_final.forward(g, store, h)?)
    }

    fn attention(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        block: &Block,
        x: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Vec<Var>), TensorError> {
        let dh = self.config.head_dim();
        let scale = F::one() / F::from_usize_lossy(dh).sqrt();
        let q = block.query.forward(g, store, x)?;
        let k = block.key.forward(g, store, x)?;
        let v = block.value.forward(g, store, x)?;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut probs = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.config.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, a, b)?,
                    g.slice_cols(k, a, b)?,
                    g.slice_cols(v, a, b)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let p = g.softmax(scores)?;
            probs.push(p);
            heads.push(g.matmul(p, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Ok((block.out.forward(g, store, merged)?, probs))
    }
}
