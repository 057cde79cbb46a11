use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{masked, TokenSampler};
use crate::backbone::{BackboneConfig, Encoder};
use crate::config::ConfigError;
use crate::data::{MASK, PAD, SEP, UNK};
use crate::nn::Linear;
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Mode, ParamStore, Var};

/// Size of the small masked-language model that proposes replacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone(8, 2).validate().map_err(|e| match e {
            ConfigError::Invalid { key, detail } => ConfigError::Invalid {
                key: format!("generator.{key}"),
                detail,
            },
            other => other,
        })
    }

    fn backbone(&self, vocab_size: usize, max_seq_len: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len,
            dropout_p: 0.0,
        }
    }
}

/// Encoder plus vocabulary projection, with its own parameter store.
#[derive(Debug, Clone)]
pub struct Generator<F> {
    pub encoder: Encoder<F>,
    pub proj: Linear,
    pub store: ParamStore<F>,
    /// Samples are restricted to non-reserved ids below this bound.
    pub active_vocab: usize,
}

fn reserved(id: usize) -> bool {
    matches!(id, PAD | UNK | SEP | MASK)
}

impl<F: Scalar> Generator<F> {
    pub fn new<R: Rng + ?Sized>(
        cfg: &GeneratorConfig,
        vocab_size: usize,
        max_seq_len: usize,
        active_vocab: usize,
        rng: &mut R,
    ) -> crate::Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            cfg.backbone(vocab_size, max_seq_len),
            &mut store,
            "generator",
            rng,
        )?;
        let proj = Linear::new(&mut store, "generator.proj", cfg.d_model, vocab_size, rng)?;
        Ok(Generator {
            encoder,
            proj,
            store,
            active_vocab: active_vocab.min(vocab_size),
        })
    }

    /// Vocabulary logits `[positions, V]` for the masked input.
    pub fn logits(
        &self,
        g: &mut Graph<F>,
        masked_ids: &[usize],
        positions: &[usize],
        rng: &mut StreamRng,
    ) -> crate::Result<Var> {
        let h = self
            .encoder
            .encode(g, &self.store, masked_ids, Mode::Train, rng)?;
        let h = g.gather_rows(h, positions)?;
        Ok(self.proj.forward(g, &self.store, h)?)
    }

    /// Mean cross-entropy of the originals at the masked positions.
    pub fn mlm_loss(
        &self,
        g: &mut Graph<F>,
        logits: Var,
        originals: &[usize],
    ) -> crate::Result<Var> {
        let logp = g.log_softmax(logits)?;
        let picked = g.pick(logp, originals)?;
        let total = g.sum(picked)?;
        Ok(g.scale(total, -F::one() / F::from_usize_lossy(originals.len()))?)
    }

    /// One draw per logit row from the softmax over allowed ids.
    pub fn sample_rows(&self, logits: &[f64], n_cols: usize, rng: &mut StreamRng) -> Vec<usize> {
        logits
            .chunks(n_cols)
            .map(|row| {
                let allowed = |j: usize| j < self.active_vocab && !reserved(j);
                let max = (0..n_cols)
                    .filter(|&j| allowed(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = (0..n_cols)
                    .map(|j| {
                        if allowed(j) {
                            (row[j] - max).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut last = 0;
                for (j, w) in weights.iter().enumerate() {
                    if *w > 0.0 {
                        last = j;
                        if u < *w {
                            return j;
                        }
                        u -= w;
                    }
                }
                last
            })
            .collect()
    }
}

impl<F: Scalar> TokenSampler for Generator<F> {
    fn sample(
        &mut self,
        ids: &[usize],
        positions: &[usize],
        rng: &mut StreamRng,
    ) -> crate::Result<Vec<usize>> {
        let mut g = Graph::new();
        let input = masked(ids, positions);
        let logits = self.logits(&mut g, &input, positions, rng)?;
        let v = g.value(logits);
        let cols = v.last_dim();
        Ok(self.sample_rows(&v.to_f64_vec(), cols, rng))
    }
}
