use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    apply_replacements, majority_bound, masked, select_positions, Corpus, Generator,
    GeneratorConfig,
};
use crate::backbone::{BackboneConfig, Encoder};
use crate::checkpoint::{
    Architecture, Checkpoint, CheckpointError, CheckpointMeta, Provenance, FORMAT_VERSION,
};
use crate::config::ConfigError;
use crate::heads::PretrainedHead;
use crate::model::ENCODER_PREFIX;
use crate::nn::Linear;
use crate::rng::{stream, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::{Activation, Gradients, Graph, Mode, ParamStore, Var};
use crate::training::{linear_schedule, AdamW};

pub const RTD_HEAD_PREFIX: &str = "rtd_head";

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub generator_learning_rate: f64,
    pub mask_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Activation inside the LM head.
    pub lm_activation: Activation,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 16,
            learning_rate: 2e-3,
            generator_learning_rate: 5e-3,
            mask_rate: 0.15,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            lm_activation: Activation::Gelu,
            seed: 13,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, detail: String| {
            Err(ConfigError::Invalid {
                key: format!("pretrain.{key}"),
                detail,
            })
        };
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps", "steps and batch_size must be positive".into());
        }
        for (k, v) in [
            ("learning_rate", self.learning_rate),
            ("generator_learning_rate", self.generator_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(k, format!("{v} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return bad("mask_rate", format!("{} outside [0, 1)", self.mask_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(
                "warmup_ratio",
                format!("{} outside [0, 1)", self.warmup_ratio),
            );
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("{} is negative", self.weight_decay));
        }
        Ok(())
    }
}

/// Encoder, LM head and binary RTD head sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Discriminator<F> {
    pub encoder: Encoder<F>,
    pub lm_head: PretrainedHead<F>,
    pub rtd_head: Linear,
    pub store: ParamStore<F>,
}

impl<F: Scalar> Discriminator<F> {
    pub fn new<R: Rng + ?Sized>(
        backbone: &BackboneConfig,
        activation: Activation,
        rng: &mut R,
    ) -> crate::Result<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(backbone.clone(), &mut store, ENCODER_PREFIX, rng)?;
        let lm_head = PretrainedHead::new(&mut store, backbone.d_model, activation, rng)?;
        let rtd_head = Linear::new(&mut store, RTD_HEAD_PREFIX, backbone.d_model, 1, rng)?;
        Ok(Discriminator {
            encoder,
            lm_head,
            rtd_head,
            store,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<F>) -> crate::Result<Self> {
        let arch = &ckpt.meta.architecture;
        if !arch.has_lm_head || !arch.has_rtd_head {
            return Err(CheckpointError::MissingComponent("LM and RTD heads").into());
        }
        let act = Activation::parse(&arch.lm_activation).ok_or_else(|| {
            CheckpointError::Corrupt(format!("unknown activation {:?}", arch.lm_activation))
        })?;
        let backbone = arch.backbone.clone();
        let d = backbone.d_model;
        let store = ckpt.params;
        Ok(Discriminator {
            encoder: Encoder::bind(backbone, &store, ENCODER_PREFIX)?,
            lm_head: PretrainedHead::bind(&store, d, act)?,
            rtd_head: Linear {
                weight: crate::checkpoint::expect_param(
                    &store,
                    &format!("{RTD_HEAD_PREFIX}.weight"),
                    &[d, 1],
                )?,
                bias: crate::checkpoint::expect_param(
                    &store,
                    &format!("{RTD_HEAD_PREFIX}.bias"),
                    &[1],
                )?,
            },
            store,
        })
    }

    pub fn to_checkpoint(&self, vocab: &[String], provenance: Provenance) -> Checkpoint<F> {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                architecture: Architecture {
                    backbone: self.encoder.config().clone(),
                    lm_activation: self.lm_head.activation.name().to_string(),
                    has_lm_head: true,
                    has_rtd_head: true,
                    task_head: None,
                },
                vocab: vocab.to_vec(),
                provenance,
                content_hash: String::new(),
            },
            params: self.store.clone(),
        }
    }

    /// "Is original" logits `[n, 1]`.
    pub fn logits(
        &self,
        g: &mut Graph<F>,
        ids: &[usize],
        mode: Mode,
        rng: &mut StreamRng,
    ) -> crate::Result<Var> {
        let h = self.encoder.encode(g, &self.store, ids, mode, rng)?;
        let h = self.lm_head.forward(g, &self.store, h)?;
        Ok(self.rtd_head.forward(g, &self.store, h)?)
    }

    /// Token-mean binary cross-entropy against the flags.
    pub fn loss(
        &self,
        g: &mut Graph<F>,
        ids: &[usize],
        flags: &[bool],
        mode: Mode,
        rng: &mut StreamRng,
    ) -> crate::Result<Var> {
        let z = self.logits(g, ids, mode, rng)?;
        let total = g.bce_with_logits(z, flags)?;
        Ok(g.scale(total, F::one() / F::from_usize_lossy(ids.len()))?)
    }

    /// Eval-mode probability that each token is original.
    pub fn probs(&self, ids: &[usize]) -> crate::Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut rng = stream(0, "eval", 0);
        let z = self.logits(&mut g, ids, Mode::Eval, &mut rng)?;
        Ok(g.value(z)
            .data()
            .iter()
            .map(|&v| Activation::Sigmoid.apply(v).as_f64())
            .collect())
    }
}

/// Freshly initialised discriminator and generator for `cfg.seed`.
pub fn init_models<F: Scalar>(
    backbone: &BackboneConfig,
    generator: &GeneratorConfig,
    active_vocab: usize,
    cfg: &PretrainConfig,
) -> crate::Result<(Discriminator<F>, Generator<F>)> {
    let disc = Discriminator::new(
        backbone,
        cfg.lm_activation,
        &mut stream(cfg.seed, "disc-init", 0),
    )?;
    let gen = Generator::new(
        generator,
        backbone.vocab_size,
        backbone.max_seq_len,
        active_vocab,
        &mut stream(cfg.seed, "gen-init", 0),
    )?;
    Ok((disc, gen))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainStep {
    pub step: usize,
    pub lr: f64,
    /// Batch-mean discriminator loss per token.
    pub disc_loss: f64,
    /// Batch-mean generator loss per masked token.
    pub gen_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainResult<F> {
    pub checkpoint: Checkpoint<F>,
    pub discriminator: Discriminator<F>,
    pub generator: Generator<F>,
    pub log: Vec<PretrainStep>,
}

impl<F> PretrainResult<F> {
    pub fn log_tsv(&self) -> String {
        let mut out = String::from("step\tlr\tloss\tgenerator_loss\n");
        for s in &self.log {
            let _ = writeln!(
                out,
                "{}\t{:?}\t{:?}\t{:?}",
                s.step, s.lr, s.disc_loss, s.gen_loss
            );
        }
        out
    }
}

fn clip<F: Scalar>(grads: &mut Gradients<F>, limit: Option<f64>) {
    if let Some(c) = limit {
        grads.clip_global_norm(F::lit(c));
    }
}

/// Joint generator/discriminator training. Generator samples are treated as
/// constants: no gradient flows from the discriminator into the generator.
pub fn pretrain<F: Scalar>(
    backbone: &BackboneConfig,
    generator: &GeneratorConfig,
    corpus: &Corpus,
    cfg: &PretrainConfig,
    provenance: Provenance,
) -> crate::Result<PretrainResult<F>> {
    cfg.validate()?;
    backbone.validate()?;
    if corpus.sentences.is_empty() {
        return Err(ConfigError::Invalid {
            key: "corpus.n_sentences".into(),
            detail: "empty corpus".into(),
        }
        .into());
    }
    let (mut disc, mut gen) = init_models::<F>(backbone, generator, corpus.vocab.len(), cfg)?;
    let mut d_opt = AdamW::new(&disc.store, cfg.weight_decay);
    let mut g_opt = AdamW::new(&gen.store, cfg.weight_decay);
    let (nd, ng) = (disc.store.len(), gen.store.len());
    let inv_b = F::one() / F::from_usize_lossy(cfg.batch_size);

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut pass = 0u64;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut d_grads = Gradients::new(nd);
        let mut g_grads = Gradients::new(ng);
        let (mut d_loss, mut g_loss) = (0.0, 0.0);
        for i in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..corpus.sentences.len()).collect();
                order.shuffle(&mut stream(cfg.seed, "pretrain-order", pass));
                pass += 1;
                cursor = 0;
            }
            let ids = &corpus.sentences[order[cursor]];
            cursor += 1;
            let mut rng = stream(
                cfg.seed,
                "pretrain-example",
                (step * cfg.batch_size + i) as u64,
            );
            let positions = select_positions(ids.len(), cfg.mask_rate, &mut rng)?;
            let replacements = if positions.is_empty() {
                Vec::new()
            } else {
                let mut g = Graph::new();
                let input = masked(ids, &positions);
                let logits = gen.logits(&mut g, &input, &positions, &mut rng)?;
                let originals: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
                let loss = gen.mlm_loss(&mut g, logits, &originals)?;
                g_loss += g.value(loss).item().as_f64();
                g.backward(loss)?;
                g_grads.add_scaled(&g.param_grads(ng)?, inv_b);
                let v = g.value(logits);
                gen.sample_rows(&v.to_f64_vec(), v.last_dim(), &mut rng)
            };
            let c = apply_replacements(ids, &positions, &replacements);
            let mut g = Graph::new();
            let loss = disc.loss(
                &mut g,
                &c.corrupted_ids,
                &c.original_flags,
                Mode::Train,
                &mut rng,
            )?;
            d_loss += g.value(loss).item().as_f64();
            g.backward(loss)?;
            d_grads.add_scaled(&g.param_grads(nd)?, inv_b);
        }
        let d_loss = d_loss / cfg.batch_size as f64;
        let g_loss = g_loss / cfg.batch_size as f64;
        if !d_loss.is_finite() || !g_loss.is_finite() {
            return Err(crate::Error::Diverged {
                step,
                detail: format!("discriminator loss {d_loss}, generator loss {g_loss}"),
            });
        }
        clip(&mut d_grads, cfg.grad_clip);
        clip(&mut g_grads, cfg.grad_clip);
        let lr = linear_schedule(step, cfg.steps, cfg.learning_rate, cfg.warmup_ratio);
        let glr = linear_schedule(
            step,
            cfg.steps,
            cfg.generator_learning_rate,
            cfg.warmup_ratio,
        );
        d_opt.adamw_step(&mut disc.store, &d_grads, lr)?;
        g_opt.adamw_step(&mut gen.store, &g_grads, glr)?;
        if (step + 1) % 50 == 0 || step + 1 == cfg.steps {
            info!(
                "pretrain step {}: rtd loss {d_loss:.4}, mlm loss {g_loss:.4}",
                step + 1
            );
        }
        log.push(PretrainStep {
            step: step + 1,
            lr,
            disc_loss: d_loss,
            gen_loss: g_loss,
        });
    }
    let checkpoint = disc.to_checkpoint(corpus.vocab.tokens(), provenance);
    Ok(PretrainResult {
        checkpoint,
        discriminator: disc,
        generator: gen,
        log,
    })
}

/// Token-level replaced-token-detection quality on held-out sentences.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RtdEval {
    pub tokens: usize,
    pub accuracy: f64,
    /// Mean per-token RTD loss.
    pub loss: f64,
    /// Fraction of tokens left original.
    pub original_rate: f64,
    /// Accuracy of always predicting the majority flag.
    pub majority_accuracy: f64,
    /// Per-token loss of the best constant predictor.
    pub majority_bound: f64,
}

/// Corrupts each sentence with the generator and scores the discriminator.
pub fn evaluate_rtd<F: Scalar>(
    disc: &Discriminator<F>,
    gen: &Generator<F>,
    sentences: &[Vec<usize>],
    mask_rate: f64,
    seed: u64,
) -> crate::Result<RtdEval> {
    let (mut tokens, mut correct, mut originals) = (0usize, 0usize, 0usize);
    let mut loss = 0.0;
    let mut gen = gen.clone();
    for (i, ids) in sentences.iter().enumerate() {
        let mut rng = stream(seed, "rtd-eval", i as u64);
        let c = super::corrupt(ids, mask_rate, &mut gen, &mut rng)?;
        let probs = disc.probs(&c.corrupted_ids)?;
        let floor = 1e-15;
        let clamped: Vec<f64> = probs.iter().map(|p| p.clamp(floor, 1.0 - floor)).collect();
        loss += super::rtd_loss(&clamped, &c.original_flags)?;
        for (p, &f) in probs.iter().zip(&c.original_flags) {
            correct += usize::from((*p > 0.5) == f);
            originals += usize::from(f);
        }
        tokens += ids.len();
    }
    let n = tokens.max(1) as f64;
    let rate = originals as f64 / n;
    Ok(RtdEval {
        tokens,
        accuracy: correct as f64 / n,
        loss: loss / n,
        original_rate: rate,
        majority_accuracy: rate.max(1.0 - rate),
        majority_bound: majority_bound(rate),
    })
}
