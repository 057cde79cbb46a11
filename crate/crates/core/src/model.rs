//! Fine-tuning model: encoder, optional reused pre-trained head, task head.

use crate::backbone::{BackboneConfig, Encoder};
use crate::checkpoint::{
    decays, Architecture, Checkpoint, CheckpointError, CheckpointMeta, Provenance, TaskHeadMeta,
    FORMAT_VERSION,
};
use crate::data::{FilledExample, Vocabulary};
use crate::heads::NUM_CLASSES as NUM_LABELS;
use crate::heads::{
    lm_head_forward, span_pool, PretrainedHead, SpanIndex, Task, TaskHead, LM_HEAD_PREFIX,
};
use crate::rng::{stream, StreamRng};
use crate::scalar::Scalar;
use crate::tensor::{Activation, Graph, Mode, ParamStore, Var};

/// Parameter-name prefix of the encoder inside checkpoints.
pub const ENCODER_PREFIX: &str = "encoder";

/// Output of the model for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Probs([f64; NUM_LABELS]),
    Score(f64),
}

impl Prediction {
    /// Index of the most probable class (first on ties).
    pub fn argmax(&self) -> Option<usize> {
        match self {
            Prediction::Probs(p) => {
                Some((0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best }))
            }
            Prediction::Score(_) => None,
        }
    }
}

/// How a pre-trained checkpoint is turned into a fine-tuning model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOptions {
    pub task: Task,
    pub lm_head_reuse: bool,
    pub freeze_lm_head: bool,
    /// Dropout inside the encoder during fine-tuning.
    pub dropout_p: f64,
    /// Dropout inside the enhancement block.
    pub head_dropout_p: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PlausibilityModel<F> {
    pub encoder: Encoder<F>,
    pub lm_head: Option<PretrainedHead<F>>,
    pub task_head: TaskHead<F>,
    pub task: Task,
    pub store: ParamStore<F>,
    pub vocab: Vocabulary,
    pub lm_activation: Activation,
    pub provenance: Provenance,
}

fn parse_activation(name: &str) -> Result<Activation, CheckpointError> {
    Activation::parse(name)
        .ok_or_else(|| CheckpointError::Corrupt(format!("unknown activation {name:?}")))
}

impl<F: Scalar> PlausibilityModel<F> {
    /// Copies encoder (and, when reused, LM head) parameters out of a
    /// pre-trained checkpoint and adds a freshly initialised task head.
    pub fn from_pretrained(ckpt: &Checkpoint<F>, opts: &HeadOptions) -> crate::Result<Self> {
        let arch = &ckpt.meta.architecture;
        if opts.lm_head_reuse && !arch.has_lm_head {
            return Err(CheckpointError::MissingComponent("pre-trained LM head").into());
        }
        let mut backbone = arch.backbone.clone();
        backbone.dropout_p = opts.dropout_p;
        let keep = |name: &str| {
            name.starts_with(&format!("{ENCODER_PREFIX}."))
                || (opts.lm_head_reuse && name.starts_with(&format!("{LM_HEAD_PREFIX}.")))
        };
        let mut store = ParamStore::new();
        for (_, p) in ckpt.params.iter().filter(|(_, p)| keep(&p.name)) {
            store.add(p.name.clone(), p.tensor.clone(), decays(&p.name))?;
        }
        let encoder = Encoder::bind(backbone.clone(), &store, ENCODER_PREFIX)?;
        let lm_activation = parse_activation(&arch.lm_activation)?;
        let d = backbone.d_model;
        let lm_head = if opts.lm_head_reuse {
            let head = PretrainedHead::bind(&store, d, lm_activation)?;
            if opts.freeze_lm_head {
                for id in head.param_ids() {
                    store.set_trainable(id, false);
                }
            }
            Some(head)
        } else {
            None
        };
        let mut rng = stream(opts.seed, "task-head-init", 0);
        let task_head = TaskHead::new(&mut store, d, opts.head_dropout_p, &mut rng)?;
        task_head.select_task(&mut store, opts.task);
        let vocab = Vocabulary::from_tokens(&ckpt.meta.vocab)?;
        Ok(PlausibilityModel {
            encoder,
            lm_head,
            task_head,
            task: opts.task,
            store,
            vocab,
            lm_activation,
            provenance: ckpt.meta.provenance.clone(),
        })
    }

    /// Rebuilds a fine-tuned model saved with [`PlausibilityModel::to_checkpoint`].
    pub fn from_checkpoint(ckpt: Checkpoint<F>) -> crate::Result<Self> {
        let arch = ckpt.meta.architecture.clone();
        let head_meta = arch
            .task_head
            .clone()
            .ok_or(CheckpointError::MissingComponent("task head"))?;
        let store = ckpt.params;
        let encoder = Encoder::bind(arch.backbone.clone(), &store, ENCODER_PREFIX)?;
        let lm_activation = parse_activation(&arch.lm_activation)?;
        let d = arch.backbone.d_model;
        let lm_head = if head_meta.lm_head_reuse {
            Some(PretrainedHead::bind(&store, d, lm_activation)?)
        } else {
            None
        };
        let task_head = TaskHead::bind(&store, d, head_meta.dropout_p)?;
        let mut model = PlausibilityModel {
            encoder,
            lm_head,
            task_head,
            task: head_meta.task,
            store,
            vocab: Vocabulary::from_tokens(&ckpt.meta.vocab)?,
            lm_activation,
            provenance: ckpt.meta.provenance,
        };
        let task = model.task;
        model.task_head.select_task(&mut model.store, task);
        Ok(model)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<F> {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            architecture: Architecture {
                backbone: self.encoder.config().clone(),
                lm_activation: self.lm_activation.name().to_string(),
                has_lm_head: self.lm_head.is_some(),
                has_rtd_head: false,
                task_head: Some(TaskHeadMeta {
                    task: self.task,
                    dropout_p: self.task_head.dropout_p,
                    lm_head_reuse: self.lm_head.is_some(),
                }),
            },
            vocab: self.vocab.tokens().to_vec(),
            provenance: self.provenance.clone(),
            content_hash: String::new(),
        };
        let mut params = self.store.clone();
        for id in params.iter().map(|(id, _)| id).collect::<Vec<_>>() {
            params.set_trainable(id, true);
        }
        Checkpoint { meta, params }
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        self.encoder.config()
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Task output node: class logits `[1, 3]` or score `[1, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        ids: &[usize],
        span: SpanIndex,
        mode: Mode,
        rng: &mut StreamRng,
    ) -> crate::Result<Var> {
        let s = &self.store;
        let h_b = self.encoder.encode(g, s, ids, mode, rng)?;
        let h_p = lm_head_forward(g, s, self.lm_head.as_ref(), h_b)?;
        let h_t = span_pool(g, h_p, span)?;
        let h = self.task_head.enhance(g, s, h_t, mode, rng)?;
        Ok(match self.task {
            Task::Classification => self.task_head.class_logits(g, s, h)?,
            Task::Regression => self.task_head.regress(g, s, h)?,
        })
    }

    /// Per-example training loss: `−log p[gold]` (clamped) or `(ŷ − y)²`.
    pub fn loss(
        &self,
        g: &mut Graph<F>,
        ex: &FilledExample,
        mode: Mode,
        rng: &mut StreamRng,
    ) -> crate::Result<Var> {
        let out = self.forward(g, &ex.token_ids, ex.span, mode, rng)?;
        let missing = |what: &'static str| crate::data::DataError::MissingTarget {
            what,
            id: ex.example_id.clone(),
        };
        Ok(match self.task {
            Task::Classification => {
                let gold = ex.label.ok_or_else(|| missing("label"))?;
                let probs = g.softmax(out)?;
                let logp = g.log_clamped(probs, F::lit(crate::training::PROB_FLOOR))?;
                let picked = g.pick(logp, &[gold.index()])?;
                let s = g.sum(picked)?;
                g.scale(s, -F::one())?
            }
            Task::Regression => {
                let gold = ex.score.ok_or_else(|| missing("score"))?;
                let target = g.constant(crate::tensor::Tensor::from_f64(vec![1, 1], &[gold])?);
                let diff = g.sub(out, target)?;
                let sq = g.mul(diff, diff)?;
                g.sum(sq)?
            }
        })
    }

    /// Deterministic eval-mode prediction.
    pub fn predict(&self, ex: &FilledExample) -> crate::Result<Prediction> {
        let mut g = Graph::new();
        let mut rng = stream(0, "eval", 0);
        let out = self.forward(&mut g, &ex.token_ids, ex.span, Mode::Eval, &mut rng)?;
        let v = g.value(out).to_f64_vec();
        Ok(match self.task {
            Task::Classification => {
                let mut p = [0.0; NUM_LABELS];
                p.copy_from_slice(&v);
                crate::tensor::softmax_in_place(&mut p);
                Prediction::Probs(p)
            }
            Task::Regression => Prediction::Score(v[0]),
        })
    }

    pub fn predict_all(&self, examples: &[FilledExample]) -> crate::Result<Vec<Prediction>> {
        examples.iter().map(|e| self.predict(e)).collect()
    }
}
