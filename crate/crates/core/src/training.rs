//! Fine-tuning: losses, learning-rate schedule, AdamW and the epoch loop.

use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ConfigError;
use crate::data::{FilledExample, Label};
use crate::evaluation::{accuracy, spearman, MetricError};
use crate::heads::Task;
use crate::model::{HeadOptions, PlausibilityModel, Prediction};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Graph, Mode, ParamStore, TensorError};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Encoder dropout.
    pub dropout_p: f64,
    /// Dropout inside the enhancement block.
    pub head_dropout_p: f64,
    pub seed: u64,
    pub lm_head_reuse: bool,
    pub freeze_lm_head: bool,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Classification,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 5,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            dropout_p: 0.1,
            head_dropout_p: 0.1,
            seed: 13,
            lm_head_reuse: true,
            freeze_lm_head: false,
            grad_clip: Some(1.0),
        }
    }
}

/// Learning rates searched by the grid.
pub const LR_GRID: [f64; 4] = [5e-4, 7e-4, 9e-4, 1e-3];
/// Batch sizes searched by the grid.
pub const BATCH_GRID: [usize; 3] = [16, 24, 32];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, detail: String| {
            Err(ConfigError::Invalid {
                key: format!("finetune.{key}"),
                detail,
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(
                "learning_rate",
                format!("{} must be positive", self.learning_rate),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
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
        for (k, p) in [
            ("dropout", self.dropout_p),
            ("head_dropout", self.head_dropout_p),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(k, format!("{p} outside [0, 1)"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", format!("{c} must be positive"));
            }
        }
        Ok(())
    }

    /// Run name in the style `LR1e-5_BSZ32`.
    pub fn run_name(&self) -> String {
        format!("LR{:e}_BSZ{}", self.learning_rate, self.batch_size)
    }

    pub fn head_options(&self) -> HeadOptions {
        HeadOptions {
            task: self.task,
            lm_head_reuse: self.lm_head_reuse,
            freeze_lm_head: self.freeze_lm_head,
            dropout_p: self.dropout_p,
            head_dropout_p: self.head_dropout_p,
            seed: self.seed,
        }
    }
}

/// Summed negative log probability of the gold class; zero probabilities
/// are clamped at [`PROB_FLOOR`].
pub fn classification_loss(probs: &[[f64; 3]], gold: &[Label]) -> f64 {
    assert_eq!(probs.len(), gold.len(), "one gold label per row");
    probs
        .iter()
        .zip(gold)
        .map(|(p, g)| {
            let q = p[g.index()];
            if q < PROB_FLOOR {
                warn!("gold probability {q:e} clamped to {PROB_FLOOR:e}");
            }
            -q.max(PROB_FLOOR).ln()
        })
        .sum()
}

/// Mean squared error.
pub fn regression_loss(pred: &[f64], gold: &[f64]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "one gold score per prediction");
    if pred.is_empty() {
        return 0.0;
    }
    let sum: f64 = pred.iter().zip(gold).map(|(p, g)| (p - g) * (p - g)).sum();
    sum / pred.len() as f64
}

/// Number of warm-up steps for a schedule of `total_steps`.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total_steps as f64).ceil() as usize
}

/// Linear ramp from 0 to `peak` over the warm-up, then linear decay to 0.
pub fn linear_schedule(step: usize, total_steps: usize, peak: f64, warmup_ratio: f64) -> f64 {
    let warm = warmup_steps(total_steps, warmup_ratio);
    let step = step.min(total_steps);
    if step < warm {
        peak * step as f64 / warm as f64
    } else if total_steps == warm {
        peak
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warm) as f64
    }
}

pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    linear_schedule(step, total_steps, config.learning_rate, config.warmup_ratio)
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>, weight_decay: f64) -> Self {
        let zeros = |_| Vec::new();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        }
    }

    /// First and second moment buffers of parameter `index`.
    pub fn moments(&self, index: usize) -> (&[F], &[F]) {
        (&self.m[index], &self.v[index])
    }

    /// One update of every trainable parameter that has a gradient. Fails
    /// before touching any parameter if a gradient is not finite.
    pub fn adamw_step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &Gradients<F>,
        lr: f64,
    ) -> Result<(), TensorError> {
        for (id, g) in grads.iter() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFiniteGrad(store.get(id).name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        let lr_f = F::lit(lr);
        let eps = F::lit(self.eps);
        let shrink = F::one() - lr_f * F::lit(self.weight_decay);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let i = id.index();
            if i >= self.m.len() {
                self.m.resize(i + 1, Vec::new());
                self.v.resize(i + 1, Vec::new());
            }
            if self.m[i].is_empty() {
                self.m[i] = vec![F::zero(); g.len()];
                self.v[i] = vec![F::zero(); g.len()];
            }
            let decay = p.decay;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                if decay {
                    *w *= shrink;
                }
                m[k] = b1 * m[k] + (F::one() - b1) * g[k];
                v[k] = b2 * v[k] + (F::one() - b2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Mean gradient over a batch, computed one example graph at a time and
/// merged in batch order. Returns the gradients and the summed loss.
pub fn batch_gradients<F: Scalar, T>(
    n_params: usize,
    batch: &[T],
    mut loss_of: impl FnMut(&mut Graph<F>, usize, &T) -> crate::Result<crate::tensor::Var>,
) -> crate::Result<(Gradients<F>, f64)> {
    let mut total = Gradients::new(n_params);
    let mut loss_sum = 0.0;
    let scale = F::one() / F::from_usize_lossy(batch.len().max(1));
    for (i, item) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let loss = loss_of(&mut g, i, item)?;
        loss_sum += g.value(loss).item().as_f64();
        g.backward(loss)?;
        total.add_scaled(&g.param_grads(n_params)?, scale);
    }
    Ok((total, loss_sum))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean loss (the optimised quantity).
    pub loss: f64,
    /// Summed loss over the batch.
    pub loss_sum: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy or Spearman on dev; NaN when undefined.
    pub dev_metric: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult<F> {
    /// Parameters from the best dev epoch.
    pub model: PlausibilityModel<F>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl<F> FinetuneResult<F> {
    pub fn best_metric(&self) -> f64 {
        self.history[self.best_epoch - 1].dev_metric
    }

    /// Step lines `step, lr, loss, loss_sum` then `epoch` lines with the dev metric.
    pub fn log_tsv(&self) -> String {
        let mut out = String::from("step\tlr\tloss\tloss_sum\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{}\t{:?}\t{:?}\t{:?}",
                s.step, s.lr, s.loss, s.loss_sum
            );
        }
        for e in &self.history {
            let _ = writeln!(
                out,
                "epoch\t{}\tdev_metric\t{:?}\ttrain_loss\t{:?}",
                e.epoch, e.dev_metric, e.train_loss
            );
        }
        let _ = writeln!(out, "best_epoch\t{}", self.best_epoch);
        out
    }
}

/// Dev metric for `task`: accuracy of the argmax class or Spearman of scores.
pub fn dev_metric(
    task: Task,
    preds: &[Prediction],
    examples: &[FilledExample],
) -> crate::Result<f64> {
    let missing = |id: &str, what| crate::data::DataError::MissingTarget {
        what,
        id: id.to_string(),
    };
    match task {
        Task::Classification => {
            let mut p = Vec::with_capacity(preds.len());
            let mut g = Vec::with_capacity(preds.len());
            for (pr, ex) in preds.iter().zip(examples) {
                p.push(pr.argmax().unwrap_or(usize::MAX));
                g.push(
                    ex.label
                        .ok_or_else(|| missing(&ex.example_id, "label"))?
                        .index(),
                );
            }
            Ok(accuracy(&p, &g)?)
        }
        Task::Regression => {
            let mut p = Vec::with_capacity(preds.len());
            let mut g = Vec::with_capacity(preds.len());
            for (pr, ex) in preds.iter().zip(examples) {
                if let Prediction::Score(s) = pr {
                    p.push(*s);
                }
                g.push(ex.score.ok_or_else(|| missing(&ex.example_id, "score"))?);
            }
            match spearman(&p, &g) {
                Err(MetricError::UndefinedCorrelation { side, n }) => {
                    warn!("dev spearman undefined ({side} ranks constant over {n} items)");
                    Ok(f64::NAN)
                }
                other => Ok(other?),
            }
        }
    }
}

/// Builds the task model from a pre-trained checkpoint and fine-tunes it.
pub fn finetune<F: Scalar>(
    ckpt: &Checkpoint<F>,
    train: &[FilledExample],
    dev: &[FilledExample],
    config: &TrainConfig,
) -> crate::Result<FinetuneResult<F>> {
    config.validate()?;
    let model = PlausibilityModel::from_pretrained(ckpt, &config.head_options())?;
    train_model(model, train, dev, config)
}

/// Fine-tunes `model` for `config.epochs`, keeping the best dev epoch.
pub fn train_model<F: Scalar>(
    mut model: PlausibilityModel<F>,
    train: &[FilledExample],
    dev: &[FilledExample],
    config: &TrainConfig,
) -> crate::Result<FinetuneResult<F>> {
    config.validate()?;
    if train.is_empty() {
        return Err(crate::data::DataError::Example {
            id: String::new(),
            detail: "empty training set".into(),
        }
        .into());
    }
    let n_params = model.store.len();
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut opt = AdamW::new(&model.store, config.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = Vec::with_capacity(total_steps);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamStore<F>)> = None;
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut stream(config.seed, "finetune-shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&FilledExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (mut grads, loss_sum) = batch_gradients(n_params, &batch, |g, i, ex| {
                let mut rng = stream(
                    config.seed,
                    "finetune-dropout",
                    (step * config.batch_size + i) as u64,
                );
                model.loss(g, ex, Mode::Train, &mut rng)
            })
            .map_err(|e| diverged_if_numeric(e, step))?;
            let grad_norm = match config.grad_clip {
                Some(c) => grads.clip_global_norm(F::lit(c)),
                None => grads.global_norm(),
            }
            .as_f64();
            let lr = lr_at(step, total_steps, config);
            opt.adamw_step(&mut model.store, &grads, lr)?;
            let loss = loss_sum / batch.len() as f64;
            if !loss.is_finite() {
                return Err(crate::Error::Diverged {
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            epoch_loss += loss_sum;
            step += 1;
            steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
                loss_sum,
                grad_norm,
            });
        }
        let preds = model.predict_all(dev)?;
        let metric = dev_metric(config.task, &preds, dev)?;
        info!(
            "{} epoch {epoch}: train loss {:.4}, dev {} {metric:.4}",
            config.run_name(),
            epoch_loss / train.len() as f64,
            match config.task {
                Task::Classification => "accuracy",
                Task::Regression => "spearman",
            }
        );
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            dev_metric: metric,
        });
        let improves = match &best {
            None => true,
            Some((_, m, _)) => metric > *m || (m.is_nan() && !metric.is_nan()),
        };
        if improves {
            best = Some((epoch, metric, model.store.clone()));
        }
    }
    let (best_epoch, _, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(FinetuneResult {
        model,
        best_epoch,
        history,
        steps,
    })
}

fn diverged_if_numeric(e: crate::Error, step: usize) -> crate::Error {
    if e.is_numeric() {
        crate::Error::Diverged {
            step,
            detail: e.to_string(),
        }
    } else {
        e
    }
}
