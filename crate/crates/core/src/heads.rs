//! Fine-tuning heads: the reused pre-training head, filler-span mean pooling,
//! the enhancement block and the two task outputs.
//!
//! For a backbone output `H_b` of shape `[n, d]` and filler span `[i, j)`:
//!
//! ```text
//! H_p  = LN(Act(H_b·W1 + b1))                  (identity when the head is not reused)
//! h_t  = mean(H_p[i..j])
//! h~_t = Dropout(Tanh(Dropout(h_t)·W2 + b2))
//! y_c  = Softmax(h~_t·W3 + b3)                 3 classes
//! y_r  = Sigmoid(h~_t·W4 + b4)·4 + 1           score in (1, 5)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::expect_param;
use crate::nn::{LayerNorm, Linear};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::{Activation, Graph, Mode, ParamId, ParamStore, TensorError, Var};

pub const NUM_CLASSES: usize = 3;

/// Which sub-task a head is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// 3-way IMPLAUSIBLE / NEUTRAL / PLAUSIBLE.
    Classification,
    /// Plausibility score on a 1..5 scale.
    Regression,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" | "a" => Some(Task::Classification),
            "regression" | "b" => Some(Task::Regression),
            _ => None,
        }
    }
}

/// Dense + activation + layer norm block kept from pre-training.
#[derive(Debug, Clone)]
pub struct PretrainedHead<F> {
    pub dense: Linear,
    pub norm: LayerNorm,
    pub activation: Activation,
    _scalar: std::marker::PhantomData<F>,
}

pub const LM_HEAD_PREFIX: &str = "lm_head";
pub const TASK_HEAD_PREFIX: &str = "task_head";

impl<F: Scalar> PretrainedHead<F> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        d: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(PretrainedHead {
            dense: Linear::new(store, &format!("{LM_HEAD_PREFIX}.dense"), d, d, rng)?,
            norm: LayerNorm::new(store, &format!("{LM_HEAD_PREFIX}.norm"), d)?,
            activation,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn bind(store: &ParamStore<F>, d: usize, activation: Activation) -> crate::Result<Self> {
        let p = LM_HEAD_PREFIX;
        Ok(PretrainedHead {
            dense: Linear {
                weight: expect_param(store, &format!("{p}.dense.weight"), &[d, d])?,
                bias: expect_param(store, &format!("{p}.dense.bias"), &[d])?,
            },
            norm: LayerNorm {
                gamma: expect_param(store, &format!("{p}.norm.gamma"), &[d])?,
                beta: expect_param(store, &format!("{p}.norm.beta"), &[d])?,
            },
            activation,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [
            self.dense.weight,
            self.dense.bias,
            self.norm.gamma,
            self.norm.beta,
        ]
    }

    /// `d² + 3d`: W1, b1, gamma and beta.
    pub fn param_count(d: usize) -> usize {
        Linear::param_count(d, d) + LayerNorm::param_count(d)
    }

    pub fn forward(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        h_b: Var,
    ) -> Result<Var, TensorError> {
        let x = self.dense.forward(g, store, h_b)?;
        let x = g.activation(x, self.activation)?;
        self.norm.forward(g, store, x)
    }
}

/// Applies the pre-trained head when present; identity otherwise.
pub fn lm_head_forward<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    head: Option<&PretrainedHead<F>>,
    h_b: Var,
) -> Result<Var, TensorError> {
    match head {
        Some(h) => h.forward(g, store, h_b),
        None => Ok(h_b),
    }
}

/// Half-open token range `[start, end)` covering a filler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanIndex {
    pub start: usize,
    pub end: usize,
}

impl SpanIndex {
    pub fn new(start: usize, end: usize) -> Result<Self, TensorError> {
        if start >= end {
            return Err(TensorError::Invalid {
                op: "span",
                detail: format!("empty span {start}..{end}"),
            });
        }
        Ok(SpanIndex { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Checks the span fits inside the first `n_valid` positions.
    pub fn check_within(&self, n_valid: usize) -> Result<(), TensorError> {
        if self.is_empty() || self.end > n_valid {
            return Err(TensorError::Invalid {
                op: "span",
                detail: format!("span {}..{} outside 0..{n_valid}", self.start, self.end),
            });
        }
        Ok(())
    }
}

/// Mean of the rows of `h` inside `span`, shape `[1, d]`.
pub fn span_pool<F: Scalar>(g: &mut Graph<F>, h: Var, span: SpanIndex) -> Result<Var, TensorError> {
    let rows = g.shape(h).first().copied().unwrap_or(0);
    span.check_within(rows)?;
    g.mean_rows(h, span.start, span.end)
}

/// Closed bounds a score is clamped into so that saturated sigmoids still
/// land strictly inside (1, 5) after rounding.
pub fn score_bounds<F: Scalar>() -> (F, F) {
    let five = F::lit(5.0);
    let delta = F::epsilon() * five;
    (F::one() + delta, five - delta)
}

/// Maps a regression logit onto the open interval (1, 5).
pub fn scaled_sigmoid<F: Scalar>(logit: F) -> F {
    let (lo, hi) = score_bounds();
    (Activation::Sigmoid.apply(logit) * F::lit(4.0) + F::one())
        .max(lo)
        .min(hi)
}

/// Enhancement block plus both task projections.
#[derive(Debug, Clone)]
pub struct TaskHead<F> {
    pub dense: Linear,
    pub classifier: Linear,
    pub regressor: Linear,
    pub dropout_p: f64,
    _scalar: std::marker::PhantomData<F>,
}

impl<F: Scalar> TaskHead<F> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        d: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let p = TASK_HEAD_PREFIX;
        Ok(TaskHead {
            dense: Linear::new(store, &format!("{p}.dense"), d, d, rng)?,
            classifier: Linear::new(store, &format!("{p}.classifier"), d, NUM_CLASSES, rng)?,
            regressor: Linear::new(store, &format!("{p}.regressor"), d, 1, rng)?,
            dropout_p,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn bind(store: &ParamStore<F>, d: usize, dropout_p: f64) -> crate::Result<Self> {
        let p = TASK_HEAD_PREFIX;
        let linear = |name: &str, o: usize| -> crate::Result<Linear> {
            Ok(Linear {
                weight: expect_param(store, &format!("{p}.{name}.weight"), &[d, o])?,
                bias: expect_param(store, &format!("{p}.{name}.bias"), &[o])?,
            })
        };
        Ok(TaskHead {
            dense: linear("dense", d)?,
            classifier: linear("classifier", NUM_CLASSES)?,
            regressor: linear("regressor", 1)?,
            dropout_p,
            _scalar: std::marker::PhantomData,
        })
    }

    /// Marks only the output pair for `task` as trainable.
    pub fn select_task(&self, store: &mut ParamStore<F>, task: Task) {
        let (on, off) = match task {
            Task::Classification => (self.classifier, self.regressor),
            Task::Regression => (self.regressor, self.classifier),
        };
        for id in [on.weight, on.bias] {
            store.set_trainable(id, true);
        }
        for id in [off.weight, off.bias] {
            store.set_trainable(id, false);
        }
    }

    /// `Dropout(Tanh(Dropout(h_t)·W2 + b2))`
    pub fn enhance(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        h_t: Var,
        mode: Mode,
        rng: &mut StreamRng,
    ) -> Result<Var, TensorError> {
        let p = F::lit(self.dropout_p);
        let x = g.dropout(h_t, p, mode, rng)?;
        let x = self.dense.forward(g, store, x)?;
        let x = g.tanh(x)?;
        g.dropout(x, p, mode, rng)
    }

    /// Class logits `[1, 3]`.
    pub fn class_logits(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        h: Var,
    ) -> Result<Var, TensorError> {
        self.classifier.forward(g, store, h)
    }

    /// Class probabilities `[1, 3]`.
    pub fn classify(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        h: Var,
    ) -> Result<Var, TensorError> {
        let logits = self.class_logits(g, store, h)?;
        g.softmax(logits)
    }

    /// Plausibility score `[1, 1]` in (1, 5).
    pub fn regress(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        h: Var,
    ) -> Result<Var, TensorError> {
        let logit = self.regressor.forward(g, store, h)?;
        let s = g.sigmoid(logit)?;
        let y = g.affine(s, F::lit(4.0), F::one())?;
        let (lo, hi) = score_bounds();
        g.clamp(y, lo, hi)
    }
}
