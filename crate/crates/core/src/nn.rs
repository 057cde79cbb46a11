//! Parameterised building blocks shared by the encoder and the heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

/// Standard deviation of the normal initialiser for weight matrices and embeddings.
pub const INIT_STD: f64 = 0.02;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn normal_tensor<F: Scalar, R: Rng + ?Sized>(
    shape: Vec<usize>,
    std: f64,
    rng: &mut R,
) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| F::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// `y = x·W + b`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(vec![d_in, d_out], INIT_STD, rng),
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out]), false)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
    ) -> Result<Self, TensorError> {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::filled(vec![d], F::one()),
            false,
        )?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![d]), false)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, F::lit(LAYER_NORM_EPS))
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }
}
