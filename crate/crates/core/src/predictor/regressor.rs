//! Fallback length regressor: one tanh hidden layer on the prompt embedding,
//! trained by full-batch gradient descent on squared error of `ln(length)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embed::EmbeddingVector;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::scalar::Scalar;

pub const MIN_CORPUS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FallbackSpec {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FallbackSpec {
    fn default() -> Self {
        FallbackSpec {
            hidden: 32,
            epochs: 300,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FallbackRegressor<T> {
    dim: usize,
    hidden: usize,
    /// Row-major `hidden x dim`.
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: T,
    max_len: u32,
    /// Mean squared error before each epoch and after the last.
    pub loss_history: Vec<T>,
    pub epochs: usize,
}

impl<T: Scalar> FallbackRegressor<T> {
    /// Randomly initialized, untrained regressor.
    pub fn untrained(dim: usize, spec: &FallbackSpec, max_len: u32) -> Result<Self> {
        if dim == 0 || spec.hidden == 0 {
            return Err(Error::InvalidParameter("regressor needs dim, hidden >= 1".into()));
        }
        if max_len == 0 {
            return Err(Error::InvalidParameter("max_len must be >= 1".into()));
        }
        let mut rng = rng::component_rng(spec.seed, stream::FALLBACK_INIT);
        let r1 = 1.0 / (dim as f64).sqrt();
        let r2 = 1.0 / (spec.hidden as f64).sqrt();
        let w1 = (0..dim * spec.hidden)
            .map(|_| T::of(rng.random_range(-r1..r1)))
            .collect();
        let w2 = (0..spec.hidden)
            .map(|_| T::of(rng.random_range(-r2..r2)))
            .collect();
        Ok(FallbackRegressor {
            dim,
            hidden: spec.hidden,
            w1,
            b1: vec![T::zero(); spec.hidden],
            w2,
            b2: T::zero(),
            max_len,
            loss_history: Vec::new(),
            epochs: 0,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    /// Multiply-adds per forward pass.
    pub fn cost_ops(&self) -> u64 {
        (self.hidden * (self.dim + 2) + 1) as u64
    }

    fn hidden_activations(&self, x: &[T], out: &mut [T]) {
        for (j, h) in out.iter_mut().enumerate() {
            let row = &self.w1[j * self.dim..(j + 1) * self.dim];
            let z = row.iter().zip(x).map(|(&w, &xi)| w * xi).sum::<T>() + self.b1[j];
            *h = z.tanh();
        }
    }

    /// Raw regression output (`ln` of the length).
    pub fn forward(&self, x: &EmbeddingVector<T>) -> T {
        let mut h = vec![T::zero(); self.hidden];
        self.hidden_activations(x.values(), &mut h);
        h.iter().zip(&self.w2).map(|(&a, &w)| a * w).sum::<T>() + self.b2
    }

    /// Predicted length, `exp` of the output rounded into `[1, max_len]`.
    pub fn predict(&self, x: &EmbeddingVector<T>) -> u32 {
        let y = self.forward(x).as_f64().exp().round();
        if !y.is_finite() || y >= self.max_len as f64 {
            self.max_len
        } else if y < 1.0 {
            1
        } else {
            y as u32
        }
    }

    fn loss(&self, xs: &[&[T]], ys: &[T]) -> T {
        let mut h = vec![T::zero(); self.hidden];
        let mut total = T::zero();
        for (x, &y) in xs.iter().zip(ys) {
            self.hidden_activations(x, &mut h);
            let out = h.iter().zip(&self.w2).map(|(&a, &w)| a * w).sum::<T>() + self.b2;
            total = total + (out - y) * (out - y);
        }
        total / T::of_count(ys.len() as u64)
    }
}

/// Trains a fresh regressor on `(embedding, actual length)` pairs.
pub fn train_fallback<T: Scalar>(
    corpus: &[(EmbeddingVector<T>, u32)],
    spec: &FallbackSpec,
    max_len: u32,
) -> Result<FallbackRegressor<T>> {
    if corpus.len() < MIN_CORPUS {
        return Err(Error::CorpusTooSmall {
            got: corpus.len(),
            need: MIN_CORPUS,
        });
    }
    if !(spec.learning_rate > 0.0 && spec.learning_rate.is_finite()) {
        return Err(Error::InvalidParameter("learning rate must be > 0".into()));
    }
    let dim = corpus[0].0.dimension();
    if corpus.iter().any(|(v, l)| v.dimension() != dim || *l == 0) {
        return Err(Error::InvalidParameter(
            "corpus needs equal dimensions and lengths >= 1".into(),
        ));
    }
    let mut model = FallbackRegressor::untrained(dim, spec, max_len)?;
    let xs: Vec<&[T]> = corpus.iter().map(|(v, _)| v.values()).collect();
    let ys: Vec<T> = corpus
        .iter()
        .map(|(_, l)| T::of((*l as f64).ln()))
        .collect();
    let n = T::of_count(ys.len() as u64);
    let lr = T::of(spec.learning_rate);
    let two = T::of(2.0);

    // Start the output bias at the target mean.
    model.b2 = ys.iter().copied().sum::<T>() / n;

    let (hdim, d) = (model.hidden, dim);
    let mut h = vec![T::zero(); hdim];
    let mut g_w1 = vec![T::zero(); hdim * d];
    let mut g_b1 = vec![T::zero(); hdim];
    let mut g_w2 = vec![T::zero(); hdim];
    for _ in 0..spec.epochs {
        g_w1.iter_mut().for_each(|g| *g = T::zero());
        g_b1.iter_mut().for_each(|g| *g = T::zero());
        g_w2.iter_mut().for_each(|g| *g = T::zero());
        let mut g_b2 = T::zero();
        let mut loss = T::zero();
        for (x, &y) in xs.iter().zip(&ys) {
            model.hidden_activations(x, &mut h);
            let out = h.iter().zip(&model.w2).map(|(&a, &w)| a * w).sum::<T>() + model.b2;
            let err = out - y;
            loss = loss + err * err;
            let d_out = two * err / n;
            g_b2 = g_b2 + d_out;
            for j in 0..hdim {
                g_w2[j] = g_w2[j] + d_out * h[j];
                let d_z = d_out * model.w2[j] * (T::one() - h[j] * h[j]);
                g_b1[j] = g_b1[j] + d_z;
                let row = &mut g_w1[j * d..(j + 1) * d];
                for (g, &xi) in row.iter_mut().zip(x.iter()) {
                    *g = *g + d_z * xi;
                }
            }
        }
        model.loss_history.push(loss / n);
        for (w, g) in model.w1.iter_mut().zip(&g_w1) {
            *w = *w - lr * *g;
        }
        for (b, g) in model.b1.iter_mut().zip(&g_b1) {
            *b = *b - lr * *g;
        }
        for (w, g) in model.w2.iter_mut().zip(&g_w2) {
            *w = *w - lr * *g;
        }
        model.b2 = model.b2 - lr * g_b2;
        model.epochs += 1;
    }
    let final_loss = model.loss(&xs, &ys);
    model.loss_history.push(final_loss);
    Ok(model)
}
