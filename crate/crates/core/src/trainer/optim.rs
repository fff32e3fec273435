//! Adam and momentum SGD with coupled (L2) weight decay.
//!
//! Parameters whose gradient is absent in a step are left untouched,
//! including their decay and moment buffers.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// `(first moment, second moment)` per tracked parameter.
    pub moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            step: 0,
            moments: shapes.iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).collect(),
        }
    }

    /// One update; `grads[i]` belongs to `params[i]`.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps, wd) = (T::lit(c.lr), T::lit(c.eps), T::lit(c.weight_decay));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            let Some(g) = g else { continue };
            let (pd, gd) = (p.data_mut(), g.data());
            for (((w, &gr), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                let gr = gr + wd * *w;
                *mi = b1 * *mi + (T::one() - b1) * gr;
                *vi = b2 * *vi + (T::one() - b2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    /// Momentum buffer per tracked parameter; `None` until its first update.
    pub buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, count: usize) -> Self {
        Self {
            config,
            buffers: vec![None; count],
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) {
        let c = self.config;
        let (lr, mu, wd) = (T::lit(c.lr), T::lit(c.momentum), T::lit(c.weight_decay));
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(self.buffers.iter_mut()) {
            let Some(g) = g else { continue };
            let d: Vec<T> = p.data().iter().zip(g.data()).map(|(&w, &gr)| gr + wd * w).collect();
            let b = match buf {
                Some(b) => {
                    for (bi, &di) in b.data_mut().iter_mut().zip(&d) {
                        *bi = mu * *bi + di;
                    }
                    b
                }
                slot @ None => slot.insert(Tensor::from_vec(g.shape(), d).expect("grad shape")),
            };
            for (w, &bi) in p.data_mut().iter_mut().zip(b.data()) {
                *w -= lr * bi;
            }
        }
    }
}
