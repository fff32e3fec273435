use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Bound, Networks, ParamSet, StyleVars};

/// Spatial content code `(N, C_s, H_s, W_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap<T>(pub Tensor<T>);

/// Pooled representation `(N, F)` seen by C and D.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T>(pub Tensor<T>);

/// Per-channel AdaIN targets `(N, C_g)`; `std` is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode<T> {
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

/// Class logits and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution<T> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

/// Probability floor applied when building distributions from probabilities.
pub const PROB_FLOOR: f64 = 1e-8;

impl<T: Scalar> PredictiveDistribution<T> {
    pub fn from_logits(logits: Tensor<T>) -> Result<Self> {
        if logits.rank() != 2 || logits.shape()[1] == 0 {
            return Err(Error::shape(format!("logits must be (N, K), got {:?}", logits.shape())));
        }
        let k = logits.shape()[1];
        let mut probs = logits.data().to_vec();
        for row in probs.chunks_mut(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let probabilities = Tensor::from_vec(logits.shape(), probs)?;
        Ok(Self { logits, probabilities })
    }

    /// Clamp at [`PROB_FLOOR`], renormalize, and use log-probabilities as logits.
    pub fn from_probabilities(probabilities: &Tensor<T>) -> Result<Self> {
        if probabilities.rank() != 2 || probabilities.shape()[1] == 0 {
            return Err(Error::shape(format!(
                "probabilities must be (N, K), got {:?}",
                probabilities.shape()
            )));
        }
        let k = probabilities.shape()[1];
        let floor = T::lit(PROB_FLOOR);
        let mut logits = probabilities.data().to_vec();
        for row in logits.chunks_mut(k) {
            let z: T = row.iter().map(|&p| p.max(floor)).sum();
            for v in row.iter_mut() {
                *v = (v.max(floor) / z).ln();
            }
        }
        Self::from_logits(Tensor::from_vec(probabilities.shape(), logits)?)
    }

    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn argmax(&self) -> Vec<usize> {
        let k = self.num_classes();
        self.logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect()
    }
}

/// Architecture plus parameters, with evaluation-mode forward passes on
/// plain tensors.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub networks: Networks,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(networks: Networks, params: ParamSet<T>) -> Result<Self> {
        networks.check_params(&params)?;
        Ok(Self { networks, params })
    }

    fn run<R>(&self, f: impl FnOnce(&Networks, &mut Graph<T>, &Bound) -> Result<R>) -> Result<R> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        f(&self.networks, &mut g, &p)
    }

    pub fn encode(&self, images: &Tensor<T>) -> Result<(SemanticMap<T>, FeatureVector<T>)> {
        self.run(|n, g, p| {
            let x = g.constant(images.clone());
            let (s, f) = n.encode(g, p, x)?;
            Ok((SemanticMap(g.value(s).clone()), FeatureVector(g.value(f).clone())))
        })
    }

    pub fn extract_style(&self, images: &Tensor<T>) -> Result<StyleCode<T>> {
        self.run(|n, g, p| {
            let x = g.constant(images.clone());
            let st = n.extract_style(g, p, x)?;
            Ok(StyleCode {
                mean: g.value(st.mean).clone(),
                std: g.value(st.std).clone(),
            })
        })
    }

    pub fn generate(&self, semantics: &SemanticMap<T>, style: &StyleCode<T>) -> Result<Tensor<T>> {
        let sb = semantics.0.batch();
        if style.mean.batch() != sb || style.std.batch() != sb {
            return Err(Error::shape(format!(
                "semantic batch {} vs style batch {}",
                sb,
                style.mean.batch()
            )));
        }
        self.run(|n, g, p| {
            let s = g.constant(semantics.0.clone());
            let st = StyleVars {
                mean: g.constant(style.mean.clone()),
                std: g.constant(style.std.clone()),
            };
            let y = n.generate(g, p, s, st)?;
            Ok(g.value(y).clone())
        })
    }

    pub fn discriminate(&self, features: &FeatureVector<T>) -> Result<Tensor<T>> {
        self.run(|n, g, p| {
            let f = g.constant(features.0.clone());
            let y = n.discriminate(g, p, f)?;
            Ok(g.value(y).clone())
        })
    }

    pub fn classify(&self, features: &FeatureVector<T>) -> Result<PredictiveDistribution<T>> {
        let logits = self.run(|n, g, p| {
            let f = g.constant(features.0.clone());
            let y = n.classify(g, p, f)?;
            Ok(g.value(y).clone())
        })?;
        PredictiveDistribution::from_logits(logits)
    }

    /// Evaluation path: `C(E(x).features)`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<PredictiveDistribution<T>> {
        let logits = self.run(|n, g, p| {
            let x = g.constant(images.clone());
            let (_, f): (Var, Var) = n.encode(g, p, x)?;
            let y = n.classify(g, p, f)?;
            Ok(g.value(y).clone())
        })?;
        PredictiveDistribution::from_logits(logits)
    }
}
