use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The five cooperating networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Encoder,
    Style,
    Generator,
    Discriminator,
    Classifier,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Encoder,
        Component::Style,
        Component::Generator,
        Component::Discriminator,
        Component::Classifier,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Component::Encoder => "E",
            Component::Style => "S",
            Component::Generator => "G",
            Component::Discriminator => "D",
            Component::Classifier => "C",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// He-normal with the given fan-in, times `scale`.
    FanIn { fan_in: usize, scale: f64 },
    Zeros,
    /// `head` for the first `at` entries, `tail` after.
    Split { at: usize, head: f64, tail: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub component: Component,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub component: Component,
    pub value: Tensor<T>,
}

/// All trainable tensors of the five networks, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub(crate) fn from_specs(specs: &[ParamSpec], seed: u64, leaky_slope: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + leaky_slope * leaky_slope)).sqrt();
        let entries = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<T> = match s.init {
                    Init::FanIn { fan_in, scale } => {
                        let std = gain * scale / (fan_in as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
                    }
                    Init::Zeros => vec![T::zero(); n],
                    Init::Split { at, head, tail } => (0..n)
                        .map(|i| T::lit(if i < at { head } else { tail }))
                        .collect(),
                };
                ParamEntry {
                    name: s.name.clone(),
                    component: s.component,
                    value: Tensor::from_vec(&s.shape, data).expect("spec shape"),
                }
            })
            .collect();
        Self { entries }
    }

    pub fn from_entries(entries: Vec<ParamEntry<T>>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn count_for(&self, component: Component) -> usize {
        self.entries
            .iter()
            .filter(|e| e.component == component)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|e| &e.value)
    }

    /// Snapshot of one component's tensors, for equality checks.
    pub fn component_values(&self, component: Component) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .filter(|e| e.component == component)
            .map(|e| e.value.clone())
            .collect()
    }

    /// Place every tensor on `g`: components selected by `trainable` as
    /// gradient-tracking leaves, the rest as constants.
    pub fn bind_with(&self, g: &mut Graph<T>, trainable: impl Fn(Component) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable(e.component) {
                    g.param(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, |_| true)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    component: e.component,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`], index-aligned with its entries.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
