//! Encoder E, style extractor S, AdaIN generator G, feature discriminator D
//! and classifier C.
//!
//! [`Networks`] holds only the architecture (which parameter index feeds
//! which layer). Parameters live in a [`ParamSet`] and are placed on a
//! [`Graph`] per forward pass, so the same code path serves training,
//! inference and gradient checking at any [`Scalar`] precision.

mod adain;
mod config;
mod model;
mod params;

pub use adain::{adain, channel_stats};
pub use config::NetworkConfig;
pub use model::{FeatureVector, Model, PredictiveDistribution, SemanticMap, StyleCode};
pub use params::{Bound, Component, ParamEntry, ParamSet};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use params::{Init, ParamSpec};

/// Floor added to the softplus output of the style extractor.
pub const STYLE_STD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: Option<usize>,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

/// Graph handles of a style code: per-channel AdaIN targets.
#[derive(Debug, Clone, Copy)]
pub struct StyleVars {
    pub mean: Var,
    pub std: Var,
}

#[derive(Debug, Clone)]
pub struct Networks {
    config: NetworkConfig,
    specs: Vec<ParamSpec>,
    encoder: Vec<Conv>,
    encoder_head: Dense,
    style: Vec<Conv>,
    style_head: Dense,
    decoder: Vec<Conv>,
    decoder_out: Conv,
    disc_hidden: Dense,
    disc_out: Dense,
    classifier: Dense,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, component: Component, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            component,
            shape,
            init,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, c: Component, name: &str, cin: usize, cout: usize, stride: usize, scale: f64) -> Conv {
        let mut l = self.conv_unbiased(c, name, cin, cout, stride, scale);
        l.b = Some(self.push(format!("{}.{name}.bias", c.tag()), c, vec![cout], Init::Zeros));
        l
    }

    /// A convolution whose output is instance-normalized right after, where
    /// a bias would be cancelled.
    fn conv_unbiased(&mut self, c: Component, name: &str, cin: usize, cout: usize, stride: usize, scale: f64) -> Conv {
        let w = self.push(
            format!("{}.{name}.weight", c.tag()),
            c,
            vec![cout, cin, 3, 3],
            Init::FanIn { fan_in: cin * 9, scale },
        );
        Conv { w, b: None, stride }
    }

    fn dense(&mut self, c: Component, name: &str, din: usize, dout: usize, scale: f64, bias: Init) -> Dense {
        let w = self.push(
            format!("{}.{name}.weight", c.tag()),
            c,
            vec![dout, din],
            Init::FanIn { fan_in: din, scale },
        );
        let b = self.push(format!("{}.{name}.bias", c.tag()), c, vec![dout], bias);
        Dense { w, b }
    }
}

impl Networks {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { specs: Vec::new() };
        let c_in = config.image_shape[0];

        let mut prev = c_in;
        let encoder = config
            .encoder_widths
            .iter()
            .zip(&config.encoder_strides)
            .enumerate()
            .map(|(i, (&w, &s))| {
                let l = b.conv(Component::Encoder, &format!("conv{i}"), prev, w, s, 1.0);
                prev = w;
                l
            })
            .collect();
        let c_s = prev;
        let encoder_head = b.dense(Component::Encoder, "proj", c_s, config.feature_dim, 1.0, Init::Zeros);

        let mut prev = c_in;
        let style = config
            .style_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = b.conv(Component::Style, &format!("conv{i}"), prev, w, 2, 1.0);
                prev = w;
                l
            })
            .collect();
        // mean half starts at 0, std half at softplus^-1(1)
        let c_g = config.style_dim();
        let style_head = b.dense(
            Component::Style,
            "head",
            prev,
            2 * c_g,
            0.1,
            Init::Split {
                at: c_g,
                head: 0.0,
                tail: (std::f64::consts::E - 1.0).ln(),
            },
        );

        let mut prev = c_s;
        let decoder = config
            .decoder_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = b.conv_unbiased(Component::Generator, &format!("block{i}"), prev, w, 1, 1.0);
                prev = w;
                l
            })
            .collect();
        // small output weights keep the initial sigmoid output near mid-gray
        let decoder_out = b.conv(Component::Generator, "out", prev, c_in, 1, 0.1);

        let disc_hidden = b.dense(
            Component::Discriminator,
            "fc0",
            config.feature_dim,
            config.discriminator_hidden,
            1.0,
            Init::Zeros,
        );
        let disc_out = b.dense(Component::Discriminator, "fc1", config.discriminator_hidden, 1, 1.0, Init::Zeros);
        let classifier = b.dense(
            Component::Classifier,
            "fc",
            config.feature_dim,
            config.num_classes,
            1.0,
            Init::Zeros,
        );

        Ok(Self {
            config,
            specs: b.specs,
            encoder,
            encoder_head,
            style,
            style_head,
            decoder,
            decoder_out,
            disc_hidden,
            disc_out,
            classifier,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Parameter names in binding order.
    pub fn parameter_names(&self) -> Vec<&str> {
        self.specs.iter().map(|s| s.name.as_str()).collect()
    }

    /// Seeded fan-in-scaled initialization of all five networks.
    pub fn init_parameters<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        ParamSet::from_specs(&self.specs, seed, self.config.leaky_slope)
    }

    /// Check that `params` has exactly this architecture's layout.
    pub fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::shape(format!(
                "parameter set has {} tensors, architecture expects {}",
                params.len(),
                self.specs.len()
            )));
        }
        for (e, s) in params.entries().iter().zip(&self.specs) {
            if e.name != s.name || e.value.shape() != s.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    e.name,
                    e.value.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(())
    }

    fn slope<T: Scalar>(&self) -> T {
        T::lit(self.config.leaky_slope)
    }

    fn check_images<T: Scalar>(&self, g: &Graph<T>, images: Var) -> Result<usize> {
        let s = g.shape(images);
        if s.len() != 4 || s[1..] != self.config.image_shape {
            return Err(Error::shape(format!(
                "images {:?} do not match configured (N, {}, {}, {})",
                s, self.config.image_shape[0], self.config.image_shape[1], self.config.image_shape[2]
            )));
        }
        Ok(s[0])
    }

    fn check_features<T: Scalar>(&self, g: &Graph<T>, features: Var) -> Result<usize> {
        let s = g.shape(features);
        if s.len() != 2 || s[1] != self.config.feature_dim {
            return Err(Error::shape(format!(
                "features {:?} do not match (N, {})",
                s, self.config.feature_dim
            )));
        }
        Ok(s[0])
    }

    fn conv_act<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, l: Conv) -> Result<Var> {
        let y = g.conv2d(x, p.var(l.w), l.b.map(|b| p.var(b)), l.stride, 1)?;
        Ok(g.leaky_relu(y, self.slope()))
    }

    fn dense<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, l: Dense) -> Result<Var> {
        g.linear(x, p.var(l.w), Some(p.var(l.b)))
    }

    /// `E`: images to `(semantic map, feature vector)`. The feature vector is
    /// a linear projection of the global-average-pooled semantic map.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<(Var, Var)> {
        self.check_images(g, images)?;
        let mut x = images;
        for &l in &self.encoder {
            x = self.conv_act(g, p, x, l)?;
        }
        let pooled = g.global_avg_pool(x)?;
        let features = self.dense(g, p, pooled, self.encoder_head)?;
        Ok((x, features))
    }

    /// `S`: images to per-channel AdaIN targets for every generator block.
    pub fn extract_style<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<StyleVars> {
        self.check_images(g, images)?;
        let mut x = images;
        for &l in &self.style {
            x = self.conv_act(g, p, x, l)?;
        }
        let pooled = g.global_avg_pool(x)?;
        let raw = self.dense(g, p, pooled, self.style_head)?;
        let c_g = self.config.style_dim();
        let mean = g.narrow(raw, 1, 0, c_g)?;
        let raw_std = g.narrow(raw, 1, c_g, c_g)?;
        let sp = g.softplus(raw_std);
        let std = g.add_scalar(sp, T::lit(STYLE_STD_FLOOR));
        Ok(StyleVars { mean, std })
    }

    /// `G`: decode a semantic map under a style code to images in `[0, 1]`.
    pub fn generate<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, semantics: Var, style: StyleVars) -> Result<Var> {
        let s = g.shape(semantics).to_vec();
        let expect = self.config.semantic_shape();
        if s.len() != 4 || s[1..] != expect {
            return Err(Error::shape(format!("semantic map {:?} does not match (N, {:?})", s, expect)));
        }
        let c_g = self.config.style_dim();
        for v in [style.mean, style.std] {
            let ss = g.shape(v);
            if ss != [s[0], c_g] {
                return Err(Error::shape(format!(
                    "style code {:?} does not match semantics batch {} x C_g {}",
                    ss, s[0], c_g
                )));
            }
        }
        let eps = T::lit(self.config.norm_eps);
        let mut x = semantics;
        let mut offset = 0;
        for (i, &l) in self.decoder.iter().enumerate() {
            if i > 0 {
                x = g.upsample2x(x)?;
            }
            let width = self.config.decoder_widths[i];
            let y = g.conv2d(x, p.var(l.w), None, 1, 1)?;
            let mean = g.narrow(style.mean, 1, offset, width)?;
            let std = g.narrow(style.std, 1, offset, width)?;
            let y = g.adain(y, mean, std, eps)?;
            x = g.leaky_relu(y, self.slope());
            offset += width;
        }
        let out = g.conv2d(x, p.var(self.decoder_out.w), self.decoder_out.b.map(|b| p.var(b)), 1, 1)?;
        Ok(g.sigmoid(out))
    }

    /// `D`: one unbounded real logit per feature row, shape `(N,)`.
    pub fn discriminate<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let n = self.check_features(g, features)?;
        let h = self.dense(g, p, features, self.disc_hidden)?;
        let h = g.leaky_relu(h, self.slope());
        let s = self.dense(g, p, h, self.disc_out)?;
        g.reshape(s, &[n])
    }

    /// `C`: class logits `(N, K)`.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        self.check_features(g, features)?;
        self.dense(g, p, features, self.classifier)
    }
}
