use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters for the five networks.
///
/// Every convolution is 3x3 with padding 1. Encoder strides must be 1 or 2;
/// the generator mirrors the encoder's total downsampling with one nearest
/// 2x upsample in front of each decoder block after the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// `(channels, height, width)` of input and generated images.
    pub image_shape: [usize; 3],
    pub encoder_widths: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    /// Width `F` of the pooled feature vector fed to C and D.
    pub feature_dim: usize,
    /// Stride-2 convolutions of the style extractor.
    pub style_widths: Vec<usize>,
    /// AdaIN-modulated generator blocks, coarsest first.
    pub decoder_widths: Vec<usize>,
    pub discriminator_hidden: usize,
    pub num_classes: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_shape: [3, 32, 32],
            encoder_widths: vec![32, 64, 128, 128],
            encoder_strides: vec![1, 2, 2, 1],
            feature_dim: 128,
            style_widths: vec![32, 64, 64],
            decoder_widths: vec![128, 64, 32],
            discriminator_hidden: 64,
            num_classes: 10,
            leaky_slope: 0.2,
            norm_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    /// Narrow variant of the default topology sized for single-core CPU
    /// experiments: same block structure, a quarter of the channels.
    pub fn compact() -> Self {
        Self {
            encoder_widths: vec![8, 16, 16],
            encoder_strides: vec![2, 2, 1],
            feature_dim: 32,
            style_widths: vec![8, 16, 16],
            decoder_widths: vec![16, 8, 4],
            discriminator_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        let [c, h, w] = self.image_shape;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("image_shape {:?} has a zero extent", self.image_shape));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.encoder_strides.len() {
            return bad("encoder_widths and encoder_strides must be non-empty and equal length".into());
        }
        if self.encoder_strides.iter().any(|&s| s != 1 && s != 2) {
            return bad(format!("encoder strides must be 1 or 2, got {:?}", self.encoder_strides));
        }
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.style_widths)
            .chain(&self.decoder_widths);
        if widths.copied().any(|v| v == 0)
            || self.feature_dim == 0
            || self.discriminator_hidden == 0
        {
            return bad("all widths must be at least 1".into());
        }
        if self.style_widths.is_empty() || self.decoder_widths.is_empty() {
            return bad("style_widths and decoder_widths must be non-empty".into());
        }
        let factor = self.downsample_factor();
        if h % factor != 0 || w % factor != 0 {
            return bad(format!("image {h}x{w} not divisible by encoder downsampling {factor}"));
        }
        if self.decoder_widths.len() != self.downsamples() + 1 {
            return bad(format!(
                "decoder needs {} blocks to undo {} downsamplings, got {}",
                self.downsamples() + 1,
                self.downsamples(),
                self.decoder_widths.len()
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope must be finite and >= 0, got {}", self.leaky_slope));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return bad(format!("norm_eps must be > 0, got {}", self.norm_eps));
        }
        Ok(())
    }

    fn downsamples(&self) -> usize {
        self.encoder_strides.iter().filter(|&&s| s == 2).count()
    }

    fn downsample_factor(&self) -> usize {
        1 << self.downsamples()
    }

    /// `(C_s, H_s, W_s)` of the semantic map.
    pub fn semantic_shape(&self) -> [usize; 3] {
        let f = self.downsample_factor();
        [
            *self.encoder_widths.last().unwrap(),
            self.image_shape[1] / f,
            self.image_shape[2] / f,
        ]
    }

    /// Total modulated channel count `C_g` across generator blocks.
    pub fn style_dim(&self) -> usize {
        self.decoder_widths.iter().sum()
    }

    /// Number of trainable scalars, derived from layer shapes alone.
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize| o * i * 9 + o;
        let lin = |i: usize, o: usize| o * i + o;
        let chain = |first: usize, widths: &[usize]| {
            let mut prev = first;
            widths
                .iter()
                .map(|&w| {
                    let n = conv(prev, w);
                    prev = w;
                    n
                })
                .sum::<usize>()
        };
        let c_in = self.image_shape[0];
        let c_s = *self.encoder_widths.last().unwrap();
        let encoder = chain(c_in, &self.encoder_widths) + lin(c_s, self.feature_dim);
        let style = chain(c_in, &self.style_widths)
            + lin(*self.style_widths.last().unwrap(), 2 * self.style_dim());
        // decoder blocks are instance-normalized and carry no bias
        let generator = chain(c_s, &self.decoder_widths) - self.style_dim() + conv(*self.decoder_widths.last().unwrap(), c_in);
        let disc = lin(self.feature_dim, self.discriminator_hidden) + lin(self.discriminator_hidden, 1);
        let classifier = lin(self.feature_dim, self.num_classes);
        encoder + style + generator + disc + classifier
    }
}
