//! Procedural domain-shifted digit domains.
//!
//! All domains share the same ten glyph templates; a domain is defined only
//! by its ordered list of rendering transforms, none of which touches glyph
//! geometry beyond stroke weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::glyphs::{rasterize, Jitter, NUM_GLYPHS};
use super::{Dataset, DatasetMeta, LabeledImage};
use crate::error::{Error, Result};

/// Base stroke half-width in unit glyph coordinates.
const BASE_HALF_WIDTH: f32 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StyleOp {
    /// Fixed foreground/background colors.
    Palette { fg: [f32; 3], bg: [f32; 3] },
    /// Random per-sample colors whose luminances differ by at least
    /// `min_contrast`.
    RandomPalette { min_contrast: f32 },
    /// Uniform noise of this amplitude on background pixels.
    Texture { level: f32 },
    /// Stroke thickening, in pixels.
    Dilate { radius: f32 },
    /// Gaussian blur of the coverage mask.
    Blur { sigma: f32 },
    /// `1 - x` on every channel.
    Invert,
    /// Scale around mid-gray.
    Contrast { factor: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    pub ops: Vec<StyleOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub seed: u64,
    pub domains: Vec<DomainStyle>,
}

impl DomainShiftSpec {
    /// `m` domains cycling through four style families: clean grayscale,
    /// random color palettes, thick strokes on textured background, and
    /// blurred dark-on-light. Families repeat with stronger parameters past
    /// the fourth domain.
    pub fn standard(m: usize, seed: u64) -> Self {
        let white = [1.0, 1.0, 1.0];
        let black = [0.0, 0.0, 0.0];
        let domains = (0..m)
            .map(|i| {
                let round = (i / 4) as f32;
                let (name, ops) = match i % 4 {
                    0 => (
                        "clean",
                        vec![StyleOp::Palette { fg: white, bg: black }],
                    ),
                    1 => (
                        "color",
                        vec![StyleOp::RandomPalette {
                            min_contrast: 0.35 - 0.05 * round.min(4.0),
                        }],
                    ),
                    2 => (
                        "texture",
                        vec![
                            StyleOp::Dilate { radius: 0.8 + 0.3 * round },
                            StyleOp::Palette {
                                fg: [0.95, 0.9, 0.6],
                                bg: [0.2, 0.25, 0.35],
                            },
                            StyleOp::Texture { level: 0.3 + 0.1 * round },
                        ],
                    ),
                    _ => (
                        "inverted",
                        vec![
                            StyleOp::Blur { sigma: 0.9 + 0.3 * round },
                            StyleOp::Palette { fg: white, bg: black },
                            StyleOp::Invert,
                            StyleOp::Contrast { factor: 0.8 },
                        ],
                    ),
                };
                let name = if i < 4 {
                    name.to_string()
                } else {
                    format!("{name}{}", i / 4 + 1)
                };
                DomainStyle { name, ops }
            })
            .collect();
        Self { seed, domains }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::config(format!(
                "domain shift spec needs at least 2 domains, got {}",
                self.domains.len()
            )));
        }
        for d in &self.domains {
            if d.ops.is_empty() {
                return Err(Error::config(format!("domain {} has an empty transform list", d.name)));
            }
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.domains.len() {
            return Err(Error::config("domain names must be unique"));
        }
        Ok(())
    }
}

fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_palette(rng: &mut ChaCha8Rng, min_contrast: f32) -> ([f32; 3], [f32; 3]) {
    loop {
        let fg = [rng.gen(), rng.gen(), rng.gen()];
        let bg = [rng.gen(), rng.gen(), rng.gen()];
        if (luminance(fg) - luminance(bg)).abs() >= min_contrast {
            return (fg, bg);
        }
    }
}

fn gaussian_blur(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let o = k as isize - r;
                    let (ii, jj) = if horizontal {
                        (i as isize, (j as isize + o).clamp(0, w as isize - 1))
                    } else {
                        ((i as isize + o).clamp(0, h as isize - 1), j as isize)
                    };
                    acc += kv * src[ii as usize * w + jj as usize];
                }
                out[i * w + j] = acc / norm;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Render one sample of `class` under `style`. Returns CHW pixels.
fn render(class: usize, style: &DomainStyle, shape: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let [c, h, w] = shape;
    let jitter = Jitter {
        rotation: rng.gen_range(-0.2..0.2),
        scale: rng.gen_range(0.85..1.1),
        shear: rng.gen_range(-0.15..0.15),
        dx: rng.gen_range(-0.06..0.06),
        dy: rng.gen_range(-0.06..0.06),
    };
    let px = 1.0 / h.max(w) as f32;
    let dilation: f32 = style
        .ops
        .iter()
        .map(|op| match op {
            StyleOp::Dilate { radius } => *radius,
            _ => 0.0,
        })
        .sum();
    let mut mask = rasterize(class, h, w, BASE_HALF_WIDTH + dilation * px, &jitter);
    let mut rgb: Option<Vec<f32>> = None;
    let colorize = |mask: &[f32], fg: [f32; 3], bg: [f32; 3]| -> Vec<f32> {
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let (f, b) = (fg[ch % 3], bg[ch % 3]);
            for (o, &m) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(mask) {
                *o = b * (1.0 - m) + f * m;
            }
        }
        out
    };
    for op in &style.ops {
        match op {
            StyleOp::Dilate { .. } => {}
            StyleOp::Blur { sigma } => match &mut rgb {
                None => mask = gaussian_blur(&mask, h, w, *sigma),
                Some(img) => {
                    for ch in 0..c {
                        let p = gaussian_blur(&img[ch * h * w..(ch + 1) * h * w], h, w, *sigma);
                        img[ch * h * w..(ch + 1) * h * w].copy_from_slice(&p);
                    }
                }
            },
            StyleOp::Palette { fg, bg } => rgb = Some(colorize(&mask, *fg, *bg)),
            StyleOp::RandomPalette { min_contrast } => {
                let (fg, bg) = random_palette(rng, *min_contrast);
                rgb = Some(colorize(&mask, fg, bg));
            }
            StyleOp::Texture { level } => {
                let img = rgb.get_or_insert_with(|| colorize(&mask, [1.0; 3], [0.0; 3]));
                for i in 0..h * w {
                    let bg = 1.0 - mask[i];
                    for ch in 0..c {
                        let n: f32 = rng.gen_range(-1.0..1.0);
                        img[ch * h * w + i] += level * n * bg;
                    }
                }
            }
            StyleOp::Invert => {
                let img = rgb.get_or_insert_with(|| colorize(&mask, [1.0; 3], [0.0; 3]));
                img.iter_mut().for_each(|v| *v = 1.0 - *v);
            }
            StyleOp::Contrast { factor } => {
                let img = rgb.get_or_insert_with(|| colorize(&mask, [1.0; 3], [0.0; 3]));
                img.iter_mut().for_each(|v| *v = 0.5 + (*v - 0.5) * factor);
            }
        }
    }
    let mut out = rgb.unwrap_or_else(|| colorize(&mask, [1.0; 3], [0.0; 3]));
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Per-domain generator seed, independent of domain order elsewhere.
fn domain_seed(seed: u64, domain: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (domain as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Generate `per_domain` images for every domain of `spec`, classes
/// assigned round-robin so each domain is balanced to within one sample.
pub fn synthesize_domains(spec: &DomainShiftSpec, num_classes: usize, per_domain: usize) -> Result<Dataset> {
    spec.validate()?;
    if num_classes < 2 || num_classes > NUM_GLYPHS {
        return Err(Error::config(format!(
            "num_classes must be in 2..={NUM_GLYPHS}, got {num_classes}"
        )));
    }
    if per_domain < num_classes {
        return Err(Error::config(format!(
            "per_domain ({per_domain}) must be at least num_classes ({num_classes})"
        )));
    }
    let shape = [3, 32, 32];
    let mut images = Vec::with_capacity(spec.domains.len() * per_domain);
    for (d, style) in spec.domains.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(spec.seed, d));
        for i in 0..per_domain {
            let label = i % num_classes;
            images.push(LabeledImage {
                pixels: render(label, style, shape, &mut rng),
                label,
                domain: d,
            });
        }
    }
    let meta = DatasetMeta {
        num_classes,
        domain_names: spec.domains.iter().map(|d| d.name.clone()).collect(),
        image_shape: shape,
        counts: Vec::new(),
    };
    Dataset::new(meta, images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = DomainShiftSpec::standard(2, 0);
        let a = synthesize_domains(&spec, 10, 10).unwrap();
        let b = synthesize_domains(&spec, 10, 10).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.digest(), b.digest());
        let c = synthesize_domains(&DomainShiftSpec::standard(2, 1), 10, 10).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn classes_balanced_per_domain() {
        let d = synthesize_domains(&DomainShiftSpec::standard(3, 1), 10, 100).unwrap();
        for dom in 0..3 {
            let mut counts = [0usize; 10];
            for im in d.images.iter().filter(|i| i.domain == dom) {
                counts[im.label] += 1;
            }
            assert_eq!(counts, [10; 10]);
        }
        assert_eq!(d.meta.counts, vec![100, 100, 100]);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(synthesize_domains(&DomainShiftSpec::standard(1, 0), 10, 10).is_err());
        let mut spec = DomainShiftSpec::standard(3, 0);
        spec.domains[1].ops.clear();
        assert!(matches!(synthesize_domains(&spec, 10, 10), Err(Error::Config(_))));
        assert!(synthesize_domains(&DomainShiftSpec::standard(3, 0), 10, 5).is_err());
    }

    #[test]
    fn styles_differ_across_domains() {
        let d = synthesize_domains(&DomainShiftSpec::standard(4, 3), 10, 10).unwrap();
        let mean = |dom: usize| {
            let px: Vec<f32> = d
                .images
                .iter()
                .filter(|i| i.domain == dom)
                .flat_map(|i| i.pixels.iter().copied())
                .collect();
            px.iter().sum::<f32>() / px.len() as f32
        };
        // dark-background clean domain vs light-background inverted domain
        assert!(mean(0) < 0.3);
        assert!(mean(3) > 0.6);
    }
}
