//! `root/<domain>/<class>/<file>.png` datasets and their JSON manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetMeta, LabeledImage};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Sidecar describing an exported dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain_names: Vec<String>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub image_shape: [usize; 3],
    pub seed: Option<u64>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

fn subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    sort_names(&mut out);
    Ok(out)
}

/// Numeric order when every name is an integer, lexicographic otherwise.
fn sort_names(names: &mut [String]) {
    if names.iter().all(|n| n.parse::<u64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<u64>().unwrap());
    } else {
        names.sort();
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn decode(path: &Path, shape: [usize; 3]) -> Result<Vec<f32>> {
    let [c, h, w] = shape;
    if c != 3 && c != 1 {
        return Err(Error::config(format!("image channels must be 1 or 3, got {c}")));
    }
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.dimensions() != (w as u32, h as u32) {
        image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle)
    } else {
        rgb
    };
    let mut out = vec![0.0; c * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        if c == 3 {
            for ch in 0..3 {
                out[ch * h * w + i] = p[ch] as f32 / 255.0;
            }
        } else {
            out[i] = (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0;
        }
    }
    Ok(out)
}

/// Load every image under `root/<domain>/<class>/`, resized to `image_shape`.
/// Class sets must agree across domains.
pub fn load_directory_dataset(root: &Path, image_shape: [usize; 3]) -> Result<Dataset> {
    let domains = subdirs(root)?;
    if domains.len() < 2 {
        return Err(Error::Schema(format!(
            "{} has {} domain directories, need at least 2",
            root.display(),
            domains.len()
        )));
    }
    let classes = subdirs(&root.join(&domains[0]))?;
    let reference: BTreeSet<&String> = classes.iter().collect();
    for d in &domains[1..] {
        let other = subdirs(&root.join(d))?;
        let set: BTreeSet<&String> = other.iter().collect();
        if set != reference {
            let missing: Vec<_> = reference.difference(&set).collect();
            let extra: Vec<_> = set.difference(&reference).collect();
            return Err(Error::Schema(format!(
                "class directories of domain {d} differ from {}: missing {:?}, unexpected {:?}",
                domains[0], missing, extra
            )));
        }
    }
    if classes.len() < 2 {
        return Err(Error::Schema(format!("need at least 2 classes, found {}", classes.len())));
    }
    let mut images = Vec::new();
    for (di, d) in domains.iter().enumerate() {
        for (ci, c) in classes.iter().enumerate() {
            for path in image_files(&root.join(d).join(c))? {
                images.push(LabeledImage {
                    pixels: decode(&path, image_shape)?,
                    label: ci,
                    domain: di,
                });
            }
        }
    }
    let meta = DatasetMeta {
        num_classes: classes.len(),
        domain_names: domains,
        image_shape,
        counts: Vec::new(),
    };
    Dataset::new(meta, images)
}

/// Write `data` as 8-bit PNGs in the directory layout plus `manifest.json`.
/// Class directories are named by class index.
pub fn export_directory_dataset(data: &Dataset, root: &Path, seed: Option<u64>) -> Result<Manifest> {
    let [c, h, w] = data.meta.image_shape;
    let class_names: Vec<String> = (0..data.meta.num_classes).map(|k| k.to_string()).collect();
    for d in &data.meta.domain_names {
        for k in &class_names {
            let dir = root.join(d).join(k);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let mut counters = vec![0usize; data.meta.num_domains()];
    for im in &data.images {
        let idx = counters[im.domain];
        counters[im.domain] += 1;
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            let i = y as usize * w + x as usize;
            for ch in 0..3 {
                let v = im.pixels[(ch % c) * h * w + i];
                p[ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        let path = root
            .join(&data.meta.domain_names[im.domain])
            .join(&class_names[im.label])
            .join(format!("{idx:05}.png"));
        buf.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    let manifest = Manifest {
        domain_names: data.meta.domain_names.clone(),
        num_classes: data.meta.num_classes,
        class_names,
        counts: data.meta.counts.clone(),
        image_shape: data.meta.image_shape,
        seed,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
