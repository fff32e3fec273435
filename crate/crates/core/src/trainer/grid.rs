use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Save `columns` (each `(N, 3, H, W)` in `[0, 1]`) side by side, one image
/// row per sample.
pub fn write_image_grid<T: Scalar>(path: &Path, columns: &[&Tensor<T>]) -> Result<()> {
    let Some(first) = columns.first() else {
        return Err(Error::config("image grid needs at least one column"));
    };
    let shape = first.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape(format!("image grid expects (N, 3, H, W), got {shape:?}")));
    }
    if let Some(c) = columns.iter().find(|c| c.shape() != shape.as_slice()) {
        return Err(Error::shape(format!("grid column shape {:?} differs from {shape:?}", c.shape())));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let mut img = RgbImage::new((w * columns.len()) as u32, (h * n) as u32);
    for (ci, col) in columns.iter().enumerate() {
        for i in 0..n {
            let row = col.row(i);
            for y in 0..h {
                for x in 0..w {
                    let px = |c: usize| (row[c * h * w + y * w + x].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel((ci * w + x) as u32, (i * h + y) as u32, Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
