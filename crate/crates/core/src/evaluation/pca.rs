use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::scalar::Scalar;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column eigenvectors (row-major `n x n`).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Project rows of the `n x f` matrix `x` onto its two leading principal
/// axes. Each axis is signed so its largest loading is positive.
pub fn pca_2d(x: &[f64], n: usize, f: usize) -> Result<Vec<[f64; 2]>> {
    if n == 0 || f < 2 || x.len() != n * f {
        return Err(Error::shape(format!("pca_2d needs an n x f matrix with f >= 2, got {} values for {n} x {f}", x.len())));
    }
    let mut mean = vec![0.0; f];
    for row in x.chunks(f) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<f64> = x.chunks(f).flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    let mut cov = vec![0.0; f * f];
    for row in centered.chunks(f) {
        for i in 0..f {
            for j in 0..f {
                cov[i * f + j] += row[i] * row[j];
            }
        }
    }
    for c in &mut cov {
        *c /= n as f64;
    }
    let (vals, vecs) = jacobi_eigen(cov, f);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let axis = |k: usize| -> Vec<f64> {
        let col: Vec<f64> = (0..f).map(|i| vecs[i * f + order[k]]).collect();
        let lead = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            col.iter().map(|v| -v).collect()
        } else {
            col
        }
    };
    let (a0, a1) = (axis(0), axis(1));
    let mut out: Vec<[f64; 2]> = centered
        .chunks(f)
        .map(|r| {
            [
                r.iter().zip(&a0).map(|(x, y)| x * y).sum(),
                r.iter().zip(&a1).map(|(x, y)| x * y).sum(),
            ]
        })
        .collect();
    // remove rounding drift so each axis is centered
    for k in 0..2 {
        let m = out.iter().map(|p| p[k]).sum::<f64>() / n as f64;
        for p in &mut out {
            p[k] -= m;
        }
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write per-sample feature vectors `(f0.., label, domain_id)` and their 2-D
/// PCA projection `(pc1, pc2, label, domain_id)`. Returns the row count.
pub fn export_embeddings<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    features_path: &Path,
    pca_path: &Path,
) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::config("cannot export embeddings of an empty dataset"));
    }
    let f = model.networks.config().feature_dim;
    let mut feats = Vec::with_capacity(data.len() * f);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (_, fv) = model.encode(&data.batch_tensor::<T>(chunk))?;
        feats.extend(fv.0.data().iter().map(|v| v.as_f64()));
    }
    let mut s = String::new();
    for i in 0..f {
        write!(s, "f{i},").unwrap();
    }
    s.push_str("label,domain_id\n");
    for (row, im) in feats.chunks(f).zip(&data.images) {
        for v in row {
            write!(s, "{v:.4},").unwrap();
        }
        writeln!(s, "{},{}", im.label, im.domain).unwrap();
    }
    write(features_path, &s)?;
    let coords = pca_2d(&feats, data.len(), f)?;
    let mut s = String::from("pc1,pc2,label,domain_id\n");
    for (c, im) in coords.iter().zip(&data.images) {
        writeln!(s, "{:.4},{:.4},{},{}", c[0], c[1], im.label, im.domain).unwrap();
    }
    write(pca_path, &s)?;
    Ok(data.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_dominant_axis() {
        // points spread along (1, 1) with small noise along (1, -1)
        let mut x = Vec::new();
        for i in 0..25 {
            let t = i as f64 - 12.0;
            x.extend([t + 0.1, t - 0.1, t - 0.1, t + 0.1]);
        }
        let p = pca_2d(&x, 50, 2).unwrap();
        let var = |k: usize| p.iter().map(|r| r[k] * r[k]).sum::<f64>();
        assert!(var(0) > 100.0 * var(1));
        let m0 = p.iter().map(|r| r[0]).sum::<f64>();
        assert!(m0.abs() < 1e-9);
        // first coordinate is t * sqrt(2), up to sign
        assert!((p[0][0].abs() - 12.0 * 2f64.sqrt()).abs() < 1e-9);
    }
}
