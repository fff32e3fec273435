use crate::autodiff::kernels::plane_stats;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::StyleCode;

/// Restyle `content` `(N, C, H, W)` so every channel plane takes the
/// style's mean and standard deviation.
pub fn adain<T: Scalar>(content: &Tensor<T>, style: &StyleCode<T>, eps: T) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let x = g.constant(content.clone());
    let m = g.constant(style.mean.clone());
    let s = g.constant(style.std.clone());
    let y = g.adain(x, m, s, eps)?;
    Ok(g.value(y).clone())
}

/// Per-channel population statistics of a feature map, as a style code.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<StyleCode<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected NCHW, got {:?}", s)));
    }
    let hw = s[2] * s[3];
    let (mean, std): (Vec<T>, Vec<T>) = x
        .data()
        .chunks(hw)
        .map(|p| {
            let (m, sd, _) = plane_stats(p, eps);
            (m, sd)
        })
        .unzip();
    Ok(StyleCode {
        mean: Tensor::from_vec(&[s[0], s[1]], mean)?,
        std: Tensor::from_vec(&[s[0], s[1]], std)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code(mean: &[f64], std: &[f64]) -> StyleCode<f64> {
        StyleCode {
            mean: Tensor::from_f64(&[1, mean.len()], mean).unwrap(),
            std: Tensor::from_f64(&[1, std.len()], std).unwrap(),
        }
    }

    #[test]
    fn standardizes_three_values() {
        let x = Tensor::from_f64(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let y = adain(&x, &code(&[0.0], &[1.0]), 1e-5).unwrap();
        // population sigma = sqrt(2/3)
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_channel_goes_to_style_mean() {
        let x = Tensor::from_f64(&[1, 1, 2, 2], &[4.0; 4]).unwrap();
        let y = adain(&x, &code(&[0.3], &[2.0]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        assert!(matches!(adain(&x, &code(&[0.0], &[1.0]), 1e-5), Err(Error::Shape(_))));
    }

    fn feature_map() -> impl Strategy<Value = Tensor<f64>> {
        (1usize..3, 1usize..4, 2usize..5).prop_flat_map(|(n, c, hw)| {
            prop::collection::vec(-5.0f64..5.0, n * c * hw * hw)
                .prop_map(move |d| Tensor::from_vec(&[n, c, hw, hw], d).unwrap())
        })
    }

    fn style_for(x: &Tensor<f64>, seed: f64) -> StyleCode<f64> {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let m: Vec<f64> = (0..n * c).map(|i| ((i as f64 + seed) * 1.7).sin() * 3.0).collect();
        let s: Vec<f64> = (0..n * c).map(|i| 0.1 + ((i as f64 + seed) * 0.9).cos().abs() * 2.0).collect();
        StyleCode {
            mean: Tensor::from_vec(&[n, c], m).unwrap(),
            std: Tensor::from_vec(&[n, c], s).unwrap(),
        }
    }

    fn non_degenerate(x: &Tensor<f64>) -> bool {
        let st = channel_stats(x, 1e-5).unwrap();
        st.std.data().iter().all(|&s| s > 1e-3)
    }

    proptest! {
        #[test]
        fn moment_matching(x in feature_map(), seed in 0.0f64..10.0) {
            prop_assume!(non_degenerate(&x));
            let style = style_for(&x, seed);
            let y = adain(&x, &style, 1e-5).unwrap();
            let st = channel_stats(&y, 1e-5).unwrap();
            prop_assert!(st.mean.max_abs_diff(&style.mean) < 1e-5);
            prop_assert!(st.std.max_abs_diff(&style.std) < 1e-5);
        }

        #[test]
        fn identity_under_own_stats(x in feature_map()) {
            let own = channel_stats(&x, 1e-5).unwrap();
            prop_assume!(non_degenerate(&x));
            let y = adain(&x, &own, 1e-5).unwrap();
            prop_assert!(y.max_abs_diff(&x) < 1e-6);
        }

        #[test]
        fn second_restyle_overrides_first(x in feature_map(), a in 0.0f64..5.0, b in 5.0f64..10.0) {
            prop_assume!(non_degenerate(&x));
            let (y, z) = (style_for(&x, a), style_for(&x, b));
            let twice = adain(&adain(&x, &y, 1e-5).unwrap(), &z, 1e-5).unwrap();
            let once = adain(&x, &z, 1e-5).unwrap();
            prop_assert!(twice.max_abs_diff(&once) < 1e-5);
        }
    }
}
