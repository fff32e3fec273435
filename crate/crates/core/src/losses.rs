//! The seven training losses and their weighted sum.
//!
//! Every function takes graph handles and returns a scalar graph node, so the
//! same code computes values and gradients. Batch reductions are means.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Norm floor inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;
/// Discriminator probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Balancing weights, in objective order: intra, inter, recon, cycle, adv,
/// kl, ce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub intra: f64,
    pub inter: f64,
    pub recon: f64,
    pub cycle: f64,
    pub adv: f64,
    pub kl: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            intra: 1.0,
            inter: 1.0,
            recon: 1.0,
            cycle: 1.0,
            adv: 1.0,
            kl: 8.0,
            ce: 0.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            intra: 0.0,
            inter: 0.0,
            recon: 0.0,
            cycle: 0.0,
            adv: 0.0,
            kl: 0.0,
            ce: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [self.intra, self.inter, self.recon, self.cycle, self.adv, self.kl, self.ce]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in LOSS_NAMES.iter().zip(self.as_array()) {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// Zero the weights of losses the mask disables.
    pub fn masked(&self, mask: &LossMask) -> Self {
        let keep = |on: bool, w: f64| if on { w } else { 0.0 };
        Self {
            intra: keep(mask.intra, self.intra),
            inter: keep(mask.inter, self.inter),
            recon: keep(mask.recon, self.recon),
            cycle: keep(mask.cycle, self.cycle),
            adv: keep(mask.adv, self.adv),
            kl: keep(mask.kl, self.kl),
            ce: keep(mask.ce, self.ce),
        }
    }
}

const LOSS_NAMES: [&str; 7] = ["intra", "inter", "recon", "cycle", "adv", "kl", "ce"];

/// Which losses take part in an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossMask {
    pub recon: bool,
    pub intra: bool,
    pub inter: bool,
    pub cycle: bool,
    pub adv: bool,
    pub ce: bool,
    pub kl: bool,
}

impl LossMask {
    /// Column order used by ablation tables.
    pub const COLUMNS: [&'static str; 7] = ["recon", "intra", "inter", "cycle", "adv", "ce", "kl"];

    pub fn all() -> Self {
        Self::from_flags([true; 7])
    }

    pub fn ce_only() -> Self {
        Self::from_flags([false, false, false, false, false, true, false])
    }

    /// Flags in [`Self::COLUMNS`] order.
    pub fn from_flags(f: [bool; 7]) -> Self {
        Self {
            recon: f[0],
            intra: f[1],
            inter: f[2],
            cycle: f[3],
            adv: f[4],
            ce: f[5],
            kl: f[6],
        }
    }

    pub fn flags(&self) -> [bool; 7] {
        [self.recon, self.intra, self.inter, self.cycle, self.adv, self.ce, self.kl]
    }

    /// The nine loss combinations of the reference ablation grid, from
    /// classification-only up to the full objective.
    pub fn reference_grid() -> Vec<Self> {
        const T: bool = true;
        const F: bool = false;
        [
            [F, F, F, F, F, T, F],
            [T, F, F, F, F, T, F],
            [F, F, F, T, F, T, F],
            [F, F, F, T, T, T, F],
            [T, F, F, F, T, T, T],
            [T, T, F, F, F, T, T],
            [T, F, T, F, F, T, T],
            [T, T, T, F, F, T, T],
            [T, T, T, T, T, T, T],
        ]
        .into_iter()
        .map(Self::from_flags)
        .collect()
    }
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub intra: f64,
    pub inter: f64,
    pub recon: f64,
    pub cycle: f64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub kl: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 9] = ["intra", "inter", "recon", "cycle", "adv_d", "adv_g", "kl", "ce", "total"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.intra,
            self.inter,
            self.recon,
            self.cycle,
            self.adv_d,
            self.adv_g,
            self.kl,
            self.ce,
            self.total,
        ]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        Self {
            intra: v[0],
            inter: v[1],
            recon: v[2],
            cycle: v[3],
            adv_d: v[4],
            adv_g: v[5],
            kl: v[6],
            ce: v[7],
            total: v[8],
        }
    }

    /// First non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::COLUMNS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, what: &str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn one_minus_cos_mean<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let c = g.row_cosine(a, b, T::lit(COSINE_EPS))?;
    let m = g.mean(c);
    let neg = g.scale(m, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

/// `mean(1 - cos(a_f, u_f)) + mean(1 - cos(b_f, q_f))`.
pub fn intra_instance_loss<T: Scalar>(g: &mut Graph<T>, a_f: Var, u_f: Var, b_f: Var, q_f: Var) -> Result<Var> {
    check_pair(g, "intra_instance_loss", a_f, u_f)?;
    check_pair(g, "intra_instance_loss", b_f, q_f)?;
    check_pair(g, "intra_instance_loss", a_f, b_f)?;
    let la = one_minus_cos_mean(g, a_f, u_f)?;
    let lb = one_minus_cos_mean(g, b_f, q_f)?;
    g.add(la, lb)
}

/// `mean |cos(a_f, b_f) - cos(u_f, q_f)|`.
pub fn inter_instance_loss<T: Scalar>(g: &mut Graph<T>, a_f: Var, b_f: Var, u_f: Var, q_f: Var) -> Result<Var> {
    check_pair(g, "inter_instance_loss", a_f, b_f)?;
    check_pair(g, "inter_instance_loss", u_f, q_f)?;
    check_pair(g, "inter_instance_loss", a_f, u_f)?;
    let eps = T::lit(COSINE_EPS);
    let before = g.row_cosine(a_f, b_f, eps)?;
    let after = g.row_cosine(u_f, q_f, eps)?;
    let d = g.sub(before, after)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

fn l1_mean<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let d = g.sub(x, y)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// `MAE(a, a_bar) + MAE(b, b_bar)` with mean reduction over all elements.
pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, a: Var, a_bar: Var, b: Var, b_bar: Var) -> Result<Var> {
    check_pair(g, "reconstruction_loss", a, a_bar)?;
    check_pair(g, "reconstruction_loss", b, b_bar)?;
    let la = l1_mean(g, a, a_bar)?;
    let lb = l1_mean(g, b, b_bar)?;
    g.add(la, lb)
}

/// `MAE(a, a') + MAE(b, b')` after the second reconstruction stage.
pub fn cycle_loss<T: Scalar>(g: &mut Graph<T>, a: Var, a_prime: Var, b: Var, b_prime: Var) -> Result<Var> {
    check_pair(g, "cycle_loss", a, a_prime)?;
    check_pair(g, "cycle_loss", b, b_prime)?;
    let la = l1_mean(g, a, a_prime)?;
    let lb = l1_mean(g, b, b_prime)?;
    g.add(la, lb)
}

fn clamped_logits<T: Scalar>(g: &mut Graph<T>, scores: Var) -> Result<Var> {
    if g.value(scores).is_empty() {
        return Err(Error::config("adversarial loss on an empty score array"));
    }
    let p = PROB_CLAMP;
    let bound = T::lit(((1.0 - p) / p).ln());
    Ok(g.clamp(scores, -bound, bound))
}

/// `-mean log s(real) - mean log(1 - s(fake))`, `s` the logistic map.
pub fn discriminator_loss<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let real = clamped_logits(g, real)?;
    let fake = clamped_logits(g, fake)?;
    let lr = g.log_sigmoid(real);
    let lr = g.mean(lr);
    // log(1 - s(x)) = log s(-x)
    let neg = g.scale(fake, -T::one());
    let lf = g.log_sigmoid(neg);
    let lf = g.mean(lf);
    let s = g.add(lr, lf)?;
    Ok(g.scale(s, -T::one()))
}

/// Non-saturating generator view: `-mean log s(fake)`.
pub fn generator_adversarial_loss<T: Scalar>(g: &mut Graph<T>, fake: Var) -> Result<Var> {
    let fake = clamped_logits(g, fake)?;
    let l = g.log_sigmoid(fake);
    let l = g.mean(l);
    Ok(g.scale(l, -T::one()))
}

/// Both players' adversarial losses: `(d_loss, g_loss)`.
pub fn adversarial_losses<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<(Var, Var)> {
    let d = discriminator_loss(g, real, fake)?;
    let gen = generator_adversarial_loss(g, fake)?;
    Ok((d, gen))
}

fn kl_stream<T: Scalar>(g: &mut Graph<T>, reference: Var, moving: Var) -> Result<Var> {
    let log_ref = g.log_softmax(reference)?;
    let log_ref = g.detach(log_ref);
    let p_ref = g.value(log_ref).map(|v| v.exp());
    let p_ref = g.constant(p_ref);
    let log_mov = g.log_softmax(moving)?;
    let diff = g.sub(log_ref, log_mov)?;
    let terms = g.mul(p_ref, diff)?;
    // mean over N*K entries == mean_i (1/K) sum_k
    Ok(g.mean(terms))
}

/// `mean_i (1/K) KL(p_a || p_u) + mean_i (1/K) KL(p_b || p_q)` from logits.
/// The originals' distributions are fixed references: no gradient reaches
/// `logits_a` or `logits_b`.
pub fn kl_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits_a: Var,
    logits_u: Var,
    logits_b: Var,
    logits_q: Var,
) -> Result<Var> {
    check_pair(g, "kl_loss", logits_a, logits_u)?;
    check_pair(g, "kl_loss", logits_b, logits_q)?;
    let la = kl_stream(g, logits_a, logits_u)?;
    let lb = kl_stream(g, logits_b, logits_q)?;
    g.add(la, lb)
}

/// Negative log-likelihood of `labels`, averaged over the batch.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = g.log_softmax(logits)?;
    let picked = g.gather(ls, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -T::one()))
}

/// Summed cross-entropy of the four streams; U carries A's label and Q
/// carries B's.
pub fn classification_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: [Var; 4],
    labels_a: &[usize],
    labels_b: &[usize],
) -> Result<Var> {
    let [a, b, u, q] = logits;
    let la = cross_entropy(g, a, labels_a)?;
    let lb = cross_entropy(g, b, labels_b)?;
    let lu = cross_entropy(g, u, labels_a)?;
    let lq = cross_entropy(g, q, labels_b)?;
    let s = g.add(la, lb)?;
    let s = g.add(s, lu)?;
    g.add(s, lq)
}

/// Weighted objective from component values; the adversarial term is the
/// generator view.
pub fn total_loss(report: &LossReport, weights: &LossWeights) -> Result<f64> {
    let parts = [
        ("intra", report.intra, weights.intra),
        ("inter", report.inter, weights.inter),
        ("recon", report.recon, weights.recon),
        ("cycle", report.cycle, weights.cycle),
        ("adv_g", report.adv_g, weights.adv),
        ("kl", report.kl, weights.kl),
        ("ce", report.ce, weights.ce),
    ];
    let mut total = 0.0;
    for (name, v, w) in parts {
        if v.is_nan() {
            return Err(Error::Numerical(format!("loss component {name} is NaN")));
        }
        if w != 0.0 {
            total += w * v;
        }
    }
    Ok(total)
}

/// Graph version of [`total_loss`] over whichever components are present.
/// Zero-weighted terms are left out of the graph entirely.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, T::lit(w));
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> Var {
        g.param(Tensor::from_f64(shape, data).unwrap())
    }

    #[test]
    fn report_total_rejects_nan() {
        let r = LossReport {
            kl: f64::NAN,
            ..Default::default()
        };
        let err = total_loss(&r, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("kl"));
    }

    #[test]
    fn kl_has_no_gradient_through_reference() {
        let mut g = Graph::new();
        let a = rows(&mut g, &[1, 3], &[0.1, 0.5, -0.2]);
        let u = rows(&mut g, &[1, 3], &[0.3, -0.1, 0.9]);
        let l = kl_loss(&mut g, a, u, a, u).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(u).is_some());
    }

    #[test]
    fn label_out_of_range_is_config_error() {
        let mut g = Graph::new();
        let x = rows(&mut g, &[1, 2], &[0.0, 0.0]);
        assert!(matches!(cross_entropy(&mut g, x, &[2]), Err(Error::Config(_))));
    }

    #[test]
    fn empty_scores_are_config_error() {
        let mut g = Graph::<f64>::new();
        let e = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(discriminator_loss(&mut g, e, e), Err(Error::Config(_))));
    }

    #[test]
    fn weighted_sum_skips_zero_weights() {
        let mut g = Graph::new();
        let a = rows(&mut g, &[], &[2.0]);
        let b = rows(&mut g, &[], &[3.0]);
        let t = weighted_sum(&mut g, &[(a, 0.0), (b, 2.0)]).unwrap();
        assert_eq!(g.value(t).item(), 6.0);
        let grads = g.backward(t).unwrap();
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn reference_grid_keeps_ce() {
        let grid = LossMask::reference_grid();
        assert_eq!(grid.len(), 9);
        assert!(grid.iter().all(|m| m.ce));
        assert_eq!(grid[0], LossMask::ce_only());
        assert_eq!(grid[8], LossMask::all());
    }
}
