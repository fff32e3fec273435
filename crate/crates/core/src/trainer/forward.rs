//! The two-stage cyclic reconstruction graph and the composite objective.
//!
//! Streams that share a network are batched into a single pass: `[A; B]`
//! through S and E, `[A; B; A; B]` semantics under `[A; B; B; A]` styles
//! through G for Ā, B̄, U, Q, and so on. Every layer acts per sample, so
//! batching does not change any per-row value.

use crate::autodiff::{Graph, Var};
use crate::data::PairBatch;
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::networks::{Bound, Model, Networks, StyleVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Graph handles of every intermediate of one two-stage pass.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub a: Var,
    pub b: Var,
    pub a_v: StyleVars,
    pub b_v: StyleVars,
    pub a_s: Var,
    pub b_s: Var,
    pub a_f: Var,
    pub b_f: Var,
    pub a_bar: Option<Var>,
    pub b_bar: Option<Var>,
    pub u: Var,
    pub q: Var,
    pub u_v: Option<StyleVars>,
    pub q_v: Option<StyleVars>,
    pub u_s: Var,
    pub q_s: Var,
    pub u_f: Var,
    pub q_f: Var,
    pub a_prime: Option<Var>,
    pub b_prime: Option<Var>,
    pub logits_a: Var,
    pub logits_b: Var,
    pub logits_u: Var,
    pub logits_q: Var,
}

fn split<T: Scalar>(g: &mut Graph<T>, x: Var, parts: usize) -> Result<Vec<Var>> {
    let n = g.shape(x)[0] / parts;
    (0..parts).map(|i| g.narrow(x, 0, i * n, n)).collect()
}

fn split_style<T: Scalar>(g: &mut Graph<T>, s: StyleVars, parts: usize) -> Result<Vec<StyleVars>> {
    let m = split(g, s.mean, parts)?;
    let d = split(g, s.std, parts)?;
    Ok(m.into_iter().zip(d).map(|(mean, std)| StyleVars { mean, std }).collect())
}

fn cat_style<T: Scalar>(g: &mut Graph<T>, parts: &[StyleVars]) -> Result<StyleVars> {
    let means: Vec<Var> = parts.iter().map(|s| s.mean).collect();
    let stds: Vec<Var> = parts.iter().map(|s| s.std).collect();
    Ok(StyleVars {
        mean: g.concat_batch(&means)?,
        std: g.concat_batch(&stds)?,
    })
}

/// Which optional branches of the pipeline to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plan {
    /// Self-reconstructions Ā and B̄.
    pub self_recon: bool,
    /// Styles of U and Q and the second-stage images A', B'.
    pub second_stage: bool,
}

impl Plan {
    pub fn full() -> Self {
        Self {
            self_recon: true,
            second_stage: true,
        }
    }

    /// Only what terms with non-zero weight depend on.
    pub fn for_weights(w: &LossWeights) -> Self {
        Self {
            self_recon: w.recon != 0.0,
            second_stage: w.cycle != 0.0,
        }
    }
}

/// Disentangle A and B, cross-reconstruct, re-disentangle U and Q and
/// reconstruct A' = G(U^s, Q^v), B' = G(Q^s, U^v).
pub fn build_two_stage<T: Scalar>(g: &mut Graph<T>, nets: &Networks, p: &Bound, a: Var, b: Var) -> Result<StageVars> {
    build_stages(g, nets, p, a, b, Plan::full())
}

/// [`build_two_stage`] restricted to the branches `plan` asks for.
pub fn build_stages<T: Scalar>(g: &mut Graph<T>, nets: &Networks, p: &Bound, a: Var, b: Var, plan: Plan) -> Result<StageVars> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(format!(
            "pair images differ in shape: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let ab = g.concat_batch(&[a, b])?;
    let styles = nets.extract_style(g, p, ab)?;
    let [a_v, b_v]: [StyleVars; 2] = split_style(g, styles, 2)?.try_into().unwrap();
    let (sem, feat) = nets.encode(g, p, ab)?;
    let [a_s, b_s]: [Var; 2] = split(g, sem, 2)?.try_into().unwrap();
    let [a_f, b_f]: [Var; 2] = split(g, feat, 2)?.try_into().unwrap();

    let n = g.shape(a)[0];
    // Ā, B̄, U, Q in one generator pass
    let (a_bar, b_bar, uq) = if plan.self_recon {
        let sem4 = g.concat_batch(&[a_s, b_s, a_s, b_s])?;
        let sty4 = cat_style(g, &[a_v, b_v, b_v, a_v])?;
        let gen1 = nets.generate(g, p, sem4, sty4)?;
        let a_bar = g.narrow(gen1, 0, 0, n)?;
        let b_bar = g.narrow(gen1, 0, n, n)?;
        (Some(a_bar), Some(b_bar), g.narrow(gen1, 0, 2 * n, 2 * n)?)
    } else {
        let sem2 = g.concat_batch(&[a_s, b_s])?;
        let sty2 = cat_style(g, &[b_v, a_v])?;
        (None, None, nets.generate(g, p, sem2, sty2)?)
    };
    let [u, q]: [Var; 2] = split(g, uq, 2)?.try_into().unwrap();

    let (sem2, feat2) = nets.encode(g, p, uq)?;
    let [u_s, q_s]: [Var; 2] = split(g, sem2, 2)?.try_into().unwrap();
    let [u_f, q_f]: [Var; 2] = split(g, feat2, 2)?.try_into().unwrap();

    let (u_v, q_v, a_prime, b_prime) = if plan.second_stage {
        let styles2 = nets.extract_style(g, p, uq)?;
        let [u_v, q_v]: [StyleVars; 2] = split_style(g, styles2, 2)?.try_into().unwrap();
        let sty2 = cat_style(g, &[q_v, u_v])?;
        let gen2 = nets.generate(g, p, sem2, sty2)?;
        let [a_prime, b_prime]: [Var; 2] = split(g, gen2, 2)?.try_into().unwrap();
        (Some(u_v), Some(q_v), Some(a_prime), Some(b_prime))
    } else {
        (None, None, None, None)
    };

    let all_f = g.concat_batch(&[feat, feat2])?;
    let logits = nets.classify(g, p, all_f)?;
    let [logits_a, logits_b, logits_u, logits_q]: [Var; 4] = split(g, logits, 4)?.try_into().unwrap();

    Ok(StageVars {
        a,
        b,
        a_v,
        b_v,
        a_s,
        b_s,
        a_f,
        b_f,
        a_bar,
        b_bar,
        u,
        q,
        u_v,
        q_v,
        u_s,
        q_s,
        u_f,
        q_f,
        a_prime,
        b_prime,
        logits_a,
        logits_b,
        logits_u,
        logits_q,
    })
}

/// Loss nodes of the main (non-discriminator) objective. Terms whose branch
/// was not built read as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub intra: Var,
    pub inter: Var,
    pub recon: Var,
    pub cycle: Var,
    pub adv_g: Var,
    pub kl: Var,
    pub ce: Var,
    pub total: Var,
}

/// All seven terms and their weighted sum. `p` must bind D as well; the
/// adversarial term is the generator view on `{U^f, Q^f}`.
pub fn build_objective<T: Scalar>(
    g: &mut Graph<T>,
    nets: &Networks,
    p: &Bound,
    s: &StageVars,
    labels_a: &[usize],
    labels_b: &[usize],
    weights: &LossWeights,
) -> Result<LossVars> {
    let intra = losses::intra_instance_loss(g, s.a_f, s.u_f, s.b_f, s.q_f)?;
    let inter = losses::inter_instance_loss(g, s.a_f, s.b_f, s.u_f, s.q_f)?;
    let recon = match (s.a_bar, s.b_bar) {
        (Some(a_bar), Some(b_bar)) => Some(losses::reconstruction_loss(g, s.a, a_bar, s.b, b_bar)?),
        _ if weights.recon != 0.0 => return Err(Error::config("recon weight is set but the graph has no self-reconstructions")),
        _ => None,
    };
    let cycle = match (s.a_prime, s.b_prime) {
        (Some(a_prime), Some(b_prime)) => Some(losses::cycle_loss(g, s.a, a_prime, s.b, b_prime)?),
        _ if weights.cycle != 0.0 => return Err(Error::config("cycle weight is set but the graph has no second stage")),
        _ => None,
    };
    let zero = g.constant(Tensor::scalar(T::zero()));
    let fake = g.concat_batch(&[s.u_f, s.q_f])?;
    let fake_scores = nets.discriminate(g, p, fake)?;
    let adv_g = losses::generator_adversarial_loss(g, fake_scores)?;
    let kl = losses::kl_loss(g, s.logits_a, s.logits_u, s.logits_b, s.logits_q)?;
    let ce = losses::classification_loss(g, [s.logits_a, s.logits_b, s.logits_u, s.logits_q], labels_a, labels_b)?;
    let total = losses::weighted_sum(
        g,
        &[
            (intra, weights.intra),
            (inter, weights.inter),
            (recon.unwrap_or(zero), weights.recon),
            (cycle.unwrap_or(zero), weights.cycle),
            (adv_g, weights.adv),
            (kl, weights.kl),
            (ce, weights.ce),
        ],
    )?;
    Ok(LossVars {
        intra,
        inter,
        recon: recon.unwrap_or(zero),
        cycle: cycle.unwrap_or(zero),
        adv_g,
        kl,
        ce,
        total,
    })
}

/// Every intermediate of the two-stage pipeline as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageArtifacts<T> {
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
    pub u: Tensor<T>,
    pub q: Tensor<T>,
    pub a_prime: Tensor<T>,
    pub b_prime: Tensor<T>,
    pub a_style: (Tensor<T>, Tensor<T>),
    pub b_style: (Tensor<T>, Tensor<T>),
    pub u_style: (Tensor<T>, Tensor<T>),
    pub q_style: (Tensor<T>, Tensor<T>),
    pub a_s: Tensor<T>,
    pub b_s: Tensor<T>,
    pub u_s: Tensor<T>,
    pub q_s: Tensor<T>,
    pub a_f: Tensor<T>,
    pub b_f: Tensor<T>,
    pub u_f: Tensor<T>,
    pub q_f: Tensor<T>,
    pub logits_a: Tensor<T>,
    pub logits_b: Tensor<T>,
    pub logits_u: Tensor<T>,
    pub logits_q: Tensor<T>,
}

impl StageVars {
    /// Named handles in pipeline order, for diagnostics.
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        let opt = |name: &'static str, v: Option<Var>| v.map(|v| (name, v));
        let mut out = vec![
            ("A^v.mean", self.a_v.mean),
            ("A^v.std", self.a_v.std),
            ("B^v.mean", self.b_v.mean),
            ("B^v.std", self.b_v.std),
            ("A^s", self.a_s),
            ("B^s", self.b_s),
            ("A^f", self.a_f),
            ("B^f", self.b_f),
            ("U", self.u),
            ("Q", self.q),
            ("U^s", self.u_s),
            ("Q^s", self.q_s),
            ("U^f", self.u_f),
            ("Q^f", self.q_f),
            ("A^p", self.logits_a),
            ("B^p", self.logits_b),
            ("U^p", self.logits_u),
            ("Q^p", self.logits_q),
        ];
        out.extend(
            [
                opt("A_bar", self.a_bar),
                opt("B_bar", self.b_bar),
                opt("U^v.mean", self.u_v.map(|s| s.mean)),
                opt("U^v.std", self.u_v.map(|s| s.std)),
                opt("Q^v.mean", self.q_v.map(|s| s.mean)),
                opt("Q^v.std", self.q_v.map(|s| s.std)),
                opt("A'", self.a_prime),
                opt("B'", self.b_prime),
            ]
            .into_iter()
            .flatten(),
        );
        out
    }

    /// Name of the first artifact holding a non-finite value.
    pub fn first_non_finite<T: Scalar>(&self, g: &Graph<T>) -> Option<&'static str> {
        self.named()
            .into_iter()
            .find(|(_, v)| !g.value(*v).all_finite())
            .map(|(n, _)| n)
    }

    /// Plain-tensor copies of every artifact. Fails if a branch was pruned.
    pub fn artifacts<T: Scalar>(&self, g: &Graph<T>) -> Result<TwoStageArtifacts<T>> {
        let missing = || Error::config("artifacts requested from a pruned pipeline");
        let (a_bar, b_bar) = self.a_bar.zip(self.b_bar).ok_or_else(missing)?;
        let (a_prime, b_prime) = self.a_prime.zip(self.b_prime).ok_or_else(missing)?;
        let (u_v, q_v) = self.u_v.zip(self.q_v).ok_or_else(missing)?;
        let v = |x: Var| g.value(x).clone();
        let st = |s: StyleVars| (g.value(s.mean).clone(), g.value(s.std).clone());
        Ok(TwoStageArtifacts {
            a_bar: v(a_bar),
            b_bar: v(b_bar),
            u: v(self.u),
            q: v(self.q),
            a_prime: v(a_prime),
            b_prime: v(b_prime),
            a_style: st(self.a_v),
            b_style: st(self.b_v),
            u_style: st(u_v),
            q_style: st(q_v),
            a_s: v(self.a_s),
            b_s: v(self.b_s),
            u_s: v(self.u_s),
            q_s: v(self.q_s),
            a_f: v(self.a_f),
            b_f: v(self.b_f),
            u_f: v(self.u_f),
            q_f: v(self.q_f),
            logits_a: v(self.logits_a),
            logits_b: v(self.logits_b),
            logits_u: v(self.logits_u),
            logits_q: v(self.logits_q),
        })
    }
}

/// Evaluation-mode two-stage pass over a pair batch.
pub fn forward_two_stage<T: Scalar>(model: &Model<T>, batch: &PairBatch<T>) -> Result<TwoStageArtifacts<T>> {
    let mut g = Graph::inference();
    let p = model.params.bind(&mut g);
    let a = g.constant(batch.images_a.clone());
    let b = g.constant(batch.images_b.clone());
    let s = build_two_stage(&mut g, &model.networks, &p, a, b)?;
    if let Some(name) = s.first_non_finite(&g) {
        return Err(Error::Numerical(format!("non-finite values in artifact {name}")));
    }
    s.artifacts(&g)
}

/// Both stages over caller-supplied E, S and G, one sample pair at a time:
/// `[U, Q, A', B']` with U = G(A^s, B^v), Q = G(B^s, A^v),
/// A' = G(U^s, Q^v), B' = G(Q^s, U^v).
pub fn compose_cycle<X, Sem, Sty>(
    a: &X,
    b: &X,
    encode: impl Fn(&X) -> Sem,
    style: impl Fn(&X) -> Sty,
    generate: impl Fn(&Sem, &Sty) -> X,
) -> [X; 4] {
    let (a_s, b_s) = (encode(a), encode(b));
    let (a_v, b_v) = (style(a), style(b));
    let u = generate(&a_s, &b_v);
    let q = generate(&b_s, &a_v);
    let (u_s, q_s) = (encode(&u), encode(&q));
    let (u_v, q_v) = (style(&u), style(&q));
    let a_prime = generate(&u_s, &q_v);
    let b_prime = generate(&q_s, &u_v);
    [u, q, a_prime, b_prime]
}
