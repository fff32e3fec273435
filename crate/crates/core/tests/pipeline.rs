mod common;

use common::{identity_check, pair_batch, random_tensor, tiny_model};
use dsdr_core::losses::LossWeights;
use dsdr_core::networks::{Component, Model};
use dsdr_core::trainer::{build_objective, build_stages, compose_cycle, forward_two_stage, Plan};
use dsdr_core::{Error, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn identical_pair_gives_self_reconstructions() {
    for seed in 0..3 {
        let (du, dq, inter) = identity_check(seed);
        assert_eq!(du, 0.0);
        assert_eq!(dq, 0.0);
        assert_eq!(inter, 0.0);
    }
}

#[test]
fn artifact_shapes() {
    let model = tiny_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, &[3, 3, 8, 8], 0.0, 1.0);
    let b = random_tensor(&mut rng, &[3, 3, 8, 8], 0.0, 1.0);
    let art = forward_two_stage(&model, &pair_batch(a, b, vec![0, 1, 2], vec![2, 1, 0])).unwrap();
    for img in [&art.a_bar, &art.b_bar, &art.u, &art.q, &art.a_prime, &art.b_prime] {
        assert_eq!(img.shape(), &[3, 3, 8, 8]);
    }
    let cfg = model.networks.config();
    let [cs, hs, ws] = cfg.semantic_shape();
    for s in [&art.a_s, &art.b_s, &art.u_s, &art.q_s] {
        assert_eq!(s.shape(), &[3, cs, hs, ws]);
    }
    for (m, sd) in [&art.a_style, &art.b_style, &art.u_style, &art.q_style] {
        assert_eq!(m.shape(), &[3, cfg.style_dim()]);
        assert_eq!(sd.shape(), &[3, cfg.style_dim()]);
    }
    for f in [&art.a_f, &art.b_f, &art.u_f, &art.q_f] {
        assert_eq!(f.shape(), &[3, cfg.feature_dim]);
    }
    for l in [&art.logits_a, &art.logits_b, &art.logits_u, &art.logits_q] {
        assert_eq!(l.shape(), &[3, cfg.num_classes]);
    }
}

/// Integer unimodular maps: G(s, v) = M [s; v] and E, S read the two blocks
/// of M^-1 x, all exact in floating point.
#[test]
fn exact_inverse_stubs_close_the_cycle() {
    let m = [[1.0, 2.0, 0.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]];
    let m_inv = [[1.0, -2.0, 2.0], [0.0, 1.0, -1.0], [0.0, 0.0, 1.0]];
    let apply = |mat: &[[f64; 3]; 3], x: &[f64; 3]| -> [f64; 3] {
        let mut y = [0.0; 3];
        for i in 0..3 {
            y[i] = (0..3).map(|j| mat[i][j] * x[j]).sum();
        }
        y
    };
    let encode = |x: &[f64; 3]| {
        let z = apply(&m_inv, x);
        [z[0], z[1]]
    };
    let style = |x: &[f64; 3]| apply(&m_inv, x)[2];
    let generate = |s: &[f64; 2], v: &f64| apply(&m, &[s[0], s[1], *v]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        use rand::Rng;
        let a: [f64; 3] = [rng.gen_range(-9..9) as f64, rng.gen_range(-9..9) as f64, rng.gen_range(-9..9) as f64];
        let b: [f64; 3] = [rng.gen_range(-9..9) as f64, rng.gen_range(-9..9) as f64, rng.gen_range(-9..9) as f64];
        let [u, q, a_prime, b_prime] = compose_cycle(&a, &b, encode, style, generate);
        assert_eq!(a_prime, a);
        assert_eq!(b_prime, b);
        assert_eq!(encode(&u), encode(&a));
        assert_eq!(style(&q), style(&a));
    }
}

#[test]
fn batched_graph_matches_reference_composition() {
    let model = tiny_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let b = random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let art = forward_two_stage(&model, &pair_batch(a.clone(), b.clone(), vec![0, 1], vec![1, 2])).unwrap();
    let m: &Model<f64> = &model;
    let [u, q, a_prime, b_prime] = compose_cycle(
        &a,
        &b,
        |x| m.encode(x).unwrap().0,
        |x| m.extract_style(x).unwrap(),
        |s, v| m.generate(s, v).unwrap(),
    );
    assert!(u.max_abs_diff(&art.u) < 1e-12);
    assert!(q.max_abs_diff(&art.q) < 1e-12);
    assert!(a_prime.max_abs_diff(&art.a_prime) < 1e-12);
    assert!(b_prime.max_abs_diff(&art.b_prime) < 1e-12);
}

#[test]
fn pruned_plan_keeps_shared_values() {
    let model = tiny_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let b = random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let run = |plan: Plan| {
        let mut g = Graph::inference();
        let p = model.params.bind(&mut g);
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let s = build_stages(&mut g, &model.networks, &p, va, vb, plan).unwrap();
        let weights = LossWeights { recon: 0.0, cycle: 0.0, ..LossWeights::default() };
        let lv = build_objective(&mut g, &model.networks, &p, &s, &[0, 1], &[1, 0], &weights).unwrap();
        let v = |x| g.value(x).clone();
        (v(s.u), v(s.q), v(s.u_f), v(s.logits_q), g.value(lv.ce).item(), s.a_bar.is_some(), s.a_prime.is_some())
    };
    let full = run(Plan::full());
    let lean = run(Plan::for_weights(&LossWeights { recon: 0.0, cycle: 0.0, ..LossWeights::default() }));
    assert!(full.5 && full.6);
    assert!(!lean.5 && !lean.6);
    assert!(full.0.max_abs_diff(&lean.0) < 1e-12);
    assert!(full.1.max_abs_diff(&lean.1) < 1e-12);
    assert!(full.2.max_abs_diff(&lean.2) < 1e-12);
    assert!(full.3.max_abs_diff(&lean.3) < 1e-12);
    assert!((full.4 - lean.4).abs() < 1e-12);
}

#[test]
fn missing_branch_with_weight_is_config_error() {
    let model = tiny_model(0);
    let mut g = Graph::inference();
    let p = model.params.bind(&mut g);
    let x = g.constant(Tensor::full(&[1, 3, 8, 8], 0.3));
    let y = g.constant(Tensor::full(&[1, 3, 8, 8], 0.6));
    let plan = Plan { self_recon: false, second_stage: true };
    let s = build_stages(&mut g, &model.networks, &p, x, y, plan).unwrap();
    let res = build_objective(&mut g, &model.networks, &p, &s, &[0], &[1], &LossWeights::default());
    assert!(matches!(res, Err(Error::Config(_))));
    assert!(s.artifacts(&g).is_err());
}

#[test]
fn non_finite_parameters_name_first_artifact() {
    let mut model = tiny_model(1);
    for e in model.params.entries_mut() {
        if e.component == Component::Encoder {
            e.value.data_mut()[0] = f64::NAN;
            break;
        }
    }
    let a = Tensor::full(&[1, 3, 8, 8], 0.4);
    let b = Tensor::full(&[1, 3, 8, 8], 0.7);
    match forward_two_stage(&model, &pair_batch(a, b, vec![0], vec![1])) {
        Err(Error::Numerical(m)) => assert!(m.contains("A^s"), "{m}"),
        other => panic!("expected numerical error, got {other:?}"),
    }
}
