#![allow(dead_code)]

use dsdr_core::autodiff::check::{check_gradients, GradCheck};
use dsdr_core::data::{synthesize_domains, Dataset, DomainShiftSpec, PairBatch};
use dsdr_core::losses::{self, LossReport, LossWeights};
use dsdr_core::networks::{adain, channel_stats, Bound, Component, Model, NetworkConfig, Networks, StyleCode};
use dsdr_core::trainer::{build_objective, build_two_stage, forward_two_stage, TrainConfig, TrainState};
use dsdr_core::{Graph, Graph64, Result, Tensor, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn t(shape: &[usize], data: &[f64]) -> Tensor64 {
    Tensor::from_f64(shape, data).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor64 {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    t(shape, &v)
}

/// Value of a scalar graph over constant inputs.
pub fn value_of(inputs: &[Tensor64], f: impl Fn(&mut Graph64, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let root = f(&mut g, &vars).unwrap();
    g.value(root).item()
}

/// Small topology that keeps f64 finite-difference checks fast.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        image_shape: [3, 8, 8],
        encoder_widths: vec![3, 4],
        encoder_strides: vec![2, 1],
        feature_dim: 5,
        style_widths: vec![3],
        decoder_widths: vec![3, 2],
        discriminator_hidden: 4,
        num_classes: 3,
        ..NetworkConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> Model<f64> {
    let nets = Networks::new(tiny_config()).unwrap();
    let params = nets.init_parameters(seed);
    Model::new(nets, params).unwrap()
}

pub fn pair_batch<T: dsdr_core::Scalar>(a: Tensor<T>, b: Tensor<T>, labels_a: Vec<usize>, labels_b: Vec<usize>) -> PairBatch<T> {
    let n = labels_a.len();
    PairBatch {
        images_a: a,
        images_b: b,
        labels_a,
        labels_b,
        domains_a: vec![0; n],
        domains_b: vec![1; n],
    }
}

pub fn small_synthetic(domains: usize, per_domain: usize, classes: usize) -> Dataset {
    synthesize_domains(&DomainShiftSpec::standard(domains, 7), classes, per_domain).unwrap()
}

pub fn quick_train_config(seed: u64, steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        steps,
        seed,
        log_interval: 2,
        ..TrainConfig::default()
    }
}

/// `(name, computed, expected)` for every hand-derived loss value.
pub fn loss_oracles() -> Vec<(&'static str, f64, f64)> {
    let ln = f64::ln;
    let mut out = Vec::new();
    let intra = |v: [&[f64]; 4]| {
        let ins: Vec<Tensor64> = v.iter().map(|x| t(&[1, x.len()], x)).collect();
        value_of(&ins, |g, x| losses::intra_instance_loss(g, x[0], x[1], x[2], x[3]))
    };
    out.push(("intra orthogonal + antiparallel", intra([&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[-1.0, 0.0]]), 3.0));
    out.push((
        "intra 45 degrees",
        intra([&[1.0, 1.0], &[1.0, 0.0], &[0.3, 0.7], &[0.3, 0.7]]),
        1.0 - 1.0 / 2f64.sqrt(),
    ));
    let inter = |v: [&[f64]; 4]| {
        let ins: Vec<Tensor64> = v.iter().map(|x| t(&[1, x.len()], x)).collect();
        value_of(&ins, |g, x| losses::inter_instance_loss(g, x[0], x[1], x[2], x[3]))
    };
    out.push(("inter scale invariant", inter([&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[2.0, 0.0]]), 1.0));
    out.push(("inter extreme", inter([&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0]]), 2.0));
    let img = [2, 3, 4, 4];
    let b = t(&img, &(0..96).map(|i| (i % 7) as f64 / 7.0).collect::<Vec<_>>());
    let recon = value_of(
        &[Tensor::full(&img, 1.0), Tensor::zeros(&img), b.clone(), b.clone()],
        |g, x| losses::reconstruction_loss(g, x[0], x[1], x[2], x[3]),
    );
    out.push(("recon ones vs zeros", recon, 1.0));
    let cycle = value_of(
        &[Tensor::full(&img, 0.5), Tensor::full(&img, 0.25), b.clone(), b],
        |g, x| losses::cycle_loss(g, x[0], x[1], x[2], x[3]),
    );
    out.push(("cycle half vs quarter", cycle, 0.25));
    let adv = |real: f64, fake: f64| {
        let ins = [t(&[1], &[real]), t(&[1], &[fake])];
        (
            value_of(&ins, |g, x| losses::discriminator_loss(g, x[0], x[1])),
            value_of(&ins, |g, x| losses::generator_adversarial_loss(g, x[1])),
        )
    };
    let (d0, g0) = adv(0.0, 0.0);
    out.push(("adversarial d at zero scores", d0, 2.0 * ln(2.0)));
    out.push(("adversarial g at zero scores", g0, ln(2.0)));
    let (d1, g1) = adv(0.0, ln(9.0));
    out.push(("adversarial d with fake at p=0.9", d1, ln(2.0) - ln(0.1)));
    out.push(("adversarial g with fake at p=0.9", g1, -ln(0.9)));
    let kl = value_of(
        &[
            t(&[1, 2], &[0.0, 0.0]),
            t(&[1, 2], &[ln(0.25), ln(0.75)]),
            t(&[1, 2], &[0.4, -1.0]),
            t(&[1, 2], &[0.4, -1.0]),
        ],
        |g, x| losses::kl_loss(g, x[0], x[1], x[2], x[3]),
    );
    out.push(("kl two classes", kl, 0.5 * (0.5 * ln(2.0) + 0.5 * ln(2.0 / 3.0))));
    let z = Tensor::zeros(&[3, 10]);
    let labels_a = [1, 4, 9];
    let labels_b = [0, 0, 7];
    let ce = value_of(&[z.clone(), z.clone(), z.clone(), z], |g, x| {
        losses::classification_loss(g, [x[0], x[1], x[2], x[3]], &labels_a, &labels_b)
    });
    out.push(("ce uniform over ten classes", ce, 4.0 * ln(10.0)));
    let total = losses::total_loss(&LossReport::from_values([1.0; 9]), &LossWeights::default()).unwrap();
    out.push(("total with default weights", total, 13.5));
    out
}

/// Largest relative gradient error per check over `instances` random draws.
/// Errors name the failing check.
pub fn gradient_suite(instances: usize, seed: u64) -> std::result::Result<Vec<(&'static str, f64)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheck::default();
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, r: Result<dsdr_core::autodiff::check::GradCheckReport>| -> std::result::Result<(), String> {
        let e = r.map_err(|e| format!("{name}: {e}"))?.max_relative_error();
        match worst.iter_mut().find(|w| w.0 == name) {
            Some(w) => w.1 = w.1.max(e),
            None => worst.push((name, e)),
        }
        Ok(())
    };
    for _ in 0..instances {
        let n = rng.gen_range(1..4);
        let f = rng.gen_range(2..6);
        let feats: Vec<Tensor64> = (0..4).map(|_| random_tensor(&mut rng, &[n, f], -1.0, 1.0)).collect();
        record(
            "intra",
            check_gradients(&feats, cfg, |g, x| losses::intra_instance_loss(g, x[0], x[1], x[2], x[3])),
        )?;
        record(
            "inter",
            check_gradients(&feats, cfg, |g, x| losses::inter_instance_loss(g, x[0], x[1], x[2], x[3])),
        )?;
        let shape = [n, 2, 3, 3];
        let imgs: Vec<Tensor64> = (0..4).map(|_| random_tensor(&mut rng, &shape, 0.0, 1.0)).collect();
        record(
            "recon",
            check_gradients(&imgs, cfg, |g, x| losses::reconstruction_loss(g, x[0], x[1], x[2], x[3])),
        )?;
        record("cycle", check_gradients(&imgs, cfg, |g, x| losses::cycle_loss(g, x[0], x[1], x[2], x[3])))?;
        let scores = vec![random_tensor(&mut rng, &[2 * n], -3.0, 3.0), random_tensor(&mut rng, &[2 * n], -3.0, 3.0)];
        record("adv_d", check_gradients(&scores, cfg, |g, x| losses::discriminator_loss(g, x[0], x[1])))?;
        record("adv_g", check_gradients(&scores[1..], cfg, |g, x| losses::generator_adversarial_loss(g, x[0])))?;
        let k = rng.gen_range(2..6);
        let refs = [random_tensor(&mut rng, &[n, k], -2.0, 2.0), random_tensor(&mut rng, &[n, k], -2.0, 2.0)];
        let moving = vec![random_tensor(&mut rng, &[n, k], -2.0, 2.0), random_tensor(&mut rng, &[n, k], -2.0, 2.0)];
        record(
            "kl",
            check_gradients(&moving, cfg, |g, x| {
                let a = g.constant(refs[0].clone());
                let b = g.constant(refs[1].clone());
                losses::kl_loss(g, a, x[0], b, x[1])
            }),
        )?;
        let logits: Vec<Tensor64> = (0..4).map(|_| random_tensor(&mut rng, &[n, k], -2.0, 2.0)).collect();
        let la: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let lb: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        record(
            "ce",
            check_gradients(&logits, cfg, |g, x| losses::classification_loss(g, [x[0], x[1], x[2], x[3]], &la, &lb)),
        )?;
        record("two-stage composite", composite_check(&mut rng, cfg))?;
    }
    Ok(worst)
}

/// Gradient of the full weighted objective through both stages with respect
/// to every parameter of E, S, G, D and C and to both input images.
fn composite_check(rng: &mut ChaCha8Rng, cfg: GradCheck) -> Result<dsdr_core::autodiff::check::GradCheckReport> {
    let model = tiny_model(rng.gen());
    let nets = model.networks.clone();
    let [c, h, w] = nets.config().image_shape;
    let n = 2;
    let mut inputs: Vec<Tensor64> = model.params.tensors().cloned().collect();
    let np = inputs.len();
    inputs.push(random_tensor(rng, &[n, c, h, w], 0.05, 0.95));
    inputs.push(random_tensor(rng, &[n, c, h, w], 0.05, 0.95));
    let k = nets.config().num_classes;
    let la: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let lb: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    // The KL reference distributions carry no gradient, so the numeric side
    // must see them frozen at the base point as well.
    let frozen = {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let p = Bound::from_vars(vars[..np].to_vec());
        let s = build_two_stage(&mut g, &nets, &p, vars[np], vars[np + 1])?;
        (g.value(s.logits_a).clone(), g.value(s.logits_b).clone())
    };
    let full = LossWeights::default();
    let weights = LossWeights { kl: 0.0, ..full };
    check_gradients(&inputs, cfg, |g, x| {
        let p = Bound::from_vars(x[..np].to_vec());
        let s = build_two_stage(g, &nets, &p, x[np], x[np + 1])?;
        let rest = build_objective(g, &nets, &p, &s, &la, &lb, &weights)?.total;
        let ra = g.constant(frozen.0.clone());
        let rb = g.constant(frozen.1.clone());
        let kl = losses::kl_loss(g, ra, s.logits_u, rb, s.logits_q)?;
        let kl = g.scale(kl, full.kl);
        g.add(rest, kl)
    })
}

/// Largest deviations for the four AdaIN properties over random maps:
/// `[moment matching, identity, composition, constant channel]`.
pub fn adain_suite(trials: usize, seed: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut worst = [0.0f64; 4];
    let style = |rng: &mut ChaCha8Rng, n: usize, c: usize| StyleCode {
        mean: random_tensor(rng, &[n, c], -2.0, 2.0),
        std: random_tensor(rng, &[n, c], 0.2, 3.0),
    };
    for _ in 0..trials {
        let (n, c) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let x = random_tensor(&mut rng, &[n, c, h, w], -3.0, 3.0);
        let y = style(&mut rng, n, c);
        let out = adain(&x, &y, eps).unwrap();
        let st = channel_stats(&out, 0.0).unwrap();
        worst[0] = worst[0]
            .max(st.mean.max_abs_diff(&y.mean))
            .max(st.std.max_abs_diff(&y.std));
        let own = channel_stats(&x, 0.0).unwrap();
        worst[1] = worst[1].max(adain(&x, &own, eps).unwrap().max_abs_diff(&x));
        let z = style(&mut rng, n, c);
        let twice = adain(&out, &z, eps).unwrap();
        worst[2] = worst[2].max(twice.max_abs_diff(&adain(&x, &z, eps).unwrap()));
        let konst = Tensor::full(&[n, c, h, w], rng.gen_range(-2.0..2.0));
        let flat = adain(&konst, &y, eps).unwrap();
        for (i, v) in flat.data().iter().enumerate() {
            let m = y.mean.data()[i / (h * w)];
            worst[3] = worst[3].max((v - m).abs());
        }
        if !flat.all_finite() {
            worst[3] = f64::INFINITY;
        }
    }
    worst
}

/// With A == B in evaluation mode: `(max |U - Ā|, max |Q - B̄|, inter loss)`.
pub fn identity_check(seed: u64) -> (f64, f64, f64) {
    let model = tiny_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = model.networks.config().image_shape;
    let a = random_tensor(&mut rng, &[3, c, h, w], 0.0, 1.0);
    let batch = pair_batch(a.clone(), a, vec![0, 1, 2], vec![0, 1, 2]);
    let art = forward_two_stage(&model, &batch).unwrap();
    let inter = value_of(&[art.a_f.clone(), art.b_f.clone(), art.u_f.clone(), art.q_f.clone()], |g, x| {
        losses::inter_instance_loss(g, x[0], x[1], x[2], x[3])
    });
    (art.u.max_abs_diff(&art.a_bar), art.q.max_abs_diff(&art.b_bar), inter)
}

pub fn component_values<T: dsdr_core::Scalar>(state: &TrainState<T>, c: Component) -> Vec<Tensor<T>> {
    state.model.params.component_values(c)
}

/// Outcome of one D-substep and one main substep from the same state:
/// which components changed in each.
pub fn isolation_check() -> (Vec<Component>, Vec<Component>) {
    let data = small_synthetic(3, 8, 3);
    let network = NetworkConfig {
        num_classes: 3,
        ..tiny_config()
    };
    let data = resize_dataset(&data, network.image_shape);
    let mut state = TrainState::<f64>::new(quick_train_config(3, 1), network).unwrap();
    let (train, _) = dsdr_core::data::leave_one_out_split(&data, 2).unwrap();
    let sampler = dsdr_core::data::PairSampler::new(&train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch = sampler.sample::<f64, _>(&train, 4, &mut rng).unwrap();
    let changed = |before: &TrainState<f64>, after: &TrainState<f64>| -> Vec<Component> {
        Component::ALL
            .into_iter()
            .filter(|&c| component_values(before, c) != component_values(after, c))
            .collect()
    };
    let before = state.clone();
    state.discriminator_substep(&batch).unwrap();
    let d_changed = changed(&before, &state);
    let before = state.clone();
    state.main_substep(&batch).unwrap();
    let main_changed = changed(&before, &state);
    (d_changed, main_changed)
}

/// Nearest-pixel downscale so tests can pair synthetic data with small
/// topologies.
pub fn resize_dataset(data: &Dataset, shape: [usize; 3]) -> Dataset {
    let [c0, h0, w0] = data.meta.image_shape;
    let [c, h, w] = shape;
    assert_eq!(c, c0);
    let images = data
        .images
        .iter()
        .map(|im| {
            let mut px = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        px[(ch * h + y) * w + x] = im.pixels[(ch * h0 + y * h0 / h) * w0 + x * w0 / w];
                    }
                }
            }
            dsdr_core::data::LabeledImage { pixels: px, ..im.clone() }
        })
        .collect();
    let mut meta = data.meta.clone();
    meta.image_shape = shape;
    Dataset::new(meta, images).unwrap()
}
