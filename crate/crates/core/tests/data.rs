mod common;

use std::collections::HashMap;

use common::small_synthetic;
use dsdr_core::data::{
    export_directory_dataset, leave_one_out_split, load_directory_dataset, synthesize_domains, DomainShiftSpec,
    PairSampler, MANIFEST_FILE,
};
use dsdr_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn classes_balanced_within_each_domain() {
    let data = synthesize_domains(&DomainShiftSpec::standard(3, 1), 10, 100).unwrap();
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for im in &data.images {
        *counts.entry((im.domain, im.label)).or_default() += 1;
    }
    assert_eq!(counts.len(), 30);
    assert!(counts.values().all(|&c| c == 10));
}

#[test]
fn leave_one_out_sizes() {
    let data = synthesize_domains(&DomainShiftSpec::standard(4, 2), 10, 1000).unwrap();
    let (train, test) = leave_one_out_split(&data, 1).unwrap();
    assert_eq!((train.len(), test.len()), (3000, 1000));
    assert!(train.images.iter().all(|im| im.domain != 1));
    assert!(test.images.iter().all(|im| im.domain == 1));
}

#[test]
fn sampled_domains_are_uniform_and_pairs_cross_domains() {
    let data = small_synthetic(3, 30, 3);
    let sampler = PairSampler::new(&data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows = sampler.sample_indices(10_000, &mut rng);
    let mut per = [0usize; 3];
    for &(a, b) in &rows {
        let (da, db) = (data.images[a].domain, data.images[b].domain);
        assert_ne!(da, db);
        per[da] += 1;
    }
    for c in per {
        let f = c as f64 / 10_000.0;
        assert!((f - 1.0 / 3.0).abs() < 0.02, "{per:?}");
    }
}

#[test]
fn held_out_samples_never_reach_training_batches() {
    let data = small_synthetic(4, 12, 3);
    let (train, test) = leave_one_out_split(&data, 2).unwrap();
    assert_ne!(train.digest(), data.digest());
    let sampler = PairSampler::new(&train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let b = sampler.sample::<f32, _>(&train, 8, &mut rng).unwrap();
        assert!(b.domains_a.iter().chain(&b.domains_b).all(|&d| d != 2));
    }
    let (_, again) = leave_one_out_split(&data, 2).unwrap();
    assert_eq!(test.digest(), again.digest());
}

#[test]
fn directory_round_trip() {
    let data = small_synthetic(3, 6, 3);
    let dir = tempfile::tempdir().unwrap();
    let manifest = export_directory_dataset(&data, dir.path(), Some(7)).unwrap();
    assert!(dir.path().join(MANIFEST_FILE).exists());
    let loaded = load_directory_dataset(dir.path(), data.meta.image_shape).unwrap();
    assert_eq!(loaded.len(), data.len());
    assert_eq!(loaded.meta.num_classes, 3);
    let mut names = data.meta.domain_names.clone();
    names.sort();
    assert_eq!(loaded.meta.domain_names, names);
    let group = |d: &dsdr_core::data::Dataset| {
        let mut m: HashMap<(String, usize), Vec<Vec<f32>>> = HashMap::new();
        for im in &d.images {
            m.entry((d.meta.domain_names[im.domain].clone(), im.label)).or_default().push(im.pixels.clone());
        }
        m
    };
    let (orig, back) = (group(&data), group(&loaded));
    assert_eq!(orig.len(), back.len());
    for (key, images) in &orig {
        let other = &back[key];
        assert_eq!(images.len(), other.len());
        for (x, y) in images.iter().zip(other) {
            assert!(x.iter().zip(y).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }
    let again = tempfile::tempdir().unwrap();
    assert_eq!(export_directory_dataset(&data, again.path(), Some(7)).unwrap().digest(), manifest.digest());
}

#[test]
fn directory_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("only/0")).unwrap();
    assert!(matches!(load_directory_dataset(dir.path(), [3, 32, 32]), Err(Error::Schema(_))));
    std::fs::create_dir_all(dir.path().join("other/1")).unwrap();
    match load_directory_dataset(dir.path(), [3, 32, 32]) {
        Err(Error::Schema(m)) => assert!(m.contains("differ"), "{m}"),
        other => panic!("expected schema error, got {other:?}"),
    }
    assert!(load_directory_dataset(&dir.path().join("missing"), [3, 32, 32]).is_err());
}

#[test]
fn single_domain_spec_is_rejected() {
    assert!(synthesize_domains(&DomainShiftSpec::standard(1, 0), 10, 10).is_err());
}
