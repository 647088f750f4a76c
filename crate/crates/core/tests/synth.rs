// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::HashSet;

use melody::entity::{read_dataset, write_dataset};
use melody::pipeline::extract_raw_features;
use melody::synth::{generate, make_splits, InjectionKind, SynthConfig};
use melody::{FeatureSchema, LabelingScheme, Registry};

fn quick(seed: u64) -> SynthConfig {
    SynthConfig {
        n_labeled: 400,
        n_unlabeled: 100,
        t_history: 40,
        mean_stream_len: 4.0,
        max_stream_len: 12,
        metrics_per_entity: (3, 6),
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let (a, b, c) = (generate(&quick(1)).unwrap(), generate(&quick(1)).unwrap(), generate(&quick(2)).unwrap());
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.truth, b.truth);
    assert_ne!(a.dataset, c.dataset);
}

#[test]
fn anomaly_counts_are_exact() {
    let cfg = SynthConfig {
        anomaly_rate: 0.15,
        unlabeled_purity: 0.9,
        ..quick(3)
    };
    let out = generate(&cfg).unwrap();
    let lab = out.truth.iter().filter(|t| t.labeled && t.injection.is_some()).count();
    let unl = out.truth.iter().filter(|t| !t.labeled && t.injection.is_some()).count();
    assert_eq!(lab, 60);
    assert_eq!(unl, 10);
    assert!(out.truth.iter().all(|t| !(t.benign_surge && t.injection.is_some())));
}

#[test]
fn label_noise_stays_within_binomial_bounds() {
    let cfg = SynthConfig {
        n_labeled: 2000,
        n_unlabeled: 0,
        label_noise: 0.1,
        t_history: 8,
        mean_stream_len: 1.0,
        max_stream_len: 1,
        metrics_per_entity: (1, 2),
        seed: 17,
        ..SynthConfig::default()
    };
    let out = generate(&cfg).unwrap();
    let flipped = out.truth.iter().filter(|t| t.label_flipped).count() as f64;
    let (n, p) = (2000.0f64, 0.1f64);
    let half = 1.96 * (n * p * (1.0 - p)).sqrt();
    assert!((flipped - n * p).abs() <= half, "{flipped} flips");
    for (e, t) in out.dataset.entities.iter().zip(&out.truth) {
        let y = e.binary_label(LabelingScheme::Hard).unwrap().unwrap();
        assert_eq!(y, t.injection.is_some() != t.label_flipped, "entity {}", e.id);
    }
}

#[test]
fn missing_runs_trigger_the_missing_value_rule() {
    let cfg = SynthConfig {
        anomaly_rate: 0.5,
        t_history: 120,
        ..quick(5)
    };
    let out = generate(&cfg).unwrap();
    let reg = Registry::default();
    let schema = FeatureSchema::from_registry(&reg);
    let cbf = schema.names.iter().position(|n| n == "cbf_w5.max").unwrap();
    let mut checked = 0;
    for (e, t) in out.dataset.entities.iter().zip(&out.truth) {
        if t.injection == Some(InjectionKind::MissingRun) {
            let raw = extract_raw_features::<f64>(e, &reg, &out.dataset.catalog).unwrap();
            assert!(raw.pooled(cbf).unwrap() > 0.0, "entity {}", e.id);
            checked += 1;
        }
    }
    assert!(checked > 5);
}

#[test]
fn splits_partition_the_labeled_set() {
    let out = generate(&quick(6)).unwrap();
    let data = out.dataset.partition(LabelingScheme::Hard).unwrap();
    let labels: Vec<bool> = data.labeled.iter().map(|l| l.label).collect();
    let splits = make_splits(&labels, 5, 99).unwrap();
    assert_eq!(splits, make_splits(&labels, 5, 99).unwrap());
    assert_eq!(splits.len(), 5);
    for s in &splits {
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (240, 80, 80));
        let all: HashSet<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        assert_eq!(all.len(), labels.len());
        for part in [&s.train, &s.validation, &s.test] {
            assert!(part.iter().any(|&i| labels[i]) && part.iter().any(|&i| !labels[i]));
        }
    }
    assert!(make_splits(&[true, false], 1, 0).is_err());
}

#[test]
fn datasets_round_trip_through_jsonl() {
    let out = common::tiny_data();
    let mut buf = Vec::new();
    write_dataset(&out.dataset, &mut buf).unwrap();
    let back = read_dataset(buf.as_slice()).unwrap();
    assert_eq!(back, out.dataset);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(generate(&SynthConfig { label_noise: 1.5, ..quick(0) }).is_err());
    assert!(generate(&SynthConfig { metrics_per_entity: (4, 2), ..quick(0) }).is_err());
    assert!(generate(&SynthConfig { judges: 0, ..quick(0) }).is_err());
}
