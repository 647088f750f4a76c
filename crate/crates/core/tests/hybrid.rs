// SPDX-License-Identifier: Apache-2.0

mod common;

use std::sync::{Arc, OnceLock};

use melody::hybrid::{sequential, CombineMode, HybridConfig, Thresholds};
use melody::synth::{train_model, SynthOutput};
use melody::{FeatureVector, HybridModel, MelodyError};
use proptest::prelude::*;

type Fixture = (SynthOutput, Arc<HybridModel<f64>>, Vec<FeatureVector<f64>>);

fn shared() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let (out, model) = common::tiny_model::<f64>();
        let rows = out.dataset.entities.iter().map(|e| model.featurize(e).unwrap()).collect();
        (out, model, rows)
    })
}

fn theta_grid() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

#[test]
fn filtered_entities_never_fire_for_any_final_threshold() {
    let (_, model, rows) = shared();
    assert_eq!(model.mode, CombineMode::Sequential);
    let theta1 = model.thresholds.theta1.unwrap();
    let mut filtered = 0;
    let mut probe = (**model).clone();
    for theta2 in theta_grid() {
        probe.thresholds.theta = theta2;
        for z in rows {
            let m = probe.member_scores(z).unwrap();
            let d = probe.decide_members(&m).unwrap();
            if m.semidoc_mean() < theta1 {
                filtered += 1;
                assert!(!d.anomalous);
                assert_eq!(d.stage, Some(1));
            }
        }
    }
    assert!(filtered > 0, "no entity reached the filter");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn sequential_rule_respects_the_filter(a in 0.0f64..1.0, b in 0.0f64..1.0, theta1 in 0.001f64..1.0) {
        for theta2 in theta_grid() {
            let s = sequential(a, b, theta1, theta2);
            if a < theta1 {
                prop_assert_eq!(s.stage, 1);
                prop_assert!(s.decision_score < theta2 || theta2 == 0.0);
            } else {
                prop_assert_eq!(s.stage, 2);
                prop_assert_eq!(s.decision_score, b);
            }
        }
    }
}

#[test]
fn open_filter_reduces_to_boosted_trees() {
    let out = common::tiny_data();
    let prepared = common::tiny_prepared::<f64>(&out);
    let cfg = HybridConfig {
        semidoc_members: 1,
        gbdt_members: 1,
        ..common::tiny_hybrid()
    };
    let mut model = train_model(&prepared, &cfg, 9).unwrap();
    model.thresholds = Thresholds {
        theta1: Some(0.0),
        theta: model.thresholds.theta,
    };
    for e in &out.dataset.entities {
        let z = model.featurize(e).unwrap();
        let p = model.gbdt[0].predict_proba(&z).unwrap();
        let d = model.decide(&z).unwrap();
        assert_eq!(d.stage, Some(2));
        assert_eq!(d.score, p);
        assert_eq!(d.anomalous, p >= model.thresholds.theta);
    }
}

#[test]
fn mean_mode_averages_all_members() {
    let (_, model, rows) = shared();
    let mut mean = (**model).clone();
    mean.mode = CombineMode::Mean;
    for z in rows.iter().take(20) {
        let m = mean.member_scores(z).unwrap();
        let all: Vec<f64> = m.semidoc.iter().chain(&m.gbdt).copied().collect();
        let expected = all.iter().sum::<f64>() / all.len() as f64;
        assert!((mean.score_mean(z).unwrap() - expected).abs() < 1e-15);
        assert_eq!(mean.decide(z).unwrap().stage, None);
    }
}

#[test]
fn artifact_round_trip_is_bit_exact() {
    let (out, model, rows) = shared();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let loaded = HybridModel::<f64>::load(&path).unwrap();
    assert_eq!(&loaded, &**model);
    for (e, z) in out.dataset.entities.iter().zip(rows) {
        let again = loaded.featurize(e).unwrap();
        assert!(again.values.iter().zip(&z.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        let (x, y) = (model.decide(z).unwrap(), loaded.decide(&again).unwrap());
        assert_eq!(x.score.to_bits(), y.score.to_bits());
        assert_eq!(x.anomalous, y.anomalous);
    }
}

#[test]
fn single_precision_artifacts_round_trip() {
    let (out, model) = common::tiny_model::<f32>();
    let mut buf = Vec::new();
    model.write(&mut buf).unwrap();
    let loaded = HybridModel::<f32>::read(buf.as_slice()).unwrap();
    for e in out.dataset.entities.iter().take(30) {
        let a = model.decide(&model.featurize(e).unwrap()).unwrap();
        let b = loaded.decide(&loaded.featurize(e).unwrap()).unwrap();
        assert_eq!(a.score.to_bits(), b.score.to_bits());
    }
    assert!(matches!(HybridModel::<f64>::read(buf.as_slice()), Err(MelodyError::Artifact(_))));
}

#[test]
fn schema_mismatch_is_refused() {
    let (_, model, rows) = shared();
    let mut json: serde_json::Value = serde_json::to_value(&**model).unwrap();
    // dropping one instance changes the feature layout the members were trained on
    json["registry"]["instance"].as_array_mut().unwrap().pop();
    let err = HybridModel::<f64>::read(serde_json::to_vec(&json).unwrap().as_slice()).unwrap_err();
    assert!(matches!(err, MelodyError::SchemaMismatch { .. }), "{err}");

    let mut forged = (**model).clone();
    forged.schema.hash ^= 1;
    let mut buf = Vec::new();
    forged.write(&mut buf).unwrap();
    assert!(matches!(HybridModel::<f64>::read(buf.as_slice()), Err(MelodyError::SchemaMismatch { .. })));

    let foreign = FeatureVector::new(rows[0].values.clone(), rows[0].schema ^ 1);
    assert!(matches!(model.decide(&foreign), Err(MelodyError::SchemaMismatch { .. })));
}
