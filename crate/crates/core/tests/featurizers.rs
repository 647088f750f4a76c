// SPDX-License-Identifier: Apache-2.0

mod common;

use common::oracle;
use melody::featurizers::{FeaturizerParams, FeaturizerSpec};
use melody::pipeline::{extract_raw_features, EntityFeaturizer};
use melody::{FeatureSchema, FeaturizerKind, MelodyError, Observation, Registry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(params: FeaturizerParams) -> FeaturizerSpec {
    FeaturizerSpec {
        id: "probe".into(),
        params,
        metrics: vec!["m".into()],
    }
}

#[test]
fn online_scores_equal_prefix_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0f1);
    for case in 0..200 {
        let t_hist = rng.random_range(16..80);
        let gaps = rng.random_range(0.0..0.2);
        let mut history = oracle::random_series(&mut rng, t_hist, gaps);
        history[0] = Some(1.0);
        let (len, gaps) = (rng.random_range(1..40), rng.random_range(0.0..0.4));
        let stream = oracle::random_series(&mut rng, len, gaps);
        for params in oracle::random_params(&mut rng, 12) {
            let mut state = spec(params.clone()).init::<f64>(&history).unwrap();
            for (k, v) in stream.iter().enumerate() {
                let t = (t_hist + 1 + k) as i64;
                let online = state.step(Observation::new(t, *v)).unwrap();
                let batch = oracle::score(&params, &history, &stream[..=k]);
                assert_eq!(online.to_bits(), batch.to_bits(), "case {case} {params:?} step {k}: {online} vs {batch}");
            }
        }
    }
}

#[test]
fn subnn_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5b);
    for case in 0..100 {
        let w = rng.random_range(1..=40);
        let t_hist = rng.random_range(w..w + 150);
        let mut history = oracle::random_series(&mut rng, t_hist, 0.05);
        history[t_hist / 2] = Some(0.5);
        let len = rng.random_range(1..25);
        let stream = oracle::random_series(&mut rng, len, 0.1);
        let mut state = spec(FeaturizerParams::SubNn { window: w }).init::<f64>(&history).unwrap();
        for k in 0..stream.len() {
            let online = state.score(stream[k]);
            let exhaustive = oracle::subnn(&history, &stream[..=k], w);
            assert!((online - exhaustive).abs() <= 1e-9, "case {case} step {k}: {online} vs {exhaustive}");
        }
    }
}

#[test]
fn steps_must_advance() {
    let mut state = spec(FeaturizerParams::Cbf { window: 2 }).init::<f64>(&[Some(1.0)]).unwrap();
    state.step(Observation::new(5, None)).unwrap();
    let err = state.step(Observation::new(5, None)).unwrap_err();
    assert!(matches!(err, MelodyError::OutOfOrder { last: 5, got: 5 }));
}

#[test]
fn statistics_kinds_need_an_observed_history() {
    for params in [
        FeaturizerParams::Sbf { alpha: 2.0, window: 1 },
        FeaturizerParams::Md { window: 2 },
        FeaturizerParams::SubNn { window: 2 },
    ] {
        assert!(spec(params).init::<f64>(&[None, None, None]).is_err());
    }
    assert!(spec(FeaturizerParams::SubNn { window: 4 }).init::<f64>(&[Some(1.0); 3]).is_err());
}

#[test]
fn default_registry_shape() {
    let reg = Registry::default();
    assert_eq!(reg.len(), 63);
    let counts: Vec<usize> = [
        FeaturizerKind::Sbf,
        FeaturizerKind::Tbf,
        FeaturizerKind::Cbf,
        FeaturizerKind::SubNn,
        FeaturizerKind::Md,
    ]
    .iter()
    .map(|&k| reg.count(k))
    .collect();
    assert_eq!(counts, [11, 7, 1, 22, 22]);
    assert_eq!(FeatureSchema::from_registry(&reg).dim(), 134);
}

#[test]
fn featurizer_state_matches_truncated_replay() {
    let out = common::tiny_data();
    let reg = Registry::default();
    let cat = &out.dataset.catalog;
    for entity in out.dataset.entities.iter().take(12) {
        let mut fz = EntityFeaturizer::<f64>::for_entity(&reg, cat, entity).unwrap();
        let t0 = entity.t_history() as i64;
        for step in 0..entity.stream_len() {
            let values: Vec<Option<f64>> = entity.series.iter().map(|s| s.stream[step]).collect();
            fz.step(t0 + 1 + step as i64, &values).unwrap();
            let mut prefix = entity.clone();
            for s in &mut prefix.series {
                s.stream.truncate(step + 1);
            }
            let batch = extract_raw_features::<f64>(&prefix, &reg, cat).unwrap();
            assert_eq!(fz.raw_features(), batch, "{} step {step}", entity.id);
        }
    }
}

#[test]
fn single_precision_pipeline_runs() {
    let out = common::tiny_data();
    let reg = Registry::default();
    for entity in out.dataset.entities.iter().take(5) {
        let a = extract_raw_features::<f32>(entity, &reg, &out.dataset.catalog).unwrap();
        let b = extract_raw_features::<f64>(entity, &reg, &out.dataset.catalog).unwrap();
        assert_eq!(a.max.len(), b.max.len());
        for (x, y) in a.max.iter().zip(&b.max) {
            assert_eq!(x.is_some(), y.is_some());
            if let (Some(x), Some(y)) = (x, y) {
                assert!(x.is_finite());
                assert!((f64::from(*x) - y).abs() <= 1e-2 * (1.0 + y.abs()) || *y == 0.0 || *y == 1.0);
            }
        }
    }
}
