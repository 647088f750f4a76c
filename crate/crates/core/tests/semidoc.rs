// SPDX-License-Identifier: Apache-2.0

use std::time::Instant;

use melody::semidoc::{batch_loss, batch_loss_grad, train, Encoder, LossParams, OneClassData, TrainConfig, Tuple};
use melody::{FeatureVector, OneClassMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SCHEMA: u64 = 0x5eed;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.5).unwrap();
    (0..n).map(|_| (0..dim).map(|_| normal.sample(rng)).collect()).collect()
}

fn finite_difference(enc: &Encoder<f64>, batch: &[Tuple<'_, f64>], center: &[f64], lp: &LossParams<f64>) -> Vec<f64> {
    let h = 1e-6;
    let mut probe = enc.clone();
    (0..enc.params.len())
        .map(|i| {
            let p = enc.params[i];
            probe.params[i] = p + h;
            let up = batch_loss(&probe, batch, center, lp);
            probe.params[i] = p - h;
            let down = batch_loss(&probe, batch, center, lp);
            probe.params[i] = p;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn gradient_matches_central_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (input, hidden, embed) = (7, 6, 5);
    let mut worst = 0.0f64;
    for point in 0..24 {
        let enc = Encoder::<f64>::init(input, hidden, embed, &mut rng);
        let queries = random_rows(&mut rng, 4, input);
        let negatives = random_rows(&mut rng, 4, input);
        let center: Vec<f64> = (0..embed).map(|_| rng.random_range(0.1..0.9)).collect();
        let mode = if point % 4 == 3 { OneClassMode::DeepSvdd } else { OneClassMode::SemiDoc };
        let batch: Vec<Tuple<'_, f64>> = queries
            .iter()
            .zip(&negatives)
            .map(|(q, n)| {
                let neg = (mode == OneClassMode::SemiDoc).then_some(n.as_slice());
                (q.as_slice(), neg)
            })
            .collect();
        let lp = LossParams {
            mode,
            // a margin near the typical negative distance keeps some hinges active and some not
            margin: rng.random_range(0.5..3.0),
            weight_decay: 1e-3,
        };
        let mut grad = Vec::new();
        let loss = batch_loss_grad(&enc, &batch, &center, &lp, &mut grad);
        assert_eq!(loss, batch_loss(&enc, &batch, &center, &lp));
        let fd = finite_difference(&enc, &batch, &center, &lp);
        let err = rel_err(&grad, &fd);
        worst = worst.max(err);
        assert!(err < 1e-4, "point {point}: relative error {err:e}");
    }
    assert!(worst < 1e-4);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn deep_svdd_loss_is_semidoc_with_zero_margin() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let enc = Encoder::<f64>::init(5, 4, 3, &mut rng);
    let qs = random_rows(&mut rng, 6, 5);
    let ns = random_rows(&mut rng, 6, 5);
    let center = vec![0.3, 0.6, 0.5];
    let semi: Vec<Tuple<'_, f64>> = qs.iter().zip(&ns).map(|(q, n)| (q.as_slice(), Some(n.as_slice()))).collect();
    let plain: Vec<Tuple<'_, f64>> = qs.iter().map(|q| (q.as_slice(), None)).collect();
    let lp = LossParams {
        mode: OneClassMode::SemiDoc,
        margin: 0.0,
        weight_decay: 1e-4,
    };
    let svdd = LossParams {
        mode: OneClassMode::DeepSvdd,
        ..lp
    };
    assert_eq!(batch_loss(&enc, &semi, &center, &lp), batch_loss(&enc, &plain, &center, &svdd));
}

fn cluster(rng: &mut ChaCha8Rng, n: usize, dim: usize, mean: f64) -> Vec<FeatureVector<f64>> {
    let noise = Normal::new(0.0, 0.4).unwrap();
    (0..n)
        .map(|_| FeatureVector::new((0..dim).map(|_| mean + noise.sample(rng)).collect(), SCHEMA))
        .collect()
}

#[test]
fn anomalies_score_above_normals_after_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dim = 12;
    let normals = cluster(&mut rng, 300, dim, 0.0);
    let anomalies = cluster(&mut rng, 40, dim, 2.5);
    let test_normals = cluster(&mut rng, 100, dim, 0.0);
    let test_anomalies = cluster(&mut rng, 100, dim, 2.5);
    let cfg = TrainConfig {
        margin: 6.0,
        hidden: 32,
        embed: 16,
        batch_size: 32,
        max_epochs: 40,
        seed: 3,
        ..TrainConfig::default()
    };
    let data = OneClassData {
        labeled_normals: &normals,
        unlabeled: &[],
        anomalies: &anomalies,
    };
    let (model, _) = train(data, None, &cfg).unwrap();
    let mean = |rows: &[FeatureVector<f64>]| rows.iter().map(|z| model.score(z).unwrap()).sum::<f64>() / rows.len() as f64;
    let (sn, sa) = (mean(&test_normals), mean(&test_anomalies));
    assert!(sa - sn >= 0.2, "normal {sn:.3}, anomaly {sa:.3}");
}

#[test]
fn deep_svdd_contracts_normals_early() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let normals = cluster(&mut rng, 200, 10, 0.0);
    let cfg = TrainConfig {
        mode: OneClassMode::DeepSvdd,
        learning_rate: 1e-4,
        weight_decay: 0.0,
        hidden: 16,
        embed: 8,
        batch_size: 200,
        max_epochs: 10,
        seed: 4,
        ..TrainConfig::default()
    };
    let data = OneClassData {
        labeled_normals: &normals,
        unlabeled: &[],
        anomalies: &[],
    };
    let (_, report) = train(data, None, &cfg).unwrap();
    let d: Vec<f64> = report.epochs.iter().map(|e| e.mean_normal_distance).collect();
    assert_eq!(d.len(), 10);
    for w in d.windows(2) {
        assert!(w[1] <= w[0], "{d:?}");
    }
    assert!(d[d.len() - 1] < d[0]);
}

#[test]
fn trained_models_reject_foreign_schemas() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normals = cluster(&mut rng, 20, 4, 0.0);
    let cfg = TrainConfig {
        mode: OneClassMode::DeepSvdd,
        hidden: 4,
        embed: 4,
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let data = OneClassData {
        labeled_normals: &normals,
        unlabeled: &[],
        anomalies: &[],
    };
    let (model, _) = train(data, None, &cfg).unwrap();
    assert!(model.score(&FeatureVector::new(vec![0.0; 4], SCHEMA + 1)).is_err());
    assert!(model.score(&FeatureVector::new(vec![0.0; 5], SCHEMA)).is_err());
}
