// SPDX-License-Identifier: Apache-2.0

use melody::gbdt::{fit, fit_with_report, GbdtConfig};
use melody::FeatureVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCHEMA: u64 = 42;

fn dataset(seed: u64, n: usize, dim: usize) -> (Vec<FeatureVector<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<FeatureVector<f64>> = (0..n)
        .map(|_| FeatureVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), SCHEMA))
        .collect();
    // positive iff x0 + 0.5 x2 > 0.3
    let labels = rows.iter().map(|z| z.values[0] + 0.5 * z.values[2] > 0.3).collect();
    (rows, labels)
}

fn small() -> GbdtConfig {
    GbdtConfig {
        n_estimators: 40,
        max_depth: 3,
        subsample: 0.8,
        seed: 5,
        ..GbdtConfig::default()
    }
}

#[test]
fn learns_a_linear_boundary() {
    let (rows, labels) = dataset(1, 600, 5);
    let (test, test_labels) = dataset(2, 300, 5);
    let (forest, report) = fit_with_report(&rows, &labels, &small()).unwrap();
    assert!(report.loss.last().unwrap() < &report.loss[0]);
    let p = forest.predict_batch(&test).unwrap();
    let acc = p.iter().zip(&test_labels).filter(|(&p, &y)| (p >= 0.5) == y).count() as f64 / test.len() as f64;
    assert!(acc > 0.9, "accuracy {acc}");
    let imp = forest.importance();
    assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(imp[0] > imp[1] && imp[0] > imp[3] && imp[0] > imp[4]);
}

#[test]
fn seeded_fits_are_identical() {
    let (rows, labels) = dataset(3, 200, 4);
    let a = fit(&rows, &labels, &small()).unwrap();
    let b = fit(&rows, &labels, &small()).unwrap();
    assert_eq!(a, b);
    let c = fit(&rows, &labels, &GbdtConfig { seed: 6, ..small() }).unwrap();
    assert_ne!(a.trees, c.trees);
}

#[test]
fn depth_is_bounded() {
    let (rows, labels) = dataset(4, 300, 4);
    let forest = fit(&rows, &labels, &small()).unwrap();
    assert!(forest.trees.iter().all(|t| t.depth() <= 3 && t.leaves() <= 8));
}

#[test]
fn dump_names_features() {
    let (rows, labels) = dataset(5, 100, 3);
    let forest = fit(&rows, &labels, &GbdtConfig { n_estimators: 2, ..small() }).unwrap();
    let names: Vec<String> = vec!["alpha".into(), "beta".into(), "gamma".into()];
    let text = forest.dump(Some(&names));
    assert!(text.starts_with("base_score="));
    assert!(text.contains("tree 1:"));
    assert!(text.contains("alpha"));
}

#[test]
fn foreign_rows_are_refused() {
    let (rows, labels) = dataset(6, 50, 3);
    let forest = fit(&rows, &labels, &small()).unwrap();
    assert!(forest.predict_proba(&FeatureVector::new(vec![0.0; 3], SCHEMA + 1)).is_err());
    assert!(forest.predict_proba(&FeatureVector::new(vec![0.0; 2], SCHEMA)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batch_equals_rowwise(seed in 0u64..1000) {
        let (rows, labels) = dataset(seed, 80, 3);
        prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
        let forest = fit(&rows, &labels, &GbdtConfig { n_estimators: 8, ..small() }).unwrap();
        let batch = forest.predict_batch(&rows).unwrap();
        for (z, b) in rows.iter().zip(&batch) {
            let p = forest.predict_proba(z).unwrap();
            prop_assert_eq!(p.to_bits(), b.to_bits());
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
