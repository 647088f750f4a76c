// SPDX-License-Identifier: Apache-2.0

//! Gradient-boosted regression trees for binary classification.
//!
//! Each round fits a tree to the logistic-loss residuals `y - p` using exact
//! greedy variance-reduction splits, then sets every leaf to the Newton step
//! `sum(r) / (sum(p (1 - p)) + eps)`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MelodyError, Result};
use crate::pipeline::FeatureVector;
use crate::scalar::{sigmoid, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// Ridge added to the hessian sum of every leaf.
    pub leaf_ridge: f64,
    /// Weight of positive rows relative to negatives.
    pub positive_weight: f64,
    /// Fraction of rows drawn (without replacement) for each tree.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            max_depth: 5,
            learning_rate: 0.1,
            min_samples_leaf: 1,
            leaf_ridge: 1e-6,
            positive_weight: 1.0,
            subsample: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node<F> {
    Split {
        feature: usize,
        /// Rows with `x[feature] < threshold` go left.
        threshold: F,
        left: usize,
        right: usize,
    },
    Leaf {
        value: F,
    },
}

/// Regression tree stored as a node arena rooted at index 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree<F> {
    pub nodes: Vec<Node<F>>,
}

impl<F: Scalar> Tree<F> {
    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[F]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] < *threshold { *left } else { *right },
                Node::Leaf { .. } => return i,
            }
        }
    }

    pub fn predict(&self, x: &[F]) -> F {
        match &self.nodes[self.leaf_index(x)] {
            Node::Leaf { value } => *value,
            Node::Split { .. } => unreachable!("leaf_index stops at leaves"),
        }
    }

    pub fn depth(&self) -> usize {
        fn go<F>(nodes: &[Node<F>], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostedForest<F> {
    pub trees: Vec<Tree<F>>,
    pub learning_rate: F,
    /// Prior log-odds.
    pub base_score: F,
    pub n_features: usize,
    pub schema: u64,
    /// Total variance reduction credited to each feature.
    pub gain: Vec<f64>,
    pub config: GbdtConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean logistic loss on the training rows after each round, starting
    /// with the prior.
    pub loss: Vec<f64>,
}

fn logloss(margin: f64, y: bool) -> f64 {
    // log(1 + exp(-m)) for y = 1, log(1 + exp(m)) for y = 0
    let m = if y { -margin } else { margin };
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Working state of one node during level-wise growth.
struct Open {
    node: usize,
    depth: usize,
    sum_r: f64,
    sum_w: f64,
    sum_h: f64,
    count: usize,
}

/// Fits a forest on the rows of `features` with binary `labels`.
pub fn fit<F: Scalar>(features: &[FeatureVector<F>], labels: &[bool], cfg: &GbdtConfig) -> Result<BoostedForest<F>> {
    fit_with_report(features, labels, cfg).map(|(f, _)| f)
}

pub fn fit_with_report<F: Scalar>(
    features: &[FeatureVector<F>],
    labels: &[bool],
    cfg: &GbdtConfig,
) -> Result<(BoostedForest<F>, FitReport)> {
    let n = features.len();
    if n != labels.len() {
        return Err(MelodyError::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&y| y).count();
    if n < 2 || pos == 0 || pos == n {
        return Err(MelodyError::Data("boosted trees need both classes in the training rows".into()));
    }
    if cfg.max_depth == 0 || cfg.min_samples_leaf == 0 {
        return Err(MelodyError::Config("max depth and min samples per leaf must be positive".into()));
    }
    if !(cfg.subsample > 0.0 && cfg.subsample <= 1.0) || cfg.positive_weight.is_nan() || cfg.positive_weight <= 0.0 {
        return Err(MelodyError::Config(
            "subsample must be in (0, 1] and the positive weight positive".into(),
        ));
    }
    let d = features[0].len();
    let schema = features[0].schema;
    // column-major copy in f64
    let mut cols = vec![vec![0.0f64; n]; d];
    for (r, z) in features.iter().enumerate() {
        if z.len() != d || z.schema != schema {
            return Err(MelodyError::Dimension { expected: d, got: z.len() });
        }
        for (j, &v) in z.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(MelodyError::Data(format!("non-finite feature {j} in row {r}")));
            }
            cols[j][r] = v.as_f64();
        }
    }
    let order: Vec<Vec<u32>> = cols
        .iter()
        .map(|c| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]));
            idx
        })
        .collect();

    let class_w: Vec<f64> = labels.iter().map(|&y| if y { cfg.positive_weight } else { 1.0 }).collect();
    let wsum: f64 = class_w.iter().sum();
    let p0 = labels.iter().zip(&class_w).filter(|(&y, _)| y).map(|(_, w)| w).sum::<f64>() / wsum;
    let base = (p0 / (1.0 - p0)).ln();
    let mut margin = vec![base; n];
    let mut report = FitReport::default();
    let mean_loss = |margin: &[f64]| {
        margin
            .iter()
            .zip(labels)
            .zip(&class_w)
            .map(|((&m, &y), w)| w * logloss(m, y))
            .sum::<f64>()
            / wsum
    };
    report.loss.push(mean_loss(&margin));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gain = vec![0.0f64; d];
    let mut trees = Vec::with_capacity(cfg.n_estimators);
    let mut resid = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n];
    let mut weight = vec![0.0f64; n];
    let n_bag = ((cfg.subsample * n as f64).round() as usize).clamp(1, n);
    let mut perm: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.n_estimators {
        for i in 0..n {
            let p = sigmoid(margin[i]);
            resid[i] = f64::from(u8::from(labels[i])) - p;
            hess[i] = p * (1.0 - p);
        }
        weight.copy_from_slice(&class_w);
        if n_bag < n {
            // partial Fisher-Yates: the first n_bag entries are the bag
            for i in 0..n_bag {
                let j = rng.random_range(i..n);
                perm.swap(i, j);
            }
            let mut in_bag = vec![false; n];
            for &i in &perm[..n_bag] {
                in_bag[i] = true;
            }
            for i in 0..n {
                if !in_bag[i] {
                    weight[i] = 0.0;
                }
            }
        }
        let (tree, leaf_of) = grow(&cols, &order, &resid, &hess, &weight, cfg, &mut gain);
        let lr = cfg.learning_rate;
        for i in 0..n {
            let v = match &tree.nodes[leaf_of[i]] {
                Node::Leaf { value } => *value,
                Node::Split { .. } => unreachable!(),
            };
            margin[i] += lr * v;
        }
        report.loss.push(mean_loss(&margin));
        trees.push(Tree {
            nodes: tree
                .nodes
                .into_iter()
                .map(|nd| match nd {
                    Node::Leaf { value } => Node::Leaf { value: F::lit(value) },
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => Node::Split {
                        feature,
                        threshold: F::lit(threshold),
                        left,
                        right,
                    },
                })
                .collect(),
        });
    }
    let forest = BoostedForest {
        trees,
        learning_rate: F::lit(cfg.learning_rate),
        base_score: F::lit(base),
        n_features: d,
        schema,
        gain,
        config: cfg.clone(),
    };
    Ok((forest, report))
}

/// Grows one tree level by level. Returns the tree and each row's leaf.
fn grow(
    cols: &[Vec<f64>],
    order: &[Vec<u32>],
    resid: &[f64],
    hess: &[f64],
    weight: &[f64],
    cfg: &GbdtConfig,
    gain: &mut [f64],
) -> (Tree<f64>, Vec<usize>) {
    let n = resid.len();
    let mut nodes: Vec<Node<f64>> = vec![Node::Leaf { value: 0.0 }];
    // rows with zero weight still follow splits so that every row has a leaf
    let mut node_of = vec![0usize; n];
    let root = summarize(0, 0, (0..n).filter(|&i| weight[i] > 0.0), resid, hess, weight);
    let mut open = vec![root];
    let mut done: Vec<Open> = Vec::new();

    while !open.is_empty() {
        let mut splittable: Vec<Open> = Vec::new();
        for o in open.drain(..) {
            if o.depth < cfg.max_depth && o.count >= 2 * cfg.min_samples_leaf {
                splittable.push(o);
            } else {
                done.push(o);
            }
        }
        if splittable.is_empty() {
            break;
        }
        // slot of each open node, keyed by arena index
        let mut slot = vec![usize::MAX; nodes.len()];
        for (s, o) in splittable.iter().enumerate() {
            slot[o.node] = s;
        }
        let best = best_splits(cols, order, resid, weight, &node_of, &slot, &splittable, cfg);
        for (o, cand) in splittable.into_iter().zip(best) {
            let Some(c) = cand else {
                done.push(o);
                continue;
            };
            gain[c.feature] += c.gain;
            let left = nodes.len();
            let right = left + 1;
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            nodes[o.node] = Node::Split {
                feature: c.feature,
                threshold: c.threshold,
                left,
                right,
            };
            let col = &cols[c.feature];
            let (mut lrows, mut rrows) = (Vec::new(), Vec::new());
            for i in 0..n {
                if node_of[i] == o.node {
                    let goes_left = col[i] < c.threshold;
                    node_of[i] = if goes_left { left } else { right };
                    if weight[i] > 0.0 {
                        if goes_left { lrows.push(i) } else { rrows.push(i) }
                    }
                }
            }
            let l = summarize(left, o.depth + 1, lrows.into_iter(), resid, hess, weight);
            let r = summarize(right, o.depth + 1, rrows.into_iter(), resid, hess, weight);
            open.push(l);
            open.push(r);
        }
    }
    done.extend(open);
    for o in done {
        nodes[o.node] = Node::Leaf {
            value: o.sum_r / (o.sum_h + cfg.leaf_ridge),
        };
    }
    (Tree { nodes }, node_of)
}

fn summarize(
    node: usize,
    depth: usize,
    rows: impl Iterator<Item = usize>,
    resid: &[f64],
    hess: &[f64],
    weight: &[f64],
) -> Open {
    let mut o = Open {
        node,
        depth,
        sum_r: 0.0,
        sum_w: 0.0,
        sum_h: 0.0,
        count: 0,
    };
    for i in rows {
        o.sum_r += weight[i] * resid[i];
        o.sum_w += weight[i];
        o.sum_h += weight[i] * hess[i];
        o.count += 1;
    }
    o
}

/// For every open node, the split maximizing `S_L^2/W_L + S_R^2/W_R - S^2/W`.
#[allow(clippy::too_many_arguments)]
fn best_splits(
    cols: &[Vec<f64>],
    order: &[Vec<u32>],
    resid: &[f64],
    weight: &[f64],
    node_of: &[usize],
    slot: &[usize],
    open: &[Open],
    cfg: &GbdtConfig,
) -> Vec<Option<Candidate>> {
    let k = open.len();
    let mut best: Vec<Option<Candidate>> = (0..k).map(|_| None).collect();
    let parent: Vec<f64> = open.iter().map(|o| o.sum_r * o.sum_r / o.sum_w).collect();
    let mut sl = vec![0.0f64; k];
    let mut wl = vec![0.0f64; k];
    let mut cl = vec![0usize; k];
    let mut last = vec![f64::NAN; k];
    let min_leaf = cfg.min_samples_leaf;
    for (f, (col, ord)) in cols.iter().zip(order).enumerate() {
        sl.iter_mut().for_each(|v| *v = 0.0);
        wl.iter_mut().for_each(|v| *v = 0.0);
        cl.iter_mut().for_each(|v| *v = 0);
        last.iter_mut().for_each(|v| *v = f64::NAN);
        for &row in ord {
            let i = row as usize;
            let w = weight[i];
            if w == 0.0 {
                continue;
            }
            let s = match slot.get(node_of[i]) {
                Some(&s) if s != usize::MAX => s,
                _ => continue,
            };
            let x = col[i];
            let o = &open[s];
            if cl[s] >= min_leaf && x > last[s] && o.count - cl[s] >= min_leaf {
                let wr = o.sum_w - wl[s];
                let sr = o.sum_r - sl[s];
                let g = sl[s] * sl[s] / wl[s] + sr * sr / wr - parent[s];
                if g > 1e-12 && best[s].as_ref().is_none_or(|b| g > b.gain) {
                    best[s] = Some(Candidate {
                        gain: g,
                        feature: f,
                        threshold: 0.5 * (last[s] + x),
                    });
                }
            }
            sl[s] += w * resid[i];
            wl[s] += w;
            cl[s] += 1;
            last[s] = x;
        }
    }
    best
}

impl<F: Scalar> BoostedForest<F> {
    /// Forest with no trees; predicts `sigmoid(base_score)`.
    pub fn constant(base_score: F, n_features: usize, schema: u64) -> Self {
        Self {
            trees: Vec::new(),
            learning_rate: F::lit(0.1),
            base_score,
            n_features,
            schema,
            gain: vec![0.0; n_features],
            config: GbdtConfig::default(),
        }
    }

    pub fn margin(&self, x: &[F]) -> F {
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<F>()
    }

    /// Probability of the anomalous class.
    pub fn predict_proba(&self, z: &FeatureVector<F>) -> Result<F> {
        self.check(z)?;
        Ok(sigmoid(self.margin(&z.values)))
    }

    pub fn predict_batch(&self, rows: &[FeatureVector<F>]) -> Result<Vec<F>> {
        rows.iter().map(|z| self.predict_proba(z)).collect()
    }

    fn check(&self, z: &FeatureVector<F>) -> Result<()> {
        if z.schema != self.schema {
            return Err(MelodyError::SchemaMismatch {
                expected: format!("{:016x}", self.schema),
                got: format!("{:016x}", z.schema),
            });
        }
        if z.len() != self.n_features {
            return Err(MelodyError::Dimension {
                expected: self.n_features,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Gain importance normalized to sum to one (all zeros without splits).
    pub fn importance(&self) -> Vec<f64> {
        let total: f64 = self.gain.iter().sum();
        if total > 0.0 {
            self.gain.iter().map(|g| g / total).collect()
        } else {
            vec![0.0; self.gain.len()]
        }
    }

    /// Indented text rendering of every tree.
    pub fn dump(&self, feature_names: Option<&[String]>) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "base_score={} learning_rate={} trees={}",
            self.base_score,
            self.learning_rate,
            self.trees.len()
        );
        for (t, tree) in self.trees.iter().enumerate() {
            let _ = writeln!(out, "tree {t}:");
            let mut stack = vec![(0usize, 1usize)];
            while let Some((i, indent)) = stack.pop() {
                let pad = "  ".repeat(indent);
                match &tree.nodes[i] {
                    Node::Leaf { value } => {
                        let _ = writeln!(out, "{pad}leaf {value}");
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let name = feature_names
                            .and_then(|n| n.get(*feature).cloned())
                            .unwrap_or_else(|| format!("f{feature}"));
                        let _ = writeln!(out, "{pad}{name} < {threshold}");
                        stack.push((*right, indent + 1));
                        stack.push((*left, indent + 1));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(xs: &[f64]) -> Vec<FeatureVector<f64>> {
        xs.iter().map(|&x| FeatureVector::new(vec![x], 1)).collect()
    }

    #[test]
    fn logloss_matches_direct_formula() {
        for &m in &[-3.0, -0.2, 0.0, 1.5] {
            let p: f64 = 1.0 / (1.0 + f64::exp(-m));
            assert!((logloss(m, true) + p.ln()).abs() < 1e-12);
            assert!((logloss(m, false) + (1.0 - p).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_split_is_midpoint() {
        let x = rows(&[-2.0, -1.0, 1.0, 3.0]);
        let y = [false, false, true, true];
        let f = fit(&x, &y, &GbdtConfig { n_estimators: 1, ..GbdtConfig::default() }).unwrap();
        match &f.trees[0].nodes[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 0.0),
            n => panic!("expected split, got {n:?}"),
        }
        assert_eq!(f.trees[0].depth(), 1);
    }

    #[test]
    fn rejects_bad_input() {
        let x = rows(&[0.0, 1.0]);
        assert!(fit(&x, &[true, true], &GbdtConfig::default()).is_err());
        let bad = vec![FeatureVector::new(vec![f64::NAN], 1), FeatureVector::new(vec![1.0], 1)];
        assert!(fit(&bad, &[true, false], &GbdtConfig::default()).is_err());
        let f = fit(&x, &[false, true], &GbdtConfig::default()).unwrap();
        assert!(f.predict_proba(&FeatureVector::new(vec![0.0, 1.0], 1)).is_err());
        assert!(f.predict_proba(&FeatureVector::new(vec![0.0], 2)).is_err());
    }

    #[test]
    fn dump_names_features() {
        let x = rows(&[0.0, 1.0]);
        let f = fit(&x, &[false, true], &GbdtConfig { n_estimators: 1, ..GbdtConfig::default() }).unwrap();
        let text = f.dump(Some(&["cpu".to_string()]));
        assert!(text.contains("cpu < 0.5"), "{text}");
    }
}
