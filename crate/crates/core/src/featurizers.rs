// SPDX-License-Identifier: Apache-2.0

//! Per-series online scorers.
//!
//! Every featurizer instance is initialized from the `T`-step history of one
//! univariate series and then turns each post-launch observation into an
//! anomalous-degree score. Rule-based kinds (SbF, TbF, CbF) emit `{0, 1}`;
//! algorithm-based kinds (SubNN, MD) emit a non-negative distance computed
//! on history-standardized values so scores are comparable across entities.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entity::{EntityRecord, MetricCatalog, Observation, META_FEATURES};
use crate::error::{MelodyError, Result};
use crate::scalar::{median, Scalar};

/// Lower bound on the history standard deviation used for standardization.
pub const SIGMA_FLOOR: f64 = 1e-8;

pub const DEFAULT_SUBNN_WINDOW: usize = 100;
pub const DEFAULT_MD_WINDOW: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturizerKind {
    Sbf,
    Tbf,
    Cbf,
    SubNn,
    Md,
}

impl FeaturizerKind {
    pub fn is_rule(self) -> bool {
        matches!(self, Self::Sbf | Self::Tbf | Self::Cbf)
    }
}

impl fmt::Display for FeaturizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sbf => "sbf",
            Self::Tbf => "tbf",
            Self::Cbf => "cbf",
            Self::SubNn => "subnn",
            Self::Md => "md",
        })
    }
}

/// Kind-specific parameters of a featurizer instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeaturizerParams {
    /// Statistics-based rule: `tau = mean + alpha * std` of the history.
    Sbf { alpha: f64, window: usize },
    /// Fixed raw threshold rule.
    Tbf { threshold: f64, window: usize },
    /// Consecutive-missing counter.
    Cbf { window: usize },
    /// Subsequence nearest neighbor.
    #[serde(rename = "subnn")]
    SubNn { window: usize },
    /// Median forecast deviation.
    Md { window: usize },
}

impl FeaturizerParams {
    pub fn kind(&self) -> FeaturizerKind {
        match self {
            Self::Sbf { .. } => FeaturizerKind::Sbf,
            Self::Tbf { .. } => FeaturizerKind::Tbf,
            Self::Cbf { .. } => FeaturizerKind::Cbf,
            Self::SubNn { .. } => FeaturizerKind::SubNn,
            Self::Md { .. } => FeaturizerKind::Md,
        }
    }

    pub fn window(&self) -> usize {
        match *self {
            Self::Sbf { window, .. }
            | Self::Tbf { window, .. }
            | Self::Cbf { window }
            | Self::SubNn { window }
            | Self::Md { window } => window,
        }
    }
}

/// One configured featurizer instance and the metrics it applies to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerSpec {
    pub id: String,
    #[serde(flatten)]
    pub params: FeaturizerParams,
    pub metrics: Vec<String>,
}

impl FeaturizerSpec {
    pub fn kind(&self) -> FeaturizerKind {
        self.params.kind()
    }

    pub fn applies_to(&self, metric: &str) -> bool {
        self.metrics.iter().any(|m| m == metric)
    }

    /// Initializes the online state of this instance for one series.
    pub fn init<F: Scalar>(&self, history: &[Option<f64>]) -> Result<InstanceState<F>> {
        let scorer = match self.params {
            FeaturizerParams::Sbf { alpha, window } => {
                Scorer::Threshold(ThresholdRule::from_history(history, alpha, window)?)
            }
            FeaturizerParams::Tbf { threshold, window } => {
                Scorer::Threshold(ThresholdRule::new(F::lit(threshold), window))
            }
            FeaturizerParams::Cbf { window } => Scorer::MissingRun(MissingRunRule::new(window)),
            FeaturizerParams::SubNn { window } => Scorer::SubNn(SubNnScorer::from_history(history, window)?),
            FeaturizerParams::Md { window } => Scorer::Median(MedianForecaster::from_history(history, window)?),
        };
        Ok(InstanceState::new(scorer))
    }
}

/// Ordered list of featurizer instances; the order fixes the feature order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    #[serde(rename = "instance")]
    pub instances: Vec<FeaturizerSpec>,
}

const DEFAULT_REGISTRY: &str = include_str!("../registry.toml");

impl Registry {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let reg: Registry = toml::from_str(text).map_err(|e| MelodyError::Config(format!("registry: {e}")))?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MelodyError::Config(format!("registry: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for spec in &self.instances {
            if !ids.insert(spec.id.as_str()) {
                return Err(MelodyError::Config(format!("duplicate featurizer id {:?}", spec.id)));
            }
            if spec.params.window() == 0 {
                return Err(MelodyError::Config(format!("featurizer {:?}: window must be >= 1", spec.id)));
            }
            if spec.metrics.is_empty() {
                return Err(MelodyError::Config(format!("featurizer {:?} applies to no metric", spec.id)));
            }
            match spec.params {
                FeaturizerParams::Sbf { alpha, .. } if !alpha.is_finite() => {
                    return Err(MelodyError::Config(format!("featurizer {:?}: alpha must be finite", spec.id)))
                }
                FeaturizerParams::Tbf { threshold, .. } if !threshold.is_finite() => {
                    return Err(MelodyError::Config(format!("featurizer {:?}: threshold must be finite", spec.id)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Fails if an instance names a metric the catalog does not know.
    pub fn check_catalog(&self, catalog: &MetricCatalog) -> Result<()> {
        for spec in &self.instances {
            if let Some(m) = spec.metrics.iter().find(|m| catalog.id(m).is_none()) {
                return Err(MelodyError::Config(format!(
                    "featurizer {:?} references metric {m:?} missing from the catalog",
                    spec.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn count(&self, kind: FeaturizerKind) -> usize {
        self.instances.iter().filter(|s| s.kind() == kind).count()
    }

    /// Copy keeping only instances for which `keep` holds.
    pub fn filtered(&self, keep: impl Fn(&FeaturizerSpec) -> bool) -> Self {
        Self {
            instances: self.instances.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    /// Copy with every SubNN and MD window replaced.
    pub fn with_algorithm_windows(&self, subnn: usize, md: usize) -> Self {
        let mut out = self.clone();
        for spec in &mut out.instances {
            match &mut spec.params {
                FeaturizerParams::SubNn { window } => *window = subnn,
                FeaturizerParams::Md { window } => *window = md,
                _ => {}
            }
        }
        out
    }

    /// Longest history any instance needs.
    pub fn min_history(&self) -> usize {
        self.instances
            .iter()
            .filter(|s| s.kind() == FeaturizerKind::SubNn)
            .map(|s| s.params.window())
            .max()
            .unwrap_or(1)
    }
}

impl Default for Registry {
    /// The bundled registry: 11 SbF, 7 TbF and 1 CbF instances plus one SubNN
    /// and one MD instance per default catalog metric.
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_REGISTRY).expect("bundled registry parses")
    }
}

/// Mean and population standard deviation of the present history values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryStats<F> {
    pub mean: F,
    pub std: F,
}

impl<F: Scalar> HistoryStats<F> {
    pub fn from_history(history: &[Option<f64>]) -> Result<Self> {
        let present: Vec<F> = history.iter().flatten().map(|&v| F::lit(v)).collect();
        if present.is_empty() {
            return Err(MelodyError::FeaturizerInit("history has no observed values".into()));
        }
        let n = F::lit(present.len() as f64);
        let mean = present.iter().copied().sum::<F>() / n;
        let var = present.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }

    /// `(x - mean) / max(std, SIGMA_FLOOR)`.
    #[inline]
    pub fn standardize(&self, x: F) -> F {
        (x - self.mean) / self.std.max(F::lit(SIGMA_FLOOR))
    }
}

/// SbF/TbF state: fires once `window` consecutive values exceed `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdRule<F> {
    pub tau: F,
    pub window: usize,
    pub run: usize,
}

impl<F: Scalar> ThresholdRule<F> {
    pub fn new(tau: F, window: usize) -> Self {
        Self { tau, window, run: 0 }
    }

    /// SbF initialization: `tau = mean + alpha * std` over the present history.
    pub fn from_history(history: &[Option<f64>], alpha: f64, window: usize) -> Result<Self> {
        if history.len() < 2 {
            return Err(MelodyError::FeaturizerInit(format!(
                "SbF needs at least 2 history steps, got {}",
                history.len()
            )));
        }
        let stats = HistoryStats::<F>::from_history(history)?;
        Ok(Self::new(stats.mean + F::lit(alpha) * stats.std, window))
    }

    pub fn score(&mut self, value: Option<F>) -> F {
        match value {
            Some(v) if v > self.tau => self.run += 1,
            _ => self.run = 0,
        }
        if self.run >= self.window {
            F::one()
        } else {
            F::zero()
        }
    }
}

/// CbF state: fires once `window` consecutive observations are missing.
#[derive(Clone, Debug, PartialEq)]
pub struct MissingRunRule {
    pub window: usize,
    pub run: usize,
}

impl MissingRunRule {
    pub fn new(window: usize) -> Self {
        Self { window, run: 0 }
    }

    pub fn score<F: Scalar>(&mut self, value: Option<F>) -> F {
        if value.is_none() {
            self.run += 1;
        } else {
            self.run = 0;
        }
        if self.run >= self.window {
            F::one()
        } else {
            F::zero()
        }
    }
}

/// SubNN state: the standardized history (whose stride-1 windows form the
/// subsequence set) and a ring buffer of the live window.
#[derive(Clone, Debug)]
pub struct SubNnScorer<F> {
    pub stats: HistoryStats<F>,
    pub window: usize,
    history: Vec<F>,
    ring: VecDeque<Option<F>>,
    live: Vec<F>,
    last_best: Option<usize>,
}

impl<F: Scalar> SubNnScorer<F> {
    /// Standardizes the history and indexes its `T - window + 1` subsequences.
    ///
    /// Missing history values are forward-filled; leading gaps take the mean
    /// (0 after standardization). The live window starts with the history
    /// tail, so scoring begins at the first stream step.
    pub fn from_history(history: &[Option<f64>], window: usize) -> Result<Self> {
        if window == 0 {
            return Err(MelodyError::FeaturizerInit("SubNN window must be >= 1".into()));
        }
        if history.len() < window {
            return Err(MelodyError::FeaturizerInit(format!(
                "SubNN window {window} exceeds history length {}",
                history.len()
            )));
        }
        let stats = HistoryStats::<F>::from_history(history)?;
        let mut last = F::zero();
        let filled = history
            .iter()
            .map(|v| {
                if let Some(v) = v {
                    last = stats.standardize(F::lit(*v));
                }
                last
            })
            .collect();
        // the live window ending at the first stream step covers the last
        // window - 1 history values
        let mut ring = VecDeque::with_capacity(window);
        ring.extend(
            history[history.len() + 1 - window..]
                .iter()
                .map(|v| v.map(|x| stats.standardize(F::lit(x)))),
        );
        Ok(Self {
            stats,
            window,
            history: filled,
            ring,
            live: Vec::with_capacity(window),
            last_best: None,
        })
    }

    /// Number of subsequences in the reference set.
    pub fn num_subsequences(&self) -> usize {
        self.history.len() + 1 - self.window
    }

    pub fn subsequence(&self, i: usize) -> &[F] {
        &self.history[i..i + self.window]
    }

    pub fn score(&mut self, value: Option<F>) -> F {
        if self.ring.len() == self.window {
            self.ring.pop_front();
        }
        self.ring.push_back(value.map(|v| self.stats.standardize(v)));
        if self.ring.len() < self.window {
            return F::zero();
        }
        if !fill_window(&self.ring, &mut self.live) {
            return F::zero();
        }
        let (best, d2) = self.nearest(&self.live);
        self.last_best = Some(best);
        d2.sqrt()
    }

    /// Exact nearest neighbor with early abandoning. The search starts at the
    /// successor of the previous match, which is usually close.
    fn nearest(&self, query: &[F]) -> (usize, F) {
        let n = self.num_subsequences();
        let start = self.last_best.map_or(0, |b| (b + 1) % n);
        let mut best = start;
        let mut best_d2 = sq_dist(query, self.subsequence(start));
        for i in (0..n).filter(|&i| i != start) {
            if let Some(d2) = sq_dist_bounded(query, self.subsequence(i), best_d2) {
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = i;
                }
            }
        }
        (best, best_d2)
    }
}

/// Imputes the live window: forward-fill, leading gaps back-filled from the
/// first present value. Returns `false` when every value is missing.
fn fill_window<F: Scalar>(ring: &VecDeque<Option<F>>, out: &mut Vec<F>) -> bool {
    let Some(first) = ring.iter().flatten().next().copied() else {
        return false;
    };
    out.clear();
    let mut last = first;
    for v in ring {
        if let Some(v) = v {
            last = *v;
        }
        out.push(last);
    }
    true
}

#[inline]
fn sq_dist<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

/// Squared distance, or `None` as soon as the partial sum exceeds `bound`.
#[inline]
fn sq_dist_bounded<F: Scalar>(a: &[F], b: &[F], bound: F) -> Option<F> {
    let mut acc = F::zero();
    for (ca, cb) in a.chunks(8).zip(b.chunks(8)) {
        for (x, y) in ca.iter().zip(cb) {
            let d = *x - *y;
            acc += d * d;
        }
        if acc > bound {
            return None;
        }
    }
    Some(acc)
}

/// MD state: ring buffer of the last `window` standardized values.
#[derive(Clone, Debug)]
pub struct MedianForecaster<F> {
    pub stats: HistoryStats<F>,
    pub window: usize,
    ring: VecDeque<F>,
    last: Option<F>,
    values: Vec<F>,
    diffs: Vec<F>,
    scratch: Vec<F>,
}

impl<F: Scalar> MedianForecaster<F> {
    /// Buffer primed with the last `window` history values (standardized,
    /// gaps carried forward), so forecasts start at the first stream step.
    pub fn from_history(history: &[Option<f64>], window: usize) -> Result<Self> {
        let mut m = Self::with_stats(HistoryStats::from_history(history)?, window);
        for v in history {
            m.push(v.map(|x| m.stats.standardize(F::lit(x))));
        }
        Ok(m)
    }

    /// Empty buffer; scores are 0 until `window` values have been seen.
    pub fn with_stats(stats: HistoryStats<F>, window: usize) -> Self {
        Self {
            stats,
            window,
            ring: VecDeque::with_capacity(window),
            last: None,
            values: Vec::with_capacity(window),
            diffs: Vec::with_capacity(window),
            scratch: Vec::with_capacity(window),
        }
    }

    /// `mobs + (window / 2) * mdif` over the current buffer, once it is full.
    pub fn forecast(&mut self) -> Option<F> {
        if self.ring.len() < self.window {
            return None;
        }
        self.values.clear();
        self.values.extend(self.ring.iter().copied());
        self.diffs.clear();
        self.diffs.extend(self.values.windows(2).map(|w| w[1] - w[0]));
        let m_obs = median(&self.values, &mut self.scratch);
        let m_dif = if self.diffs.is_empty() {
            F::zero()
        } else {
            median(&self.diffs, &mut self.scratch)
        };
        Some(m_obs + F::lit(self.window as f64 / 2.0) * m_dif)
    }

    pub fn score(&mut self, value: Option<F>) -> F {
        let x = value.map(|v| self.stats.standardize(v));
        let s = match x {
            Some(x) => self.forecast().map_or(F::zero(), |xh| (x - xh).abs()),
            None => F::zero(),
        };
        self.push(x);
        s
    }

    /// Appends a standardized value; a gap repeats the last value so the
    /// buffer keeps its cadence.
    fn push(&mut self, x: Option<F>) {
        let Some(x) = x.or(self.last) else { return };
        self.last = Some(x);
        if self.ring.len() == self.window {
            self.ring.pop_front();
        }
        self.ring.push_back(x);
    }
}

#[derive(Clone, Debug)]
pub enum Scorer<F> {
    Threshold(ThresholdRule<F>),
    MissingRun(MissingRunRule),
    SubNn(SubNnScorer<F>),
    Median(MedianForecaster<F>),
}

/// Online state of one featurizer instance bound to one series.
#[derive(Clone, Debug)]
pub struct InstanceState<F> {
    pub scorer: Scorer<F>,
    last_t: Option<i64>,
}

impl<F: Scalar> InstanceState<F> {
    pub fn new(scorer: Scorer<F>) -> Self {
        Self { scorer, last_t: None }
    }

    /// Consumes one observation and returns its score.
    pub fn step(&mut self, obs: Observation) -> Result<F> {
        if let Some(last) = self.last_t {
            if obs.t <= last {
                return Err(MelodyError::OutOfOrder { last, got: obs.t });
            }
        }
        self.last_t = Some(obs.t);
        Ok(self.score(obs.value.map(F::lit)))
    }

    /// Scores a value without timestamp bookkeeping.
    pub fn score(&mut self, value: Option<F>) -> F {
        match &mut self.scorer {
            Scorer::Threshold(r) => r.score(value),
            Scorer::MissingRun(r) => r.score(value),
            Scorer::SubNn(s) => s.score(value),
            Scorer::Median(m) => m.score(value),
        }
    }
}

/// The static meta-data features, passed through unchanged.
pub fn extract_meta<F: Scalar>(entity: &EntityRecord) -> Result<[F; META_FEATURES]> {
    if entity.meta.len() != META_FEATURES {
        return Err(MelodyError::validation(
            &entity.id,
            format!("expected {META_FEATURES} meta features, got {}", entity.meta.len()),
        ));
    }
    Ok(std::array::from_fn(|i| F::lit(entity.meta[i])))
}
