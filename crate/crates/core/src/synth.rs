// SPDX-License-Identifier: Apache-2.0

//! Synthetic deployment benchmark and the evaluation harness.
//!
//! [`generate`] builds heterogeneous entities (random metric subsets, one to
//! three services per metric, per-entity levels and noise) and injects
//! anomalies into the post-launch stream of a chosen share of them.
//! [`run_experiment`] trains every model variant on identical seeded
//! 60/20/20 splits and reports test metrics at the best validation-F1
//! threshold.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::entity::{Dataset, EntityRecord, LabeledDataset, LabelingScheme, MetricCatalog, Series, SeriesKey, META_FEATURES};
use crate::error::{MelodyError, Result};
use crate::featurizers::{FeaturizerKind, Registry};
use crate::gbdt::{self, GbdtConfig};
use crate::hybrid::{
    calibrate, sequential_thresholds, train_ensemble, CombineMode, Ensemble, HybridConfig, HybridModel, MemberScores,
    PipelineSpec, Thresholds, TrainingSet,
};
use crate::metrics::{select_threshold_gated, Confusion, Metrics};
use crate::pipeline::{assemble, extract_raw_features, FeatureNormalizer, FeatureSchema, FeatureVector, RawFeatures};
use crate::scalar::Scalar;
use crate::semidoc::{Encoder, OneClassMode, SemiDocModel};
use crate::stream::{open_session, SessionInit, StepInput, ValueObs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    /// Sustained shift of one load metric by several standard deviations.
    LevelShift,
    /// Repeated short spikes on one load metric.
    SpikeTrain,
    /// Heartbeat (and availability) stop reporting.
    MissingRun,
    /// Error-type metric jumps past its absolute alert level.
    ErrorBurst,
    /// Moderate joint drift of the latency metrics.
    Degradation,
}

impl InjectionKind {
    pub const ALL: [InjectionKind; 5] = [
        Self::LevelShift,
        Self::SpikeTrain,
        Self::MissingRun,
        Self::ErrorBurst,
        Self::Degradation,
    ];
}

/// Relative frequency of each injection kind among anomalous entities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionMix {
    pub level_shift: f64,
    pub spike_train: f64,
    pub missing_run: f64,
    pub error_burst: f64,
    pub degradation: f64,
}

impl Default for InjectionMix {
    fn default() -> Self {
        Self {
            level_shift: 0.2,
            spike_train: 0.15,
            missing_run: 0.25,
            error_burst: 0.25,
            degradation: 0.15,
        }
    }
}

impl InjectionMix {
    fn weights(&self) -> [f64; 5] {
        [
            self.level_shift,
            self.spike_train,
            self.missing_run,
            self.error_burst,
            self.degradation,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Share of labeled entities that receive an injection.
    pub anomaly_rate: f64,
    /// Share of unlabeled entities that are truly normal.
    pub unlabeled_purity: f64,
    /// Probability that a labeled entity's label is flipped.
    pub label_noise: f64,
    /// Share of normal entities with a benign traffic surge.
    pub benign_rate: f64,
    pub t_history: usize,
    /// Mean of the geometric stream-length distribution (minimum 1).
    pub mean_stream_len: f64,
    pub max_stream_len: usize,
    /// Inclusive range of distinct metrics per entity (heartbeat always included).
    pub metrics_per_entity: (usize, usize),
    /// Probabilities of 1, 2 and 3 services per metric.
    pub services_per_metric: [f64; 3],
    /// Minutes per seasonal cycle.
    pub season_period: f64,
    pub injection: InjectionMix,
    pub judges: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_labeled: 600,
            n_unlabeled: 600,
            anomaly_rate: 0.2,
            unlabeled_purity: 0.98,
            label_noise: 0.02,
            benign_rate: 0.1,
            t_history: 720,
            mean_stream_len: 16.0,
            max_stream_len: 120,
            metrics_per_entity: (6, 22),
            services_per_metric: [0.6, 0.3, 0.1],
            season_period: 1440.0,
            injection: InjectionMix::default(),
            judges: 3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(MelodyError::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("anomaly_rate", self.anomaly_rate)?;
        unit("unlabeled_purity", self.unlabeled_purity)?;
        unit("label_noise", self.label_noise)?;
        unit("benign_rate", self.benign_rate)?;
        if self.t_history < 2 {
            return Err(MelodyError::Config("t_history must be at least 2".into()));
        }
        if self.mean_stream_len < 1.0 || self.max_stream_len == 0 {
            return Err(MelodyError::Config("stream lengths must be at least 1".into()));
        }
        let (lo, hi) = self.metrics_per_entity;
        if lo == 0 || lo > hi {
            return Err(MelodyError::Config(format!("bad metrics_per_entity range {lo}..={hi}")));
        }
        let w = self.injection.weights();
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
            return Err(MelodyError::Config("injection mix needs non-negative weights with a positive sum".into()));
        }
        if self.services_per_metric.iter().any(|&x| x < 0.0) || self.services_per_metric.iter().sum::<f64>() <= 0.0 {
            return Err(MelodyError::Config("services_per_metric needs a positive weight".into()));
        }
        if self.judges == 0 {
            return Err(MelodyError::Config("at least one judge is needed".into()));
        }
        Ok(())
    }
}

/// Generator-side truth for one entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityTruth {
    pub id: String,
    pub labeled: bool,
    pub injection: Option<InjectionKind>,
    pub benign_surge: bool,
    pub label_flipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub truth: Vec<EntityTruth>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    /// Non-negative level with relative noise and seasonality.
    Gauge { level: f64, cv: f64, season: f64, cap: Option<f64> },
    /// Small non-negative fraction.
    Rate { level: f64, sd: f64 },
    /// Poisson counts.
    Count { lambda: f64 },
    /// Constant 1 while reporting.
    Heartbeat,
    /// Close to 1.
    Availability,
}

fn shape_of(metric: &str) -> Shape {
    let g = |level, cv, season, cap| Shape::Gauge { level, cv, season, cap };
    match metric {
        "cpu_utilization" => g(35.0, 0.08, 0.25, Some(100.0)),
        "memory_utilization" => g(55.0, 0.03, 0.05, Some(100.0)),
        "disk_utilization" => g(40.0, 0.01, 0.0, Some(100.0)),
        "threads" => g(200.0, 0.05, 0.1, None),
        "latency_p50" => g(20.0, 0.06, 0.15, None),
        "latency_p90" => g(45.0, 0.08, 0.15, None),
        "latency_p99" => g(120.0, 0.12, 0.15, None),
        "request_count" => g(5000.0, 0.06, 0.35, None),
        "heap_usage" => g(60.0, 0.05, 0.05, Some(100.0)),
        "gc_pause" => g(8.0, 0.15, 0.05, None),
        "connection_count" => g(300.0, 0.05, 0.3, None),
        "queue_depth" => g(10.0, 0.2, 0.2, None),
        "network_in" => g(800.0, 0.07, 0.35, None),
        "network_out" => g(1200.0, 0.07, 0.35, None),
        "fault_rate" => Shape::Rate { level: 0.004, sd: 0.002 },
        "error_rate" => Shape::Rate { level: 0.006, sd: 0.003 },
        "error_count_4xx" => Shape::Count { lambda: 12.0 },
        "error_count_5xx" => Shape::Count { lambda: 1.5 },
        "throttle_count" => Shape::Count { lambda: 3.0 },
        "timeout_count" => Shape::Count { lambda: 0.8 },
        "heartbeat" => Shape::Heartbeat,
        "availability" => Shape::Availability,
        _ => g(100.0, 0.1, 0.1, None),
    }
}

const LOAD_METRICS: [&str; 9] = [
    "cpu_utilization",
    "memory_utilization",
    "threads",
    "latency_p50",
    "latency_p90",
    "latency_p99",
    "heap_usage",
    "gc_pause",
    "queue_depth",
];
const ERROR_METRICS: [&str; 6] = [
    "fault_rate",
    "error_rate",
    "error_count_5xx",
    "error_count_4xx",
    "throttle_count",
    "timeout_count",
];
const LATENCY_METRICS: [&str; 3] = ["latency_p50", "latency_p90", "latency_p99"];
const TRAFFIC_METRICS: [&str; 4] = ["request_count", "network_in", "network_out", "connection_count"];
const SURGE_METRICS: [&str; 5] = [
    "request_count",
    "network_in",
    "network_out",
    "connection_count",
    "cpu_utilization",
];

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

struct SeriesGen {
    shape: Shape,
    scale: f64,
    noise: f64,
    phase: f64,
    missing: f64,
}

impl SeriesGen {
    fn new(metric: &str, rng: &mut impl Rng) -> Self {
        let spread = LogNormal::new(0.0, 0.4).expect("valid lognormal");
        Self {
            shape: shape_of(metric),
            scale: spread.sample(rng),
            noise: rng.random_range(0.6..1.6),
            phase: rng.random_range(0.0..1.0),
            missing: rng.random_range(0.0..0.01),
        }
    }

    fn value(&self, t: usize, period: f64, rng: &mut impl Rng) -> f64 {
        let season = (std::f64::consts::TAU * (t as f64 / period + self.phase)).sin();
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        match self.shape {
            Shape::Gauge { level, cv, season: amp, cap } => {
                let base = level * self.scale * (1.0 + amp * season);
                let v = (base * (1.0 + cv * self.noise * z)).max(0.0);
                cap.map_or(v, |c| v.min(c))
            }
            Shape::Rate { level, sd } => (level * self.scale + sd * self.noise * z).max(0.0),
            Shape::Count { lambda } => {
                let l = (lambda * self.scale * (1.0 + 0.2 * season)).max(1e-3);
                Poisson::new(l).expect("positive rate").sample(rng)
            }
            Shape::Heartbeat => 1.0,
            Shape::Availability => (1.0 - 0.001 * self.noise * z.abs()).clamp(0.0, 1.0),
        }
    }
}

fn history_std(xs: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    if v.len() < 2 {
        return 1.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    var.sqrt().max(1e-6)
}

/// Deterministic dataset generation; the seed fixes every draw.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let catalog = MetricCatalog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_labeled + cfg.n_unlabeled;

    // exact anomaly counts, then shuffled positions
    let n_lab_anom = (cfg.n_labeled as f64 * cfg.anomaly_rate).round() as usize;
    let n_unl_anom = (cfg.n_unlabeled as f64 * (1.0 - cfg.unlabeled_purity)).round() as usize;
    let mut lab_flags: Vec<bool> = (0..cfg.n_labeled).map(|i| i < n_lab_anom).collect();
    let mut unl_flags: Vec<bool> = (0..cfg.n_unlabeled).map(|i| i < n_unl_anom).collect();
    lab_flags.shuffle(&mut rng);
    unl_flags.shuffle(&mut rng);

    let mix = cfg.injection.weights();
    let mix_total: f64 = mix.iter().sum();
    let stream_dist = Geometric::new(1.0 / cfg.mean_stream_len).expect("valid geometric");
    let svc_total: f64 = cfg.services_per_metric.iter().sum();
    let others: Vec<&str> = catalog
        .names()
        .iter()
        .map(String::as_str)
        .filter(|m| *m != "heartbeat")
        .collect();

    let mut dataset = Dataset::new(cfg.t_history, catalog.clone());
    let mut truth = Vec::with_capacity(n);
    for idx in 0..n {
        let labeled = idx < cfg.n_labeled;
        let anomalous = if labeled {
            lab_flags[idx]
        } else {
            unl_flags[idx - cfg.n_labeled]
        };
        let injection = anomalous.then(|| {
            let mut u = rng.random_range(0.0..mix_total);
            let mut pick = InjectionKind::ALL[4];
            for (k, &w) in InjectionKind::ALL.iter().zip(&mix) {
                if u < w {
                    pick = *k;
                    break;
                }
                u -= w;
            }
            pick
        });
        let benign = !anomalous && rng.random_bool(cfg.benign_rate);

        // metric subset
        let (lo, hi) = cfg.metrics_per_entity;
        let k = rng.random_range(lo..=hi.min(others.len() + 1)).max(1);
        let mut metrics: BTreeSet<&str> = others.choose_multiple(&mut rng, k - 1).copied().collect();
        metrics.insert("heartbeat");
        let needed: &[&str] = match injection {
            Some(InjectionKind::LevelShift | InjectionKind::SpikeTrain) => &LOAD_METRICS,
            Some(InjectionKind::ErrorBurst) => &ERROR_METRICS,
            Some(InjectionKind::Degradation) => &LATENCY_METRICS,
            _ => &[],
        };
        if !needed.is_empty() && !needed.iter().any(|m| metrics.contains(m)) {
            metrics.insert(needed.choose(&mut rng).expect("non-empty"));
        }
        if benign && !TRAFFIC_METRICS.iter().any(|m| metrics.contains(m)) {
            metrics.insert(TRAFFIC_METRICS.choose(&mut rng).expect("non-empty"));
        }

        let mut stream_len = (1 + stream_dist.sample(&mut rng) as usize).min(cfg.max_stream_len);
        if matches!(injection, Some(InjectionKind::MissingRun)) {
            stream_len = stream_len.max(8);
        }

        let mut series = Vec::new();
        for &m in &metrics {
            let mut u = rng.random_range(0.0..svc_total);
            let mut n_svc = 3;
            for (i, &w) in cfg.services_per_metric.iter().enumerate() {
                if u < w {
                    n_svc = i + 1;
                    break;
                }
                u -= w;
            }
            for s in 0..n_svc {
                let gen = SeriesGen::new(m, &mut rng);
                let total = cfg.t_history + stream_len;
                let mut values = Vec::with_capacity(total);
                for t in 0..total {
                    let v = if rng.random_bool(gen.missing) {
                        None
                    } else {
                        Some(round4(gen.value(t, cfg.season_period, &mut rng)))
                    };
                    values.push(v);
                }
                let stream = values.split_off(cfg.t_history);
                series.push(Series {
                    key: SeriesKey::new(format!("svc{s}"), catalog.id(m).expect("catalog metric")),
                    history: values,
                    stream,
                });
            }
        }

        if let Some(kind) = injection {
            inject(kind, &mut series, &catalog, &mut rng);
        }
        if benign {
            // a traffic surge lifts every traffic series and the CPU that serves it
            let k = rng.random_range(4.0..8.0);
            for i in series_of(&series, &catalog, &SURGE_METRICS) {
                let shift = k * history_std(&series[i].history);
                for v in series[i].stream.iter_mut().flatten() {
                    *v = round4(*v + shift);
                }
            }
        }

        let meta = meta_features(&series, anomalous, &mut rng);
        let mut flipped = false;
        let label_scores = if labeled {
            let mut y = anomalous;
            if rng.random_bool(cfg.label_noise) {
                y = !y;
                flipped = true;
            }
            vec![if y { 3 } else { 0 }; cfg.judges]
        } else {
            Vec::new()
        };
        let id = format!("e{idx:05}");
        truth.push(EntityTruth {
            id: id.clone(),
            labeled,
            injection,
            benign_surge: benign,
            label_flipped: flipped,
        });
        dataset.entities.push(EntityRecord {
            id,
            series,
            meta,
            label_scores,
        });
    }
    Ok(SynthOutput { dataset, truth })
}

fn series_of(series: &[Series], catalog: &MetricCatalog, names: &[&str]) -> Vec<usize> {
    series
        .iter()
        .enumerate()
        .filter(|(_, s)| names.contains(&catalog.name(s.key.metric)))
        .map(|(i, _)| i)
        .collect()
}

fn inject(kind: InjectionKind, series: &mut [Series], catalog: &MetricCatalog, rng: &mut impl Rng) {
    let len = series[0].stream.len();
    let start = rng.random_range(0..len.div_ceil(3).max(1));
    match kind {
        InjectionKind::LevelShift => {
            let &i = series_of(series, catalog, &LOAD_METRICS).choose(rng).expect("load metric ensured");
            let shift = rng.random_range(4.0..8.0) * history_std(&series[i].history);
            for v in series[i].stream[start..].iter_mut().flatten() {
                *v = round4(*v + shift);
            }
        }
        InjectionKind::SpikeTrain => {
            let &i = series_of(series, catalog, &LOAD_METRICS).choose(rng).expect("load metric ensured");
            let sd = history_std(&series[i].history);
            let every = rng.random_range(2..=4);
            for (k, v) in series[i].stream[start..].iter_mut().enumerate() {
                if k % every == 0 {
                    let base = v.unwrap_or(0.0);
                    *v = Some(round4(base + rng.random_range(6.0..10.0) * sd));
                }
            }
        }
        InjectionKind::MissingRun => {
            let start = rng.random_range(0..=len - 6);
            for i in series_of(series, catalog, &["heartbeat", "availability"]) {
                for v in &mut series[i].stream[start..] {
                    *v = None;
                }
            }
        }
        InjectionKind::ErrorBurst => {
            let errors = series_of(series, catalog, &ERROR_METRICS);
            let &first = errors.choose(rng).expect("error metric ensured");
            // failures surface in several error counters of the same service at once
            let hit: Vec<usize> = errors
                .into_iter()
                .filter(|&i| i == first || (series[i].key.service == series[first].key.service && rng.random_bool(0.5)))
                .collect();
            for i in hit {
                let metric = catalog.name(series[i].key.metric);
                for v in &mut series[i].stream[start..] {
                    let burst = match metric {
                        "fault_rate" | "error_rate" => rng.random_range(0.08..0.3),
                        "error_count_5xx" => rng.random_range(15.0..60.0),
                        "error_count_4xx" => rng.random_range(80.0..200.0),
                        "throttle_count" => rng.random_range(30.0..90.0),
                        _ => rng.random_range(8.0..30.0),
                    };
                    *v = Some(round4(burst));
                }
            }
        }
        InjectionKind::Degradation => {
            let k = rng.random_range(2.0..3.5);
            for i in series_of(series, catalog, &LATENCY_METRICS) {
                let shift = k * history_std(&series[i].history);
                for v in series[i].stream[start..].iter_mut().flatten() {
                    *v = round4(*v + shift);
                }
            }
        }
    }
}

/// Launch-time context: size, scheduling and change descriptors.
fn meta_features(series: &[Series], anomalous: bool, rng: &mut impl Rng) -> Vec<f64> {
    let services: BTreeSet<&str> = series.iter().map(|s| s.key.service.as_str()).collect();
    let change = Normal::new(if anomalous { 4.3 } else { 4.0 }, 1.0).expect("valid normal");
    let meta = vec![
        series.len() as f64,
        services.len() as f64,
        rng.random_range(0.0..24.0_f64).floor(),
        rng.random_range(0.0..7.0_f64).floor(),
        round4(change.sample(rng)),
        f64::from(u8::from(rng.random_bool(0.3))),
        round4(rng.random_range(0.0..0.2)),
        rng.random_range(0.0..5.0_f64).floor(),
    ];
    debug_assert_eq!(meta.len(), META_FEATURES);
    meta
}

/// Raw features of a labeled dataset, extracted once.
#[derive(Clone, Debug)]
pub struct Prepared<F> {
    pub registry: Registry,
    pub schema: FeatureSchema,
    pub catalog: MetricCatalog,
    pub t_history: usize,
    pub ids: Vec<String>,
    pub labeled: Vec<RawFeatures<F>>,
    pub labels: Vec<bool>,
    pub unlabeled: Vec<RawFeatures<F>>,
}

pub fn prepare<F: Scalar>(data: &LabeledDataset, registry: &Registry) -> Result<Prepared<F>> {
    registry.check_catalog(&data.catalog)?;
    let labeled = data
        .labeled
        .iter()
        .map(|l| extract_raw_features(&l.entity, registry, &data.catalog))
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = data
        .unlabeled
        .iter()
        .map(|e| extract_raw_features(e, registry, &data.catalog))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        registry: registry.clone(),
        schema: FeatureSchema::from_registry(registry),
        catalog: data.catalog.clone(),
        t_history: data.t_history,
        ids: data.labeled.iter().map(|l| l.entity.id.clone()).collect(),
        labeled,
        labels: data.labeled.iter().map(|l| l.label).collect(),
        unlabeled,
    })
}

impl<F: Scalar> Prepared<F> {
    /// Restricts to the registry instances kept by `keep`.
    pub fn project(&self, keep: impl Fn(&crate::featurizers::FeaturizerSpec) -> bool) -> Self {
        let mask: Vec<bool> = self.registry.instances.iter().map(&keep).collect();
        let registry = self.registry.filtered(&keep);
        let sel = |rows: &[RawFeatures<F>]| rows.iter().map(|r| r.select_instances(|i| mask[i])).collect();
        Self {
            schema: FeatureSchema::from_registry(&registry),
            registry,
            catalog: self.catalog.clone(),
            t_history: self.t_history,
            ids: self.ids.clone(),
            labeled: sel(&self.labeled),
            labels: self.labels.clone(),
            unlabeled: sel(&self.unlabeled),
        }
    }

    /// Drops the rule-based instances.
    pub fn without_rules(&self) -> Self {
        self.project(|s| !s.kind().is_rule())
    }
}

/// Index sets of one train/validation/test split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn has_both(idx: &[usize], labels: &[bool]) -> bool {
    let pos = idx.iter().filter(|&&i| labels[i]).count();
    pos > 0 && pos < idx.len()
}

/// `runs` random 60/20/20 splits. A split with a single-class part is
/// redrawn with the next seed.
pub fn make_splits(labels: &[bool], runs: usize, seed: u64) -> Result<Vec<Split>> {
    let n = labels.len();
    if n < 5 {
        return Err(MelodyError::Data(format!("{n} labeled entities are too few to split")));
    }
    let mut out = Vec::with_capacity(runs);
    let mut attempt = 0u64;
    while out.len() < runs {
        if attempt > 1000 + 100 * runs as u64 {
            return Err(MelodyError::Data("could not draw splits with both classes in every part".into()));
        }
        let s = crate::hybrid::member_seed(seed, 100, attempt);
        attempt += 1;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        let n_train = (n as f64 * 0.6).round() as usize;
        let n_val = (n as f64 * 0.2).round() as usize;
        let test = idx.split_off(n_train + n_val);
        let validation = idx.split_off(n_train);
        let split = Split {
            seed: s,
            train: idx,
            validation,
            test,
        };
        if [&split.train, &split.validation, &split.test]
            .iter()
            .all(|p| has_both(p, labels))
        {
            out.push(split);
        } else {
            log::info!("split seed {s} has a single-class part; redrawing");
        }
    }
    Ok(out)
}

/// Normalized rows of one split.
#[derive(Clone, Debug)]
pub struct SplitData<F> {
    pub normalizer: FeatureNormalizer<F>,
    pub train: Vec<FeatureVector<F>>,
    pub train_labels: Vec<bool>,
    pub validation: Vec<FeatureVector<F>>,
    pub validation_labels: Vec<bool>,
    pub test: Vec<FeatureVector<F>>,
    pub test_labels: Vec<bool>,
    pub unlabeled: Vec<FeatureVector<F>>,
}

impl<F: Scalar> SplitData<F> {
    /// Fits imputation and meta scaling on the training rows plus the
    /// unlabeled rows, then assembles every part.
    pub fn build(p: &Prepared<F>, split: &Split) -> Result<Self> {
        let fit_rows: Vec<RawFeatures<F>> = split
            .train
            .iter()
            .map(|&i| p.labeled[i].clone())
            .chain(p.unlabeled.iter().cloned())
            .collect();
        let normalizer = FeatureNormalizer::fit(&fit_rows, &p.schema)?;
        let rows = |idx: &[usize]| -> Result<Vec<FeatureVector<F>>> {
            idx.iter().map(|&i| assemble(&p.labeled[i], &normalizer, &p.schema)).collect()
        };
        let labels = |idx: &[usize]| idx.iter().map(|&i| p.labels[i]).collect::<Vec<_>>();
        Ok(Self {
            train: rows(&split.train)?,
            train_labels: labels(&split.train),
            validation: rows(&split.validation)?,
            validation_labels: labels(&split.validation),
            test: rows(&split.test)?,
            test_labels: labels(&split.test),
            unlabeled: p
                .unlabeled
                .iter()
                .map(|r| assemble(r, &normalizer, &p.schema))
                .collect::<Result<_>>()?,
            normalizer,
        })
    }

    pub fn training_set(&self) -> TrainingSet<'_, F> {
        TrainingSet {
            train: &self.train,
            train_labels: &self.train_labels,
            unlabeled: &self.unlabeled,
            validation: &self.validation,
            validation_labels: &self.validation_labels,
        }
    }
}

/// Scores of one variant on a split. Entities outside the gate are
/// predicted normal whatever their score.
#[derive(Clone, Debug)]
pub struct VariantScores<F> {
    pub validation: Vec<F>,
    pub validation_gate: Vec<bool>,
    pub test: Vec<F>,
    pub test_gate: Vec<bool>,
    pub theta1: Option<F>,
}

impl<F: Scalar> VariantScores<F> {
    pub fn ungated(validation: Vec<F>, test: Vec<F>) -> Self {
        Self {
            validation_gate: vec![true; validation.len()],
            test_gate: vec![true; test.len()],
            validation,
            test,
            theta1: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub seed: u64,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta1: Option<f64>,
    pub validation_f1: f64,
    pub test: Metrics,
    pub seconds: f64,
}

/// Best-F1 threshold on validation, applied to test.
pub fn evaluate_scores<F: Scalar>(
    scores: &VariantScores<F>,
    validation_labels: &[bool],
    test_labels: &[bool],
) -> Result<(F, f64, Metrics)> {
    let choice = select_threshold_gated(&scores.validation, &scores.validation_gate, validation_labels)?;
    let predictions: Vec<bool> = scores
        .test
        .iter()
        .zip(&scores.test_gate)
        .map(|(&s, &g)| g && s >= choice.threshold)
        .collect();
    let c = Confusion::from_predictions(&predictions, test_labels);
    Ok((choice.threshold, choice.f1(), Metrics::from(c)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub splits: Vec<SplitResult>,
    pub mean: MeanMetrics,
}

impl VariantReport {
    fn new(name: &str, splits: Vec<SplitResult>) -> Self {
        let n = splits.len().max(1) as f64;
        let avg = |f: fn(&Metrics) -> f64| splits.iter().map(|s| f(&s.test)).sum::<f64>() / n;
        let mean = MeanMetrics {
            precision: avg(|m| m.precision),
            recall: avg(|m| m.recall),
            f1: avg(|m| m.f1),
            fpr: avg(|m| m.fpr),
        };
        Self {
            name: name.to_string(),
            splits,
            mean,
        }
    }
}

/// Runs a scoring recipe over every split.
pub fn evaluate<F: Scalar>(
    name: &str,
    prepared: &Prepared<F>,
    splits: &[Split],
    mut recipe: impl FnMut(&SplitData<F>, &Split) -> Result<VariantScores<F>>,
) -> Result<VariantReport> {
    let mut results = Vec::with_capacity(splits.len());
    for split in splits {
        let data = SplitData::build(prepared, split)?;
        let t0 = Instant::now();
        let scores = recipe(&data, split)?;
        let (threshold, vf1, test) = evaluate_scores(&scores, &data.validation_labels, &data.test_labels)?;
        results.push(SplitResult {
            seed: split.seed,
            threshold: threshold.as_f64(),
            theta1: scores.theta1.map(Scalar::as_f64),
            validation_f1: vf1,
            test,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(VariantReport::new(name, results))
}

/// Variant names in report order.
pub const SEMIDOC_ONLY: &str = "SemiDOC-only";
pub const GBDT_ONLY: &str = "GBDT-only";
pub const MELODY_M: &str = "MELODY-M";
pub const MELODY_S: &str = "MELODY-S";
pub const DEEP_SVDD: &str = "DeepSVDD-mode";
pub const MELODY_S_NO_RULES: &str = "MELODY-S (no rule features)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub hybrid: HybridConfig,
    pub scheme: LabelingScheme,
    pub runs: usize,
    pub seed: u64,
    pub deep_svdd: bool,
    pub ablation: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            hybrid: desk_hybrid(),
            scheme: LabelingScheme::Hard,
            runs: 5,
            seed: 2024,
            deep_svdd: true,
            ablation: true,
        }
    }
}

/// Hybrid settings for the desk-scale benchmark: full-size members with a
/// shorter epoch budget.
pub fn desk_hybrid() -> HybridConfig {
    let mut h = HybridConfig::default();
    h.semidoc.max_epochs = 200;
    h.semidoc.patience = 25;
    h.filter_recalls = vec![0.99, 0.95, 0.9, 0.85, 0.8];
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub labeled: usize,
    pub labeled_anomalies: usize,
    pub unlabeled: usize,
    pub excluded: usize,
    pub features: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetSummary,
    pub variants: Vec<VariantReport>,
    pub seconds: f64,
}

impl EvalReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        let _ = writeln!(
            s,
            "labeled {} ({} anomalous), unlabeled {}, excluded {}, features {}",
            d.labeled, d.labeled_anomalies, d.unlabeled, d.excluded, d.features
        );
        let _ = writeln!(
            s,
            "{:<30} {:>9} {:>9} {:>9} {:>9}",
            "variant", "precision", "recall", "f1", "fpr"
        );
        for v in &self.variants {
            let m = &v.mean;
            let _ = writeln!(
                s,
                "{:<30} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                v.name, m.precision, m.recall, m.f1, m.fpr
            );
        }
        let _ = writeln!(s, "runs {}, total {:.1}s", self.variants.first().map_or(0, |v| v.splits.len()), self.seconds);
        s
    }
}

/// Ensemble-derived variants sharing one set of trained members per split.
struct HybridRun<F> {
    val: Vec<MemberScores<F>>,
    test: Vec<MemberScores<F>>,
}

fn hybrid_run<F: Scalar>(data: &SplitData<F>, cfg: &HybridConfig, seed: u64) -> Result<(Ensemble<F>, HybridRun<F>)> {
    let cfg = HybridConfig { seed, ..cfg.clone() };
    let (ens, _) = train_ensemble(data.training_set(), &cfg)?;
    let val = data.validation.iter().map(|z| ens.member_scores(z)).collect::<Result<_>>()?;
    let test = data.test.iter().map(|z| ens.member_scores(z)).collect::<Result<_>>()?;
    Ok((ens, HybridRun { val, test }))
}

type Derive<'a, F> = dyn Fn(&HybridRun<F>, &[bool]) -> Result<VariantScores<F>> + 'a;

/// Sequential scores with the gate from the filter threshold.
fn sequential_scores<F: Scalar>(run: &HybridRun<F>, labels: &[bool], recalls: &[f64]) -> Result<VariantScores<F>> {
    let a = |v: &[MemberScores<F>]| v.iter().map(MemberScores::semidoc_mean).collect::<Vec<_>>();
    let b = |v: &[MemberScores<F>]| v.iter().map(MemberScores::gbdt_mean).collect::<Vec<_>>();
    let (va, ta) = (a(&run.val), a(&run.test));
    let vb = b(&run.val);
    let (theta1, _) = sequential_thresholds(&va, &vb, labels, recalls)?;
    Ok(VariantScores {
        validation_gate: va.iter().map(|&s| s >= theta1).collect(),
        test_gate: ta.iter().map(|&s| s >= theta1).collect(),
        validation: vb,
        test: b(&run.test),
        theta1: Some(theta1),
    })
}

/// Trains and evaluates every variant on identical splits.
pub fn run_experiment_on<F: Scalar>(prepared: &Prepared<F>, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let t0 = Instant::now();
    let splits = make_splits(&prepared.labels, cfg.runs, cfg.seed)?;
    let recall = &cfg.hybrid.filter_recalls;

    // one ensemble per split feeds four variants
    let mut runs = Vec::with_capacity(splits.len());
    let mut seconds = Vec::with_capacity(splits.len());
    for split in &splits {
        let data = SplitData::build(prepared, split)?;
        let s = Instant::now();
        let (_, run) = hybrid_run(&data, &cfg.hybrid, split.seed)?;
        seconds.push(s.elapsed().as_secs_f64());
        runs.push((data.validation_labels.clone(), data.test_labels.clone(), run));
    }
    let derived = |name: &str, f: &Derive<'_, F>| -> Result<VariantReport> {
        let mut results = Vec::new();
        for ((split, (vl, tl, run)), &sec) in splits.iter().zip(&runs).zip(&seconds) {
            let scores = f(run, vl)?;
            let (threshold, vf1, test) = evaluate_scores(&scores, vl, tl)?;
            results.push(SplitResult {
                seed: split.seed,
                threshold: threshold.as_f64(),
                theta1: scores.theta1.map(Scalar::as_f64),
                validation_f1: vf1,
                test,
                seconds: sec,
            });
        }
        Ok(VariantReport::new(name, results))
    };
    let pick = |f: fn(&MemberScores<F>) -> F| {
        move |run: &HybridRun<F>, _: &[bool]| -> Result<VariantScores<F>> {
            Ok(VariantScores::ungated(run.val.iter().map(f).collect(), run.test.iter().map(f).collect()))
        }
    };
    let mut variants = vec![
        derived(SEMIDOC_ONLY, &pick(MemberScores::semidoc_mean))?,
        derived(GBDT_ONLY, &pick(MemberScores::gbdt_mean))?,
        derived(MELODY_M, &pick(MemberScores::overall_mean))?,
        derived(MELODY_S, &|run, vl| sequential_scores(run, vl, recall))?,
    ];

    if cfg.deep_svdd {
        let mut h = cfg.hybrid.clone();
        h.semidoc.mode = OneClassMode::DeepSvdd;
        h.gbdt_members = 0;
        h.margin_grid.clear();
        variants.push(evaluate(DEEP_SVDD, prepared, &splits, |data, split| {
            let (_, run) = hybrid_run(data, &h, split.seed)?;
            pick(MemberScores::semidoc_mean)(&run, &data.validation_labels)
        })?);
    }
    if cfg.ablation {
        let reduced = prepared.without_rules();
        variants.push(evaluate(MELODY_S_NO_RULES, &reduced, &splits, |data, split| {
            let (_, run) = hybrid_run(data, &cfg.hybrid, split.seed)?;
            sequential_scores(&run, &data.validation_labels, recall)
        })?);
    }

    Ok(EvalReport {
        dataset: DatasetSummary {
            labeled: prepared.labels.len(),
            labeled_anomalies: prepared.labels.iter().filter(|&&y| y).count(),
            unlabeled: prepared.unlabeled.len(),
            excluded: 0,
            features: prepared.schema.dim(),
        },
        variants,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Generates the benchmark, extracts features once and runs every variant.
pub fn run_experiment<F: Scalar>(cfg: &ExperimentConfig, registry: &Registry) -> Result<EvalReport> {
    let out = generate(&cfg.synth)?;
    let data = out.dataset.partition(cfg.scheme)?;
    let excluded = data.excluded;
    let prepared = prepare::<F>(&data, registry)?;
    let mut report = run_experiment_on(&prepared, cfg)?;
    report.dataset.excluded = excluded;
    Ok(report)
}

/// Trains a deployable hybrid on all labeled entities: 80% for training,
/// 20% for early stopping and thresholds.
pub fn train_model<F: Scalar>(prepared: &Prepared<F>, cfg: &HybridConfig, seed: u64) -> Result<HybridModel<F>> {
    let n = prepared.labels.len();
    let mut split = None;
    for attempt in 0..1000u64 {
        let s = crate::hybrid::member_seed(seed, 200, attempt);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        let validation = idx.split_off((n as f64 * 0.8).round() as usize);
        if has_both(&idx, &prepared.labels) && has_both(&validation, &prepared.labels) {
            split = Some(Split {
                seed: s,
                train: idx,
                validation,
                test: Vec::new(),
            });
            break;
        }
    }
    let split = split.ok_or_else(|| MelodyError::Data("labeled set cannot be split with both classes".into()))?;
    let data = SplitData::build(prepared, &split)?;
    let (ens, _) = train_ensemble(data.training_set(), &HybridConfig { seed, ..cfg.clone() })?;
    let val: Vec<MemberScores<F>> = data.validation.iter().map(|z| ens.member_scores(z)).collect::<Result<_>>()?;
    let thresholds = calibrate(cfg.mode, &val, &data.validation_labels, &cfg.filter_recalls)?;
    HybridModel::new(
        ens,
        cfg.mode,
        thresholds,
        PipelineSpec {
            registry: prepared.registry.clone(),
            catalog: prepared.catalog.clone(),
            t_history: prepared.t_history,
            normalizer: data.normalizer,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyConfig {
    pub t_history: usize,
    pub window: usize,
    pub embed: usize,
    /// Stream offsets at which step latency is sampled.
    pub offsets: Vec<usize>,
    /// Steps timed at each offset.
    pub samples: usize,
    pub seed: u64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            t_history: 2880,
            window: 100,
            embed: 128,
            offsets: vec![100, 10_000],
            samples: 200,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyPoint {
    pub offset: usize,
    pub median_us: f64,
    pub p90_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub t_history: usize,
    pub lanes: usize,
    pub points: Vec<LatencyPoint>,
}

impl LatencyReport {
    pub fn median_at(&self, offset: usize) -> Option<f64> {
        self.points.iter().find(|p| p.offset == offset).map(|p| p.median_us)
    }
}

/// Entity with every catalog metric on one service, for latency runs.
pub fn latency_entity(t_history: usize, stream_len: usize, seed: u64) -> EntityRecord {
    let catalog = MetricCatalog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = catalog
        .names()
        .iter()
        .map(|m| {
            let gen = SeriesGen::new(m, &mut rng);
            let mut values: Vec<Option<f64>> = (0..t_history + stream_len)
                .map(|t| Some(round4(gen.value(t, 1440.0, &mut rng))))
                .collect();
            let stream = values.split_off(t_history);
            Series {
                key: SeriesKey::new("svc0", catalog.id(m).expect("catalog metric")),
                history: values,
                stream,
            }
        })
        .collect();
    EntityRecord {
        id: "latency".into(),
        series,
        meta: vec![22.0, 1.0, 12.0, 3.0, 4.0, 0.0, 0.05, 2.0],
        label_scores: Vec::new(),
    }
}

/// Median per-step session latency at each configured stream offset,
/// using a full-size model with random weights.
pub fn latency_bench<F: Scalar>(cfg: &LatencyConfig) -> Result<LatencyReport> {
    let registry = Registry::default().with_algorithm_windows(cfg.window, cfg.window);
    let catalog = MetricCatalog::default();
    let schema = FeatureSchema::from_registry(&registry);
    let max_offset = cfg.offsets.iter().copied().max().unwrap_or(0);
    let entity = latency_entity(cfg.t_history, max_offset + cfg.samples, cfg.seed);

    let raw = extract_raw_features::<F>(&latency_entity(cfg.t_history, 16, cfg.seed + 1), &registry, &catalog)?;
    let normalizer = FeatureNormalizer::fit(std::slice::from_ref(&raw), &schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = schema.dim();
    let semidoc = (0..3)
        .map(|_| SemiDocModel {
            encoder: Encoder::init(d, 128, cfg.embed, &mut rng),
            center: vec![F::lit(0.5); cfg.embed],
            radius: F::lit(cfg.embed as f64 / 4.0),
            mode: OneClassMode::SemiDoc,
            margin: 100.0,
            weight_decay: 1e-4,
            schema: schema.hash,
        })
        .collect();
    let rows: Vec<FeatureVector<F>> = (0..200)
        .map(|_| FeatureVector::new((0..d).map(|_| F::lit(rng.random_range(-2.0..2.0))).collect(), schema.hash))
        .collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.values[0] + r.values[1] > F::zero()).collect();
    let gbdt = (0..3)
        .map(|i| gbdt::fit(&rows, &labels, &GbdtConfig { seed: i, subsample: 0.8, ..GbdtConfig::default() }))
        .collect::<Result<Vec<_>>>()?;
    let model = HybridModel::new(
        Ensemble { semidoc, gbdt },
        CombineMode::Sequential,
        Thresholds {
            theta1: Some(F::lit(0.5)),
            theta: F::lit(0.5),
        },
        PipelineSpec {
            registry,
            catalog: catalog.clone(),
            t_history: cfg.t_history,
            normalizer,
        },
    )?;
    let model = Arc::new(model);
    let names = model.metrics.clone();
    let mut session = open_session(model, &SessionInit::from_entity(&entity, &names))?;
    let lanes = session.lanes();
    let mut points = Vec::new();
    let mut offsets = cfg.offsets.clone();
    offsets.sort_unstable();
    let mut step = 0usize;
    for &offset in &offsets {
        while step < offset {
            session.step(&StepInput::from_entity(&entity, &names, step))?;
            step += 1;
        }
        let mut times = Vec::with_capacity(cfg.samples);
        for _ in 0..cfg.samples {
            let input = StepInput::from_entity(&entity, &names, step);
            let t = Instant::now();
            session.step(&input)?;
            times.push(t.elapsed().as_secs_f64() * 1e6);
            step += 1;
        }
        times.sort_by(f64::total_cmp);
        points.push(LatencyPoint {
            offset,
            median_us: times[times.len() / 2],
            p90_us: times[(times.len() * 9) / 10],
        });
    }
    Ok(LatencyReport {
        t_history: cfg.t_history,
        lanes,
        points,
    })
}

/// Observations for stream step `step` with some series omitted.
pub fn sparse_step(entity: &EntityRecord, metric_names: &[String], step: usize, keep: impl Fn(usize) -> bool) -> StepInput {
    let full = StepInput::from_entity(entity, metric_names, step);
    StepInput {
        t: full.t,
        values: full
            .values
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, v): (usize, ValueObs)| v)
            .collect(),
    }
}

/// Count of featurizer kinds that exist in a registry, for reporting.
pub fn kind_counts(registry: &Registry) -> Vec<(FeaturizerKind, usize)> {
    [
        FeaturizerKind::Sbf,
        FeaturizerKind::Tbf,
        FeaturizerKind::Cbf,
        FeaturizerKind::SubNn,
        FeaturizerKind::Md,
    ]
    .into_iter()
    .map(|k| (k, registry.count(k)))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_labeled: 40,
            n_unlabeled: 10,
            anomaly_rate: 0.25,
            t_history: 120,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn exact_anomaly_count_and_determinism() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let injected = a.truth.iter().filter(|t| t.labeled && t.injection.is_some()).count();
        assert_eq!(injected, 10);
        for e in &a.dataset.entities {
            e.validate(120).unwrap();
        }
    }

    #[test]
    fn rejects_infeasible_rate() {
        let cfg = SynthConfig {
            anomaly_rate: 1.5,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(MelodyError::Config(_))));
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let labels: Vec<bool> = (0..50).map(|i| i % 5 == 0).collect();
        for s in make_splits(&labels, 5, 3).unwrap() {
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..50).collect::<Vec<_>>());
            assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (30, 10, 10));
        }
    }

    #[test]
    fn perfect_scorer_is_perfect() {
        let vl = [false, true, false, true];
        let tl = [true, false, false];
        let s = VariantScores::ungated(
            vl.iter().map(|&y| f64::from(u8::from(y))).collect(),
            tl.iter().map(|&y| f64::from(u8::from(y))).collect(),
        );
        let (_, vf1, m) = evaluate_scores(&s, &vl, &tl).unwrap();
        assert_eq!(vf1, 1.0);
        assert_eq!((m.precision, m.recall, m.f1, m.fpr), (1.0, 1.0, 1.0, 0.0));
    }
}
