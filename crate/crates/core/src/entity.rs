// SPDX-License-Identifier: Apache-2.0

//! Domain types for monitored entities and the JSONL dataset format.
//!
//! A dataset file starts with one header record declaring the history
//! length `T` and the metric catalog, followed by one entity per line:
//!
//! ```text
//! {"kind":"header","t_history":2880,"metrics":["cpu_utilization", ...]}
//! {"id":"dep-1","t_history":2880,"series":[{"service":"api","metric":"cpu_utilization","history":[...],"stream":[...]}],"meta":[...],"scores":[3,2]}
//! ```
//!
//! Missing observations are explicit `null`s.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MelodyError, Result};

/// Number of static configuration features attached to every entity.
pub const META_FEATURES: usize = 8;

/// Two days of minute-level observations.
pub const DEFAULT_T_HISTORY: usize = 2880;

/// Metric names of the default catalog. The order fixes the [`MetricId`]s.
pub const DEFAULT_METRICS: [&str; 22] = [
    "cpu_utilization",
    "memory_utilization",
    "threads",
    "latency_p50",
    "latency_p90",
    "latency_p99",
    "request_count",
    "disk_utilization",
    "heap_usage",
    "gc_pause",
    "connection_count",
    "queue_depth",
    "network_in",
    "network_out",
    "error_count_4xx",
    "error_count_5xx",
    "fault_rate",
    "error_rate",
    "throttle_count",
    "timeout_count",
    "heartbeat",
    "availability",
];

/// Index of a metric in a [`MetricCatalog`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MetricId(pub u16);

impl MetricId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Fixed, ordered set of metric names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricCatalog {
    names: Vec<String>,
    index: HashMap<String, MetricId>,
}

impl MetricCatalog {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(MelodyError::Config("metric catalog is empty".into()));
        }
        if names.len() > u16::MAX as usize {
            return Err(MelodyError::Config("metric catalog too large".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), MetricId(i as u16)).is_some() {
                return Err(MelodyError::Config(format!("duplicate metric {n:?} in catalog")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn id(&self, name: &str) -> Option<MetricId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: MetricId) -> &str {
        &self.names[id.index()]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl Default for MetricCatalog {
    fn default() -> Self {
        Self::new(DEFAULT_METRICS).expect("default catalog is valid")
    }
}

/// Identity of one univariate series within an entity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeriesKey {
    pub service: String,
    pub metric: MetricId,
}

impl SeriesKey {
    pub fn new(service: impl Into<String>, metric: MetricId) -> Self {
        Self {
            service: service.into(),
            metric,
        }
    }
}

/// A single (possibly missing) observation at minute `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub t: i64,
    pub value: Option<f64>,
}

impl Observation {
    pub fn new(t: i64, value: Option<f64>) -> Self {
        Self { t, value }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub key: SeriesKey,
    /// The `T` observations preceding launch.
    pub history: Vec<Option<f64>>,
    /// Observations after launch, at `t = T + 1, T + 2, ...`.
    pub stream: Vec<Option<f64>>,
}

/// One monitored entity (a deployment).
#[derive(Clone, Debug, PartialEq)]
pub struct EntityRecord {
    pub id: String,
    pub series: Vec<Series>,
    pub meta: Vec<f64>,
    pub label_scores: Vec<i8>,
}

impl EntityRecord {
    /// History length shared by every series.
    pub fn t_history(&self) -> usize {
        self.series.first().map_or(0, |s| s.history.len())
    }

    /// Number of post-launch steps.
    pub fn stream_len(&self) -> usize {
        self.series.first().map_or(0, |s| s.stream.len())
    }

    pub fn is_labeled(&self) -> bool {
        !self.label_scores.is_empty()
    }

    /// Checks the structural invariants against the dataset-level `T`.
    pub fn validate(&self, t_history: usize) -> Result<()> {
        let err = |m: String| MelodyError::validation(&self.id, m);
        if self.series.is_empty() {
            return Err(err("entity has no series".into()));
        }
        if self.meta.len() != META_FEATURES {
            return Err(err(format!(
                "expected {META_FEATURES} meta features, got {}",
                self.meta.len()
            )));
        }
        if let Some(v) = self.meta.iter().find(|v| !v.is_finite()) {
            return Err(err(format!("non-finite meta feature {v}")));
        }
        let n = self.stream_len();
        let mut seen = HashSet::with_capacity(self.series.len());
        for s in &self.series {
            if !seen.insert(&s.key) {
                return Err(err(format!(
                    "duplicate series for service {:?} metric #{}",
                    s.key.service, s.key.metric.0
                )));
            }
            if s.history.len() != t_history {
                return Err(err(format!(
                    "history of service {:?} has length {}, expected T={t_history}",
                    s.key.service,
                    s.history.len()
                )));
            }
            if s.stream.len() != n {
                return Err(err(format!(
                    "stream of service {:?} has length {}, expected {n}",
                    s.key.service,
                    s.stream.len()
                )));
            }
            if s
                .history
                .iter()
                .chain(&s.stream)
                .flatten()
                .any(|v| !v.is_finite())
            {
                return Err(err(format!("non-finite observation in service {:?}", s.key.service)));
            }
        }
        for &sc in &self.label_scores {
            if !(-1..=3).contains(&sc) {
                return Err(err(format!("label score {sc} outside -1..=3")));
            }
        }
        Ok(())
    }

    /// Binary label under `scheme`; `None` means unlabeled or excluded.
    pub fn binary_label(&self, scheme: LabelingScheme) -> Result<Option<bool>> {
        binarize(&self.label_scores, scheme)
            .map_err(|e| MelodyError::validation(&self.id, e.to_string()))
    }

    /// Observations of every series at post-launch step `step` (0-based).
    pub fn observations_at(&self, step: usize) -> impl Iterator<Item = (&SeriesKey, Observation)> + '_ {
        let t = (self.t_history() + 1 + step) as i64;
        self.series
            .iter()
            .map(move |s| (&s.key, Observation::new(t, s.stream[step])))
    }
}

/// How multiple judge scores in {-1, 0, 1, 2, 3} collapse to a binary label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelingScheme {
    /// Anomalous only if every judge gave 3.
    Hard,
    /// Anomalous if every judge gave 2 or 3.
    Soft,
    /// Like `Soft`, but only clear-cut normal sets are kept as normal.
    Naive,
}

impl FromStr for LabelingScheme {
    type Err = MelodyError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            "naive" => Ok(Self::Naive),
            other => Err(MelodyError::Config(format!("unknown labeling scheme {other:?}"))),
        }
    }
}

impl fmt::Display for LabelingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
            Self::Naive => "naive",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("label score {0} outside -1..=3")]
pub struct InvalidScore(pub i8);

/// Collapses judge scores into a binary label.
///
/// Returns `Ok(None)` for an empty score list and for entities excluded
/// under [`LabelingScheme::Naive`].
pub fn binarize(scores: &[i8], scheme: LabelingScheme) -> Result<Option<bool>, InvalidScore> {
    if let Some(&bad) = scores.iter().find(|s| !(-1..=3).contains(*s)) {
        return Err(InvalidScore(bad));
    }
    if scores.is_empty() {
        return Ok(None);
    }
    let all = |pred: fn(i8) -> bool| scores.iter().all(|&s| pred(s));
    Ok(match scheme {
        LabelingScheme::Hard => Some(all(|s| s == 3)),
        LabelingScheme::Soft => Some(all(|s| s >= 2)),
        LabelingScheme::Naive => {
            if all(|s| s >= 2) {
                Some(true)
            } else if all(|s| s == 0 || s == 1) {
                Some(false)
            } else {
                None
            }
        }
    })
}

/// A dataset as stored on disk, before labels are binarized.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub t_history: usize,
    pub catalog: MetricCatalog,
    pub entities: Vec<EntityRecord>,
}

impl Dataset {
    pub fn new(t_history: usize, catalog: MetricCatalog) -> Self {
        Self {
            t_history,
            catalog,
            entities: Vec::new(),
        }
    }

    /// Binarizes labels and partitions entities into labeled and unlabeled sets.
    pub fn partition(self, scheme: LabelingScheme) -> Result<LabeledDataset> {
        let mut out = LabeledDataset {
            t_history: self.t_history,
            catalog: self.catalog,
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            excluded: 0,
        };
        for e in self.entities {
            if !e.is_labeled() {
                out.unlabeled.push(e);
                continue;
            }
            match e.binary_label(scheme)? {
                Some(label) => out.labeled.push(LabeledEntity { entity: e, label }),
                None => out.excluded += 1,
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEntity {
    pub entity: EntityRecord,
    pub label: bool,
}

/// Labeled/unlabeled partition produced by [`load_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub t_history: usize,
    pub catalog: MetricCatalog,
    pub labeled: Vec<LabeledEntity>,
    pub unlabeled: Vec<EntityRecord>,
    /// Labeled entities dropped by the scheme (Naive with mixed or unsure scores).
    pub excluded: usize,
}

#[derive(Serialize, Deserialize)]
struct HeaderWire {
    kind: String,
    t_history: usize,
    metrics: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SeriesWire {
    service: String,
    metric: String,
    history: Vec<Option<f64>>,
    #[serde(default)]
    stream: Vec<Option<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EntityWire {
    id: String,
    t_history: usize,
    series: Vec<SeriesWire>,
    meta: Vec<f64>,
    #[serde(default)]
    scores: Vec<i8>,
}

/// Parses a JSONL dataset from any reader.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut dataset: Option<Dataset> = None;
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| MelodyError::Parse {
            line: line_no,
            message,
        };
        let Some(ds) = dataset.as_mut() else {
            let header: HeaderWire = serde_json::from_str(&line)
                .map_err(|e| parse_err(format!("expected dataset header: {e}")))?;
            if header.kind != "header" {
                return Err(parse_err(format!("expected header record, got kind {:?}", header.kind)));
            }
            let catalog = MetricCatalog::new(header.metrics).map_err(|e| parse_err(e.to_string()))?;
            dataset = Some(Dataset::new(header.t_history, catalog));
            continue;
        };
        let wire: EntityWire =
            serde_json::from_str(&line).map_err(|e| parse_err(format!("malformed entity: {e}")))?;
        if wire.t_history != ds.t_history {
            return Err(parse_err(format!(
                "entity {:?} declares T={} but the dataset header has T={}",
                wire.id, wire.t_history, ds.t_history
            )));
        }
        let mut series = Vec::with_capacity(wire.series.len());
        for s in wire.series {
            let metric = ds
                .catalog
                .id(&s.metric)
                .ok_or_else(|| parse_err(format!("entity {:?}: unknown metric {:?}", wire.id, s.metric)))?;
            series.push(Series {
                key: SeriesKey::new(s.service, metric),
                history: s.history,
                stream: s.stream,
            });
        }
        let entity = EntityRecord {
            id: wire.id,
            series,
            meta: wire.meta,
            label_scores: wire.scores,
        };
        entity.validate(ds.t_history).map_err(|e| parse_err(e.to_string()))?;
        if !ids.insert(entity.id.clone()) {
            return Err(MelodyError::DuplicateEntity(entity.id));
        }
        ds.entities.push(entity);
    }
    Ok(dataset.unwrap_or_else(|| Dataset::new(DEFAULT_T_HISTORY, MetricCatalog::default())))
}

/// Writes `dataset` in the JSONL format accepted by [`read_dataset`].
pub fn write_dataset<W: Write>(dataset: &Dataset, mut writer: W) -> Result<()> {
    let header = HeaderWire {
        kind: "header".into(),
        t_history: dataset.t_history,
        metrics: dataset.catalog.names().to_vec(),
    };
    serde_json::to_writer(&mut writer, &header)?;
    writer.write_all(b"\n")?;
    for e in &dataset.entities {
        let wire = EntityWire {
            id: e.id.clone(),
            t_history: dataset.t_history,
            series: e
                .series
                .iter()
                .map(|s| SeriesWire {
                    service: s.key.service.clone(),
                    metric: dataset.catalog.name(s.key.metric).to_string(),
                    history: s.history.clone(),
                    stream: s.stream.clone(),
                })
                .collect(),
            meta: e.meta.clone(),
            scores: e.label_scores.clone(),
        };
        serde_json::to_writer(&mut writer, &wire)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset_file(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

/// Loads a dataset file and splits it into labeled and unlabeled entities.
pub fn load_dataset(path: impl AsRef<Path>, scheme: LabelingScheme) -> Result<LabeledDataset> {
    read_dataset_file(path)?.partition(scheme)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(t: usize) -> String {
        format!(r#"{{"kind":"header","t_history":{t},"metrics":["cpu_utilization","heartbeat"]}}"#)
    }

    fn entity_line(id: &str, scores: &str, hist2: &str) -> String {
        format!(
            r#"{{"id":"{id}","t_history":3,"series":[{{"service":"a","metric":"cpu_utilization","history":[1,2,3],"stream":[4,null]}},{{"service":"a","metric":"heartbeat","history":{hist2},"stream":[1,1]}}],"meta":[1,2,3,4,5,6,7,8],"scores":{scores}}}"#
        )
    }

    #[test]
    fn binarize_matches_scheme_definitions() {
        use LabelingScheme::*;
        assert_eq!(binarize(&[3, 3], Hard), Ok(Some(true)));
        assert_eq!(binarize(&[3, 2], Hard), Ok(Some(false)));
        assert_eq!(binarize(&[3, 2], Soft), Ok(Some(true)));
        assert_eq!(binarize(&[-1], Naive), Ok(None));
        assert_eq!(binarize(&[0, 1], Naive), Ok(Some(false)));
        assert_eq!(binarize(&[0, 3], Naive), Ok(None));
        assert_eq!(binarize(&[0, 3], Soft), Ok(Some(false)));
        assert_eq!(binarize(&[3, -1], Soft), Ok(Some(false)));
        assert_eq!(binarize(&[], Hard), Ok(None));
        assert_eq!(binarize(&[4], Soft), Err(InvalidScore(4)));
    }

    #[test]
    fn invalid_score_names_entity() {
        let e = EntityRecord {
            id: "dep-9".into(),
            series: vec![],
            meta: vec![0.0; 8],
            label_scores: vec![7],
        };
        let msg = e.binary_label(LabelingScheme::Hard).unwrap_err().to_string();
        assert!(msg.contains("dep-9"), "{msg}");
    }

    #[test]
    fn partitions_labeled_and_unlabeled() {
        let text = [
            header(3),
            entity_line("a", "[3]", "[1,1,1]"),
            entity_line("b", "[0,1]", "[1,null,1]"),
            entity_line("c", "[]", "[1,1,1]"),
        ]
        .join("\n");
        let ds = read_dataset(text.as_bytes()).unwrap().partition(LabelingScheme::Soft).unwrap();
        assert_eq!((ds.labeled.len(), ds.unlabeled.len()), (2, 1));
        assert!(ds.labeled[0].label);
        assert!(!ds.labeled[1].label);
        assert_eq!(ds.labeled[1].entity.series[1].history[1], None);
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        let ds = read_dataset("".as_bytes()).unwrap().partition(LabelingScheme::Hard).unwrap();
        assert!(ds.labeled.is_empty() && ds.unlabeled.is_empty());
    }

    #[test]
    fn unequal_history_lengths_rejected() {
        let text = [header(3), entity_line("a", "[3]", "[1,1]")].join("\n");
        match read_dataset(text.as_bytes()) {
            Err(MelodyError::Parse { line: 2, message }) => assert!(message.contains("length"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = [header(3), entity_line("a", "[3]", "[1,1,1]"), "{not json".into()].join("\n");
        match read_dataset(text.as_bytes()) {
            Err(MelodyError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = [header(3), entity_line("a", "[3]", "[1,1,1]"), entity_line("a", "[]", "[1,1,1]")].join("\n");
        assert!(matches!(read_dataset(text.as_bytes()), Err(MelodyError::DuplicateEntity(id)) if id == "a"));
    }

    #[test]
    fn unknown_metric_rejected() {
        let line = r#"{"id":"x","t_history":3,"series":[{"service":"a","metric":"nope","history":[1,2,3]}],"meta":[1,2,3,4,5,6,7,8]}"#;
        let text = [header(3), line.into()].join("\n");
        assert!(matches!(read_dataset(text.as_bytes()), Err(MelodyError::Parse { line: 2, .. })));
    }

    #[test]
    fn observations_are_timestamped_after_history() {
        let text = [header(3), entity_line("a", "[3]", "[1,1,1]")].join("\n");
        let ds = read_dataset(text.as_bytes()).unwrap();
        let obs: Vec<_> = ds.entities[0].observations_at(1).collect();
        assert_eq!(obs[0].1, Observation::new(5, None));
        assert_eq!(obs[1].1, Observation::new(5, Some(1.0)));
    }
}
