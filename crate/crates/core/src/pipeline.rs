// SPDX-License-Identifier: Apache-2.0

//! From per-series scores to the fixed-width entity feature vector.
//!
//! Each (instance, series) lane keeps a running max and mean of its scores.
//! Lanes are max-aggregated across services per instance, giving one pooled
//! max and one pooled mean per registry instance. Instances with no matching
//! series are imputed with training means, and the meta features are
//! standardized with training statistics. With the default registry the
//! result has `63 * 2 + 8 = 134` features.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entity::{EntityRecord, MetricCatalog, Observation, SeriesKey, META_FEATURES};
use crate::error::{MelodyError, Result};
use crate::featurizers::{extract_meta, FeaturizerKind, InstanceState, Registry};
use crate::scalar::Scalar;

/// Running max and mean of a score sequence, each updated in O(1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolState<F> {
    pub max: F,
    pub sum: F,
    pub count: u64,
}

impl<F: Scalar> Default for PoolState<F> {
    fn default() -> Self {
        Self {
            max: F::neg_infinity(),
            sum: F::zero(),
            count: 0,
        }
    }
}

impl<F: Scalar> PoolState<F> {
    pub fn update(&mut self, s: F) {
        self.max = self.max.max(s);
        self.sum += s;
        self.count += 1;
    }

    /// `(max, mean)`; an empty pool reads as `(0, 0)`.
    pub fn read(&self) -> (F, F) {
        if self.count == 0 {
            (F::zero(), F::zero())
        } else {
            (self.max, self.sum / F::lit(self.count as f64))
        }
    }
}

/// Functional form of [`PoolState::update`].
pub fn pool_update<F: Scalar>(mut state: PoolState<F>, s: F) -> PoolState<F> {
    state.update(s);
    state
}

/// Max-aggregates pooled `(max, mean)` pairs across the services matching
/// one instance. `None` when nothing matches.
pub fn aggregate<F: Scalar>(pooled: impl IntoIterator<Item = (F, F)>) -> Option<(F, F)> {
    pooled
        .into_iter()
        .reduce(|(a_max, a_mean), (b_max, b_mean)| (a_max.max(b_max), a_mean.max(b_mean)))
}

/// Feature names and their hash. Layout: one `.max` per instance, one
/// `.mean` per instance, then the meta features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: Vec<String>,
    pub instances: usize,
    pub hash: u64,
}

impl FeatureSchema {
    pub fn from_registry(registry: &Registry) -> Self {
        let instances = registry.len();
        let mut names = Vec::with_capacity(instances * 2 + META_FEATURES);
        names.extend(registry.instances.iter().map(|s| format!("{}.max", s.id)));
        names.extend(registry.instances.iter().map(|s| format!("{}.mean", s.id)));
        names.extend((0..META_FEATURES).map(|i| format!("meta_{i}")));
        let hash = schema_hash(&names);
        Self { names, instances, hash }
    }

    /// Total dimension `d`.
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Number of pooled (non-meta) features.
    pub fn pooled(&self) -> usize {
        self.instances * 2
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash)
    }

    /// Recomputes the hash from the names; used to detect tampered artifacts.
    pub fn is_consistent(&self) -> bool {
        self.names.len() == self.instances * 2 + META_FEATURES && schema_hash(&self.names) == self.hash
    }
}

fn schema_hash(names: &[String]) -> u64 {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update(b"\n");
    }
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 8 bytes"))
}

/// Pooled features before imputation. `None` marks an instance with no
/// matching series.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures<F> {
    pub max: Vec<Option<F>>,
    pub mean: Vec<Option<F>>,
    pub meta: [F; META_FEATURES],
}

impl<F: Scalar> RawFeatures<F> {
    /// Pooled value by schema index (`0..2 * instances`).
    pub fn pooled(&self, i: usize) -> Option<F> {
        let k = self.max.len();
        if i < k {
            self.max[i]
        } else {
            self.mean[i - k]
        }
    }

    pub fn missing_count(&self) -> usize {
        self.max.iter().chain(&self.mean).filter(|v| v.is_none()).count()
    }

    /// Keeps only the instances whose index satisfies `keep`.
    pub fn select_instances(&self, keep: impl Fn(usize) -> bool) -> Self {
        let pick = |v: &Vec<Option<F>>| v.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, x)| *x).collect();
        Self {
            max: pick(&self.max),
            mean: pick(&self.mean),
            meta: self.meta,
        }
    }
}

/// Training means of the pooled features, used for absent instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationMeans<F> {
    pub values: Vec<F>,
}

/// Per-feature mean over the rows where the feature is present.
pub fn fit_imputation<F: Scalar>(rows: &[RawFeatures<F>], schema: &FeatureSchema) -> Result<ImputationMeans<F>> {
    let d = schema.pooled();
    let mut sums = vec![F::zero(); d];
    let mut counts = vec![0usize; d];
    for row in rows {
        if row.max.len() * 2 != d {
            return Err(MelodyError::Dimension {
                expected: d,
                got: row.max.len() * 2,
            });
        }
        for (i, (s, c)) in sums.iter_mut().zip(counts.iter_mut()).enumerate() {
            if let Some(v) = row.pooled(i) {
                *s += v;
                *c += 1;
            }
        }
    }
    let values = sums
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (s, c))| {
            if c == 0 {
                Err(MelodyError::FeatureNeverPresent(schema.names[i].clone()))
            } else {
                Ok(s / F::lit(c as f64))
            }
        })
        .collect::<Result<_>>()?;
    Ok(ImputationMeans { values })
}

/// Imputation means plus z-score statistics for the meta features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer<F> {
    pub imputation: ImputationMeans<F>,
    pub meta_mean: [F; META_FEATURES],
    pub meta_std: [F; META_FEATURES],
}

impl<F: Scalar> FeatureNormalizer<F> {
    pub fn fit(rows: &[RawFeatures<F>], schema: &FeatureSchema) -> Result<Self> {
        if rows.is_empty() {
            return Err(MelodyError::Data("cannot fit feature normalization on zero rows".into()));
        }
        let imputation = fit_imputation(rows, schema)?;
        let n = F::lit(rows.len() as f64);
        let meta_mean: [F; META_FEATURES] = std::array::from_fn(|j| rows.iter().map(|r| r.meta[j]).sum::<F>() / n);
        let meta_std = std::array::from_fn(|j| {
            let var = rows.iter().map(|r| (r.meta[j] - meta_mean[j]).powi(2)).sum::<F>() / n;
            let sd = var.sqrt();
            if sd > F::lit(1e-12) {
                sd
            } else {
                F::one()
            }
        });
        Ok(Self {
            imputation,
            meta_mean,
            meta_std,
        })
    }
}

/// A model-ready entity representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector<F> {
    pub values: Vec<F>,
    pub schema: u64,
}

impl<F: Scalar> FeatureVector<F> {
    pub fn new(values: Vec<F>, schema: u64) -> Self {
        Self { values, schema }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Imputes absent pooled features and standardizes the meta block.
pub fn assemble<F: Scalar>(
    raw: &RawFeatures<F>,
    normalizer: &FeatureNormalizer<F>,
    schema: &FeatureSchema,
) -> Result<FeatureVector<F>> {
    let pooled = schema.pooled();
    if raw.max.len() != schema.instances
        || raw.mean.len() != schema.instances
        || normalizer.imputation.values.len() != pooled
    {
        return Err(MelodyError::SchemaMismatch {
            expected: format!("{} instances", schema.instances),
            got: format!("{} instances", raw.max.len()),
        });
    }
    let mut values = Vec::with_capacity(schema.dim());
    values.extend((0..pooled).map(|i| raw.pooled(i).unwrap_or(normalizer.imputation.values[i])));
    values.extend((0..META_FEATURES).map(|j| (raw.meta[j] - normalizer.meta_mean[j]) / normalizer.meta_std[j]));
    Ok(FeatureVector::new(values, schema.hash))
}

/// One (instance, series) pair with its online scorer and pool.
#[derive(Clone, Debug)]
pub struct Lane<F> {
    pub instance: usize,
    pub series: usize,
    pub state: InstanceState<F>,
    pub pool: PoolState<F>,
}

/// All featurizer lanes of one entity.
///
/// Built from the entity's history; [`EntityFeaturizer::step`] consumes one
/// post-launch observation per series.
#[derive(Clone, Debug)]
pub struct EntityFeaturizer<F> {
    series: Vec<SeriesKey>,
    series_index: HashMap<SeriesKey, usize>,
    lanes: Vec<Lane<F>>,
    by_instance: Vec<Vec<usize>>,
    meta: [F; META_FEATURES],
    t: i64,
}

impl<F: Scalar> EntityFeaturizer<F> {
    /// Initializes every applicable (instance, series) lane.
    ///
    /// Series whose history has no observed value get no statistics-based
    /// lanes (logged); a history shorter than a SubNN window is an error.
    pub fn new<'a>(
        registry: &Registry,
        catalog: &MetricCatalog,
        series: impl IntoIterator<Item = (&'a SeriesKey, &'a [Option<f64>])>,
        meta: [F; META_FEATURES],
    ) -> Result<Self> {
        let mut keys = Vec::new();
        let mut lanes = Vec::new();
        let mut by_instance = vec![Vec::new(); registry.len()];
        let mut t_history = None;
        for (key, history) in series {
            if *t_history.get_or_insert(history.len()) != history.len() {
                return Err(MelodyError::FeaturizerInit("series histories differ in length".into()));
            }
            let series_idx = keys.len();
            keys.push(key.clone());
            let metric = catalog.name(key.metric);
            let all_missing = history.iter().all(Option::is_none);
            for (inst, spec) in registry.instances.iter().enumerate() {
                if !spec.applies_to(metric) {
                    continue;
                }
                let needs_stats = matches!(spec.kind(), FeaturizerKind::Sbf | FeaturizerKind::SubNn | FeaturizerKind::Md);
                if all_missing && needs_stats {
                    if spec.kind() == FeaturizerKind::SubNn && history.len() < spec.params.window() {
                        return Err(MelodyError::FeaturizerInit(format!(
                            "{}: history length {} shorter than window {}",
                            spec.id,
                            history.len(),
                            spec.params.window()
                        )));
                    }
                    log::warn!("{}: series {}/{metric} has no observed history; lane skipped", spec.id, key.service);
                    continue;
                }
                let state = spec
                    .init(history)
                    .map_err(|e| MelodyError::FeaturizerInit(format!("{} on {}/{metric}: {e}", spec.id, key.service)))?;
                by_instance[inst].push(lanes.len());
                lanes.push(Lane {
                    instance: inst,
                    series: series_idx,
                    state,
                    pool: PoolState::default(),
                });
            }
        }
        let series_index = keys.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
        Ok(Self {
            series: keys,
            series_index,
            lanes,
            by_instance,
            meta,
            t: t_history.unwrap_or(0) as i64,
        })
    }

    /// Featurizer for the history part of a stored entity.
    pub fn for_entity(registry: &Registry, catalog: &MetricCatalog, entity: &EntityRecord) -> Result<Self> {
        let meta = extract_meta(entity)?;
        Self::new(
            registry,
            catalog,
            entity.series.iter().map(|s| (&s.key, s.history.as_slice())),
            meta,
        )
    }

    pub fn series(&self) -> &[SeriesKey] {
        &self.series
    }

    pub fn series_index(&self, key: &SeriesKey) -> Option<usize> {
        self.series_index.get(key).copied()
    }

    pub fn lanes(&self) -> &[Lane<F>] {
        &self.lanes
    }

    /// Last consumed time step (`T` right after initialization).
    pub fn t(&self) -> i64 {
        self.t
    }

    /// Consumes one step. `values[j]` is the observation of series `j` at `t`.
    pub fn step(&mut self, t: i64, values: &[Option<f64>]) -> Result<()> {
        if values.len() != self.series.len() {
            return Err(MelodyError::Dimension {
                expected: self.series.len(),
                got: values.len(),
            });
        }
        if t <= self.t {
            return Err(MelodyError::OutOfOrder { last: self.t, got: t });
        }
        for lane in &mut self.lanes {
            let s = lane.state.step(Observation::new(t, values[lane.series]))?;
            lane.pool.update(s);
        }
        self.t = t;
        Ok(())
    }

    /// Pooled and aggregated features at the current step.
    pub fn raw_features(&self) -> RawFeatures<F> {
        let mut max = Vec::with_capacity(self.by_instance.len());
        let mut mean = Vec::with_capacity(self.by_instance.len());
        for lanes in &self.by_instance {
            match aggregate(lanes.iter().map(|&l| self.lanes[l].pool.read())) {
                Some((a, b)) => {
                    max.push(Some(a));
                    mean.push(Some(b));
                }
                None => {
                    max.push(None);
                    mean.push(None);
                }
            }
        }
        RawFeatures { max, mean, meta: self.meta }
    }
}

/// Runs the featurizers over the entity's full stream and pools to its end.
pub fn extract_raw_features<F: Scalar>(
    entity: &EntityRecord,
    registry: &Registry,
    catalog: &MetricCatalog,
) -> Result<RawFeatures<F>> {
    let mut fz = EntityFeaturizer::for_entity(registry, catalog, entity)?;
    let t0 = entity.t_history() as i64;
    let mut values = vec![None; entity.series.len()];
    for step in 0..entity.stream_len() {
        for (v, s) in values.iter_mut().zip(&entity.series) {
            *v = s.stream[step];
        }
        fz.step(t0 + 1 + step as i64, &values)?;
    }
    Ok(fz.raw_features())
}

/// Writes feature vectors as CSV with a header row of feature names.
pub fn write_features_csv<'a, F: Scalar, W: Write>(
    writer: W,
    schema: &FeatureSchema,
    rows: impl IntoIterator<Item = (&'a str, Option<bool>, &'a FeatureVector<F>)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(schema.names.iter().cloned());
    w.write_record(&header)?;
    for (id, label, fv) in rows {
        if fv.schema != schema.hash {
            return Err(MelodyError::SchemaMismatch {
                expected: schema.hash_hex(),
                got: format!("{:016x}", fv.schema),
            });
        }
        let mut rec = vec![id.to_string(), label.map_or(String::new(), |l| u8::from(l).to_string())];
        rec.extend(fv.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
