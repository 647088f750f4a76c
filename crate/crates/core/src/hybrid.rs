// SPDX-License-Identifier: Apache-2.0

//! Bagged one-class and boosted-tree members with mean and sequential
//! combiners, plus the versioned model artifact.

use std::fmt::Write as _;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entity::{EntityRecord, MetricCatalog};
use crate::error::{MelodyError, Result};
use crate::featurizers::Registry;
use crate::gbdt::{self, BoostedForest, GbdtConfig};
use crate::metrics::{select_threshold, select_threshold_gated, ThresholdChoice};
use crate::pipeline::{assemble, extract_raw_features, FeatureNormalizer, FeatureSchema, FeatureVector, RawFeatures};
use crate::scalar::Scalar;
use crate::semidoc::{self, OneClassData, OneClassMode, SemiDocModel, TrainConfig, Validation};

pub const ARTIFACT_FORMAT: &str = "melody-hybrid";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Average of all member scores.
    Mean,
    /// One-class members filter; boosted trees decide the rest.
    Sequential,
}

impl std::str::FromStr for CombineMode {
    type Err = MelodyError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" | "m" => Ok(Self::Mean),
            "sequential" | "s" => Ok(Self::Sequential),
            other => Err(MelodyError::Config(format!("unknown combine mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridConfig {
    pub semidoc_members: usize,
    pub gbdt_members: usize,
    pub mode: CombineMode,
    pub semidoc: TrainConfig,
    pub gbdt: GbdtConfig,
    /// Candidate hinge margins; the one with the best validation F1 wins.
    pub margin_grid: Vec<f64>,
    /// Candidate shares of validation anomalies that must pass the
    /// sequential filter. Each candidate fixes `theta1`; the one with the best
    /// gated validation F1 wins, earlier entries on ties.
    pub filter_recalls: Vec<f64>,
    /// When false every member uses `seed` unchanged.
    pub derive_member_seeds: bool,
    pub seed: u64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            semidoc_members: 3,
            gbdt_members: 3,
            mode: CombineMode::Sequential,
            semidoc: TrainConfig::default(),
            gbdt: GbdtConfig {
                subsample: 0.8,
                ..GbdtConfig::default()
            },
            margin_grid: vec![1.0, 10.0, 100.0],
            filter_recalls: vec![0.99],
            derive_member_seeds: true,
            seed: 0,
        }
    }
}

/// Distinct seed for member `index` of `family`.
pub fn member_seed(master: u64, family: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a mixed key
    let mut z = master
        .wrapping_add(family.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standardized rows for ensemble training.
#[derive(Clone, Copy, Debug)]
pub struct TrainingSet<'a, F> {
    pub train: &'a [FeatureVector<F>],
    pub train_labels: &'a [bool],
    pub unlabeled: &'a [FeatureVector<F>],
    pub validation: &'a [FeatureVector<F>],
    pub validation_labels: &'a [bool],
}

/// Trained members without a combiner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble<F> {
    pub semidoc: Vec<SemiDocModel<F>>,
    pub gbdt: Vec<BoostedForest<F>>,
}

/// Per-member scores of one entity.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberScores<F> {
    pub semidoc: Vec<F>,
    pub gbdt: Vec<F>,
}

impl<F: Scalar> MemberScores<F> {
    pub fn semidoc_mean(&self) -> F {
        mean(&self.semidoc)
    }

    pub fn gbdt_mean(&self) -> F {
        mean(&self.gbdt)
    }

    /// Equal-weight mean over every member.
    pub fn overall_mean(&self) -> F {
        let n = self.semidoc.len() + self.gbdt.len();
        if n == 0 {
            return F::zero();
        }
        (self.semidoc.iter().copied().sum::<F>() + self.gbdt.iter().copied().sum::<F>()) / F::lit(n as f64)
    }
}

fn mean<F: Scalar>(xs: &[F]) -> F {
    if xs.is_empty() {
        F::zero()
    } else {
        xs.iter().copied().sum::<F>() / F::lit(xs.len() as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub margin: f64,
    /// Validation F1 of the first one-class member at each grid margin.
    pub margin_scores: Vec<(f64, f64)>,
    pub semidoc_reports: Vec<semidoc::TrainReport>,
}

fn split_classes<'a, F>(rows: &'a [FeatureVector<F>], labels: &[bool]) -> (Vec<FeatureVector<F>>, Vec<FeatureVector<F>>)
where
    F: Clone + 'a,
{
    let mut normals = Vec::new();
    let mut anomalies = Vec::new();
    for (z, &y) in rows.iter().zip(labels) {
        if y {
            anomalies.push(z.clone());
        } else {
            normals.push(z.clone());
        }
    }
    (normals, anomalies)
}

/// Trains `semidoc_members` one-class models and `gbdt_members` forests.
///
/// With more than one grid margin, the first one-class member is trained
/// at every margin and the best one by validation F1 is kept; the remaining
/// members reuse that margin.
pub fn train_ensemble<F: Scalar>(set: TrainingSet<'_, F>, cfg: &HybridConfig) -> Result<(Ensemble<F>, EnsembleReport)> {
    if set.train.len() != set.train_labels.len() || set.validation.len() != set.validation_labels.len() {
        return Err(MelodyError::Data("rows and labels differ in length".into()));
    }
    let pos = set.train_labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == set.train_labels.len() {
        return Err(MelodyError::Data("training labels must contain both classes".into()));
    }
    let (normals, anomalies) = split_classes(set.train, set.train_labels);
    let data = OneClassData {
        labeled_normals: &normals,
        unlabeled: set.unlabeled,
        anomalies: &anomalies,
    };
    let validation = Some(Validation {
        features: set.validation,
        labels: set.validation_labels,
    });
    let seed = |family, i| {
        if cfg.derive_member_seeds {
            member_seed(cfg.seed, family, i as u64)
        } else {
            cfg.seed
        }
    };

    let mut report = EnsembleReport::default();
    let mut semidoc_models = Vec::with_capacity(cfg.semidoc_members);
    let mut margin = cfg.semidoc.margin;
    if cfg.semidoc_members > 0 {
        let grid: Vec<f64> = if cfg.semidoc.mode == OneClassMode::SemiDoc && !cfg.margin_grid.is_empty() {
            cfg.margin_grid.clone()
        } else {
            vec![cfg.semidoc.margin]
        };
        let mut best: Option<(f64, SemiDocModel<F>, semidoc::TrainReport)> = None;
        for &m in &grid {
            let mc = TrainConfig {
                margin: m,
                seed: seed(1, 0),
                ..cfg.semidoc.clone()
            };
            let (model, rep) = semidoc::train(data, validation, &mc)?;
            let f1 = validation_f1(&model, set.validation, set.validation_labels)?;
            report.margin_scores.push((m, f1));
            if best.as_ref().is_none_or(|(bf, _, _)| f1 > *bf) {
                best = Some((f1, model, rep));
                margin = m;
            }
        }
        let (_, model, rep) = best.expect("grid is not empty");
        semidoc_models.push(model);
        report.semidoc_reports.push(rep);
        for i in 1..cfg.semidoc_members {
            let mc = TrainConfig {
                margin,
                seed: seed(1, i),
                ..cfg.semidoc.clone()
            };
            let (model, rep) = semidoc::train(data, validation, &mc)?;
            semidoc_models.push(model);
            report.semidoc_reports.push(rep);
        }
    }
    report.margin = margin;

    let gbdt_models = (0..cfg.gbdt_members)
        .map(|i| {
            let gc = GbdtConfig {
                seed: seed(2, i),
                ..cfg.gbdt.clone()
            };
            gbdt::fit(set.train, set.train_labels, &gc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Ensemble {
            semidoc: semidoc_models,
            gbdt: gbdt_models,
        },
        report,
    ))
}

fn validation_f1<F: Scalar>(model: &SemiDocModel<F>, rows: &[FeatureVector<F>], labels: &[bool]) -> Result<f64> {
    let scores = rows.iter().map(|z| model.score(z)).collect::<Result<Vec<_>>>()?;
    Ok(select_threshold(&scores, labels).map_or(0.0, |c| c.f1()))
}

impl<F: Scalar> Ensemble<F> {
    pub fn member_scores(&self, z: &FeatureVector<F>) -> Result<MemberScores<F>> {
        Ok(MemberScores {
            semidoc: self.semidoc.iter().map(|m| m.score(z)).collect::<Result<_>>()?,
            gbdt: self.gbdt.iter().map(|m| m.predict_proba(z)).collect::<Result<_>>()?,
        })
    }

    /// Per-feature gain importance averaged over the forests.
    pub fn importance(&self) -> Vec<f64> {
        let Some(first) = self.gbdt.first() else { return Vec::new() };
        let mut acc = vec![0.0; first.n_features];
        for f in &self.gbdt {
            for (a, v) in acc.iter_mut().zip(f.importance()) {
                *a += v;
            }
        }
        let n = self.gbdt.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Decision thresholds of a combiner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds<F> {
    /// Stage-1 filter threshold (sequential only).
    pub theta1: Option<F>,
    /// Final threshold: on the mean score, or on the boosted-tree score
    /// of stage-2 entities.
    pub theta: F,
}

/// Largest threshold keeping at least `recall` of the anomalies at or above it.
pub fn filter_threshold<F: Scalar>(anomaly_scores: &[F], recall: f64) -> Result<F> {
    if anomaly_scores.is_empty() {
        return Err(MelodyError::Data("filter threshold needs at least one anomaly".into()));
    }
    let mut s = anomaly_scores.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let k = ((recall * s.len() as f64).ceil() as usize).clamp(1, s.len());
    Ok(s[k - 1])
}

/// Sequential thresholds: `theta1` from the recall candidate whose gated
/// best-F1 sweep over `b` scores highest, and that sweep's threshold.
pub fn sequential_thresholds<F: Scalar>(
    a: &[F],
    b: &[F],
    labels: &[bool],
    filter_recalls: &[f64],
) -> Result<(F, ThresholdChoice<F>)> {
    if filter_recalls.is_empty() {
        return Err(MelodyError::Config("no filter recall candidates".into()));
    }
    if let Some(r) = filter_recalls.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(MelodyError::Config(format!("filter recall {r} outside (0, 1]")));
    }
    let anomalies: Vec<F> = a.iter().zip(labels).filter(|(_, &y)| y).map(|(&s, _)| s).collect();
    let mut best: Option<(F, ThresholdChoice<F>)> = None;
    for &recall in filter_recalls {
        let theta1 = filter_threshold(&anomalies, recall)?;
        let eligible: Vec<bool> = a.iter().map(|&s| s >= theta1).collect();
        let choice = select_threshold_gated(b, &eligible, labels)?;
        if best.as_ref().is_none_or(|(_, c)| choice.f1() > c.f1()) {
            best = Some((theta1, choice));
        }
    }
    Ok(best.expect("non-empty candidates"))
}

/// Fits the combiner thresholds on validation member scores.
pub fn calibrate<F: Scalar>(
    mode: CombineMode,
    scores: &[MemberScores<F>],
    labels: &[bool],
    filter_recalls: &[f64],
) -> Result<Thresholds<F>> {
    match mode {
        CombineMode::Mean => {
            let s: Vec<F> = scores.iter().map(MemberScores::overall_mean).collect();
            Ok(Thresholds {
                theta1: None,
                theta: select_threshold(&s, labels)?.threshold,
            })
        }
        CombineMode::Sequential => {
            let a: Vec<F> = scores.iter().map(MemberScores::semidoc_mean).collect();
            let b: Vec<F> = scores.iter().map(MemberScores::gbdt_mean).collect();
            let (theta1, choice) = sequential_thresholds(&a, &b, labels, filter_recalls)?;
            Ok(Thresholds {
                theta1: Some(theta1),
                theta: choice.threshold,
            })
        }
    }
}

/// Outcome of the sequential combiner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialScore<F> {
    pub stage: u8,
    /// One-class mean in stage 1, boosted-tree mean in stage 2.
    pub score: F,
    /// Continuous score on the final threshold's scale.
    pub decision_score: F,
}

/// Sequential rule for given member means and thresholds.
pub fn sequential<F: Scalar>(a: F, b: F, theta1: F, theta2: F) -> SequentialScore<F> {
    if a < theta1 {
        SequentialScore {
            stage: 1,
            score: a,
            decision_score: a * theta2 / theta1,
        }
    } else {
        SequentialScore {
            stage: 2,
            score: b,
            decision_score: b,
        }
    }
}

/// Combined score and binary decision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision<F> {
    pub score: F,
    pub anomalous: bool,
    pub stage: Option<u8>,
}

/// A deployable hybrid: members, combiner, thresholds and the feature
/// pipeline needed to score raw entities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridModel<F> {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub schema: FeatureSchema,
    pub registry: Registry,
    pub metrics: Vec<String>,
    pub t_history: usize,
    pub normalizer: FeatureNormalizer<F>,
    pub mode: CombineMode,
    pub thresholds: Thresholds<F>,
    pub semidoc: Vec<SemiDocModel<F>>,
    pub gbdt: Vec<BoostedForest<F>>,
    /// Mean forest gain importance per feature.
    pub importance: Vec<f64>,
}

/// Everything besides the members that a model needs.
#[derive(Clone, Debug)]
pub struct PipelineSpec<F> {
    pub registry: Registry,
    pub catalog: MetricCatalog,
    pub t_history: usize,
    pub normalizer: FeatureNormalizer<F>,
}

impl<F: Scalar> HybridModel<F> {
    pub fn new(ensemble: Ensemble<F>, mode: CombineMode, thresholds: Thresholds<F>, pipeline: PipelineSpec<F>) -> Result<Self> {
        let schema = FeatureSchema::from_registry(&pipeline.registry);
        if mode == CombineMode::Sequential && thresholds.theta1.is_none() {
            return Err(MelodyError::Config("sequential mode needs a filter threshold".into()));
        }
        let importance = ensemble.importance();
        let model = Self {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            scalar: F::NAME.into(),
            schema,
            registry: pipeline.registry,
            metrics: pipeline.catalog.names().to_vec(),
            t_history: pipeline.t_history,
            normalizer: pipeline.normalizer,
            mode,
            thresholds,
            semidoc: ensemble.semidoc,
            gbdt: ensemble.gbdt,
            importance,
        };
        model.check()?;
        Ok(model)
    }

    /// Structural checks; also guards loaded artifacts.
    pub fn check(&self) -> Result<()> {
        if self.format != ARTIFACT_FORMAT {
            return Err(MelodyError::Artifact(format!("unknown artifact format {:?}", self.format)));
        }
        if self.version != ARTIFACT_VERSION {
            return Err(MelodyError::Artifact(format!("unsupported artifact version {}", self.version)));
        }
        if self.scalar != F::NAME {
            return Err(MelodyError::Artifact(format!(
                "artifact stores {} parameters, loader expects {}",
                self.scalar,
                F::NAME
            )));
        }
        let expected = FeatureSchema::from_registry(&self.registry);
        if !self.schema.is_consistent() || expected.hash != self.schema.hash {
            return Err(MelodyError::SchemaMismatch {
                expected: expected.hash_hex(),
                got: self.schema.hash_hex(),
            });
        }
        let hash = self.schema.hash;
        let foreign = self
            .semidoc
            .iter()
            .map(|m| m.schema)
            .chain(self.gbdt.iter().map(|g| g.schema))
            .find(|&h| h != hash);
        if let Some(h) = foreign {
            return Err(MelodyError::SchemaMismatch {
                expected: self.schema.hash_hex(),
                got: format!("{h:016x}"),
            });
        }
        if self.semidoc.is_empty() && self.gbdt.is_empty() {
            return Err(MelodyError::Artifact("model has no members".into()));
        }
        if self.mode == CombineMode::Sequential && (self.semidoc.is_empty() || self.gbdt.is_empty()) {
            return Err(MelodyError::Artifact("sequential mode needs members of both families".into()));
        }
        if self.normalizer.imputation.values.len() != self.schema.pooled() {
            return Err(MelodyError::Artifact("imputation means do not match the schema".into()));
        }
        MetricCatalog::new(self.metrics.iter().cloned())?;
        self.registry.validate()
    }

    pub fn catalog(&self) -> MetricCatalog {
        MetricCatalog::new(self.metrics.iter().cloned()).expect("checked on construction")
    }

    pub fn ensemble(&self) -> Ensemble<F> {
        Ensemble {
            semidoc: self.semidoc.clone(),
            gbdt: self.gbdt.clone(),
        }
    }

    fn check_schema(&self, z: &FeatureVector<F>) -> Result<()> {
        if z.schema != self.schema.hash {
            return Err(MelodyError::SchemaMismatch {
                expected: self.schema.hash_hex(),
                got: format!("{:016x}", z.schema),
            });
        }
        Ok(())
    }

    pub fn member_scores(&self, z: &FeatureVector<F>) -> Result<MemberScores<F>> {
        self.check_schema(z)?;
        Ok(MemberScores {
            semidoc: self.semidoc.iter().map(|m| m.score(z)).collect::<Result<_>>()?,
            gbdt: self.gbdt.iter().map(|m| m.predict_proba(z)).collect::<Result<_>>()?,
        })
    }

    /// Mean of every member score.
    pub fn score_mean(&self, z: &FeatureVector<F>) -> Result<F> {
        Ok(self.member_scores(z)?.overall_mean())
    }

    pub fn score_sequential(&self, z: &FeatureVector<F>) -> Result<SequentialScore<F>> {
        let theta1 = self
            .thresholds
            .theta1
            .ok_or_else(|| MelodyError::Config("model has no filter threshold".into()))?;
        let m = self.member_scores(z)?;
        Ok(sequential(m.semidoc_mean(), m.gbdt_mean(), theta1, self.thresholds.theta))
    }

    /// Combined score under the model's mode and the thresholded decision.
    pub fn decide(&self, z: &FeatureVector<F>) -> Result<Decision<F>> {
        self.decide_members(&self.member_scores(z)?)
    }

    pub fn decide_members(&self, m: &MemberScores<F>) -> Result<Decision<F>> {
        let theta = self.thresholds.theta;
        match self.mode {
            CombineMode::Mean => {
                let s = m.overall_mean();
                Ok(Decision {
                    score: s,
                    anomalous: s >= theta,
                    stage: None,
                })
            }
            CombineMode::Sequential => {
                let theta1 = self
                    .thresholds
                    .theta1
                    .ok_or_else(|| MelodyError::Config("model has no filter threshold".into()))?;
                let s = sequential(m.semidoc_mean(), m.gbdt_mean(), theta1, theta);
                Ok(Decision {
                    score: s.decision_score,
                    anomalous: s.stage == 2 && s.score >= theta,
                    stage: Some(s.stage),
                })
            }
        }
    }

    pub fn normalize(&self, raw: &RawFeatures<F>) -> Result<FeatureVector<F>> {
        assemble(raw, &self.normalizer, &self.schema)
    }

    /// Runs the whole pipeline on a stored entity (history plus stream).
    pub fn featurize(&self, entity: &EntityRecord) -> Result<FeatureVector<F>> {
        let raw = extract_raw_features(entity, &self.registry, &self.catalog())?;
        self.normalize(&raw)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write(BufWriter::new(file))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(BufReader::new(file))
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let model: Self = serde_json::from_reader(r)?;
        model.check()?;
        Ok(model)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format      {} v{} ({})", self.format, self.version, self.scalar);
        let _ = writeln!(s, "mode        {:?}", self.mode);
        let _ = writeln!(
            s,
            "schema      {} ({} features, {} instances)",
            self.schema.hash_hex(),
            self.schema.dim(),
            self.schema.instances
        );
        let _ = writeln!(s, "history     T = {}", self.t_history);
        let _ = writeln!(s, "metrics     {}", self.metrics.len());
        let _ = writeln!(
            s,
            "members     {} one-class, {} boosted forests",
            self.semidoc.len(),
            self.gbdt.len()
        );
        if let Some(m) = self.semidoc.first() {
            let _ = writeln!(
                s,
                "one-class   mode {:?}, margin {}, embed {}",
                m.mode,
                m.margin,
                m.encoder.embed_dim()
            );
        }
        if let Some(t1) = self.thresholds.theta1 {
            let _ = writeln!(s, "theta1      {t1}");
        }
        let _ = writeln!(s, "theta       {}", self.thresholds.theta);
        let mut ranked: Vec<(usize, f64)> = self.importance.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let top: Vec<String> = ranked
            .iter()
            .take(5)
            .filter(|(_, v)| *v > 0.0)
            .map(|(i, v)| format!("{}={v:.3}", self.schema.names[*i]))
            .collect();
        if !top.is_empty() {
            let _ = writeln!(s, "top gain    {}", top.join(", "));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn member_seeds_are_distinct() {
        let mut seeds: Vec<u64> = (1..=2).flat_map(|f| (0..3).map(move |i| member_seed(42, f, i))).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 6);
    }

    #[test]
    fn overall_mean_of_six() {
        let m = MemberScores {
            semidoc: vec![0.2f64, 0.4, 0.6],
            gbdt: vec![0.8, 1.0, 0.0],
        };
        assert!((m.overall_mean() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sequential_stages() {
        let s = sequential(0.1f64, 1.0, 0.2, 0.5);
        assert_eq!(s.stage, 1);
        assert_eq!(s.decision_score, 0.25);
        let s = sequential(0.3f64, 1.0, 0.2, 0.5);
        assert_eq!((s.stage, s.score), (2, 1.0));
    }

    #[test]
    fn filter_keeps_requested_recall() {
        let a: Vec<f64> = (1..=200).map(|i| i as f64 / 200.0).collect();
        // 99% of 200 = 198 scores must stay at or above theta1
        let t = filter_threshold(&a, 0.99).unwrap();
        assert_eq!(a.iter().filter(|&&s| s >= t).count(), 198);
        assert_eq!(filter_threshold(&[0.4f64], 0.99).unwrap(), 0.4);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("mean".parse::<CombineMode>().unwrap(), CombineMode::Mean);
        assert_eq!("S".parse::<CombineMode>().unwrap(), CombineMode::Sequential);
        assert!("x".parse::<CombineMode>().is_err());
    }
}
