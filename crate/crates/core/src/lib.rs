// SPDX-License-Identifier: Apache-2.0

//! Entity-level online anomaly detection for multivariate time series.
//!
//! Heterogeneous entities (deployments) each carry a variable set of
//! `(service, metric)` series. The [`pipeline`] maps every entity into one
//! fixed feature space using online [`featurizers`], time pooling and
//! per-metric aggregation. A [`hybrid`] of semi-supervised one-class
//! networks ([`semidoc`]) and boosted trees ([`gbdt`]) scores the features,
//! and [`stream`] runs the whole chain step by step for live entities.
//! [`synth`] generates benchmark data and evaluates models on it.
//!
//! The numeric components are generic over [`Scalar`] (`f32` or `f64`);
//! the aliases below fix the `f64` instantiation used by the CLI.

pub mod entity;
pub mod error;
pub mod featurizers;
pub mod gbdt;
pub mod hybrid;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod semidoc;
pub mod stream;
pub mod synth;

pub use entity::{
    binarize, load_dataset, Dataset, EntityRecord, LabeledDataset, LabelingScheme, MetricCatalog, MetricId,
    Observation, SeriesKey,
};
pub use error::{MelodyError, Result};
pub use featurizers::{FeaturizerKind, FeaturizerSpec, Registry};
pub use gbdt::{BoostedForest, GbdtConfig};
pub use hybrid::{CombineMode, HybridConfig, HybridModel};
pub use metrics::{Confusion, Metrics};
pub use pipeline::{FeatureSchema, FeatureVector};
pub use scalar::Scalar;
pub use semidoc::{OneClassMode, SemiDocModel};
pub use stream::{EntitySession, SessionRegistry};
pub use synth::{EvalReport, ExperimentConfig, SynthConfig};

pub type FeatureVector64 = pipeline::FeatureVector<f64>;
pub type RawFeatures64 = pipeline::RawFeatures<f64>;
pub type EntityFeaturizer64 = pipeline::EntityFeaturizer<f64>;
pub type SemiDocModel64 = semidoc::SemiDocModel<f64>;
pub type BoostedForest64 = gbdt::BoostedForest<f64>;
pub type HybridModel64 = hybrid::HybridModel<f64>;
pub type EntitySession64 = stream::EntitySession<f64>;
pub type SessionRegistry64 = stream::SessionRegistry<f64>;

pub type FeatureVector32 = pipeline::FeatureVector<f32>;
pub type HybridModel32 = hybrid::HybridModel<f32>;
pub type EntitySession32 = stream::EntitySession<f32>;
