// SPDX-License-Identifier: Apache-2.0

//! Online scoring sessions and the newline-delimited JSON protocol.
//!
//! A session is opened from an entity's history, then consumes one step of
//! observations at a time. Each step updates the featurizers and pools,
//! assembles the feature vector, scores it with the hybrid and applies the
//! rollback rule: `p` consecutive anomalous steps trigger a rollback, which
//! then stays latched.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::entity::{EntityRecord, MetricId, SeriesKey, META_FEATURES};
use crate::error::{MelodyError, Result};
use crate::hybrid::HybridModel;
use crate::pipeline::{EntityFeaturizer, RawFeatures};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Consecutive anomalous steps required for a rollback.
    pub patience: usize,
    /// Number of attributed features per report.
    pub top_k: usize,
    /// Overrides the model's final threshold.
    pub threshold: Option<f64>,
    /// Score history entries kept per session.
    pub history_limit: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            patience: 1,
            top_k: 5,
            threshold: None,
            history_limit: 1440,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Continue,
    Rollback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopFeature {
    pub name: String,
    pub value: f64,
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub id: String,
    pub t: i64,
    pub score: f64,
    /// Whether this step alone crosses the threshold.
    pub anomalous: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stage: Option<u8>,
    pub decision: Verdict,
    pub top_features: Vec<TopFeature>,
}

/// Compact per-step record kept in the session's score history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub t: i64,
    pub score: f64,
    pub decision: Verdict,
}

/// History of one series at session open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesInit {
    pub service: String,
    pub metric: String,
    pub history: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInit {
    pub id: String,
    pub meta: Vec<f64>,
    pub series: Vec<SeriesInit>,
    #[serde(default)]
    pub config: Option<SessionConfig>,
}

impl SessionInit {
    /// History part of a stored entity.
    pub fn from_entity(entity: &EntityRecord, metric_names: &[String]) -> Self {
        Self {
            id: entity.id.clone(),
            meta: entity.meta.clone(),
            series: entity
                .series
                .iter()
                .map(|s| SeriesInit {
                    service: s.key.service.clone(),
                    metric: metric_names[s.key.metric.index()].clone(),
                    history: s.history.clone(),
                })
                .collect(),
            config: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueObs {
    pub service: String,
    pub metric: String,
    pub value: Option<f64>,
}

/// One step of observations. Series without an entry count as missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInput {
    pub t: i64,
    pub values: Vec<ValueObs>,
}

impl StepInput {
    /// Stream step `step` (0-based) of a stored entity.
    pub fn from_entity(entity: &EntityRecord, metric_names: &[String], step: usize) -> Self {
        Self {
            t: entity.t_history() as i64 + 1 + step as i64,
            values: entity
                .series
                .iter()
                .map(|s| ValueObs {
                    service: s.key.service.clone(),
                    metric: metric_names[s.key.metric.index()].clone(),
                    value: s.stream[step],
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSummary {
    pub id: String,
    pub t: i64,
    pub series: usize,
    pub lanes: usize,
    /// `service/metric` pairs ignored because the metric is unknown.
    pub skipped: Vec<String>,
}

/// Live state of one entity.
#[derive(Clone, Debug)]
pub struct EntitySession<F> {
    id: String,
    model: Arc<HybridModel<F>>,
    featurizer: EntityFeaturizer<F>,
    config: SessionConfig,
    skipped: HashSet<(String, String)>,
    metric_index: HashMap<String, usize>,
    streak: usize,
    rolled_back: bool,
    steps: usize,
    history: VecDeque<ScorePoint>,
    values: Vec<Option<f64>>,
}

/// Initializes a session from history. Metrics missing from the model's
/// catalog are skipped with a warning.
pub fn open_session<F: Scalar>(model: Arc<HybridModel<F>>, init: &SessionInit) -> Result<EntitySession<F>> {
    let config = init.config.clone().unwrap_or_default();
    if config.patience == 0 {
        return Err(MelodyError::Config("rollback patience must be at least 1".into()));
    }
    if init.meta.len() != META_FEATURES {
        return Err(MelodyError::validation(
            &init.id,
            format!("expected {META_FEATURES} meta features, got {}", init.meta.len()),
        ));
    }
    let catalog = model.catalog();
    let mut keys = Vec::new();
    let mut skipped = HashSet::new();
    let mut seen = HashSet::new();
    for s in &init.series {
        if s.history.len() != model.t_history {
            return Err(MelodyError::validation(
                &init.id,
                format!(
                    "series {}/{} has {} history steps, model expects {}",
                    s.service,
                    s.metric,
                    s.history.len(),
                    model.t_history
                ),
            ));
        }
        match catalog.id(&s.metric) {
            Some(m) => {
                let key = SeriesKey::new(s.service.clone(), m);
                if !seen.insert(key.clone()) {
                    return Err(MelodyError::validation(
                        &init.id,
                        format!("duplicate series {}/{}", s.service, s.metric),
                    ));
                }
                keys.push((key, s.history.as_slice()));
            }
            None => {
                log::warn!("session {}: unknown metric {} skipped", init.id, s.metric);
                skipped.insert((s.service.clone(), s.metric.clone()));
            }
        }
    }
    let meta: [F; META_FEATURES] = std::array::from_fn(|i| F::lit(init.meta[i]));
    let featurizer = EntityFeaturizer::new(&model.registry, &catalog, keys.iter().map(|(k, h)| (k, *h)), meta)?;
    let metric_index = catalog.names().iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
    let values = vec![None; featurizer.series().len()];
    Ok(EntitySession {
        id: init.id.clone(),
        model,
        featurizer,
        config,
        skipped,
        metric_index,
        streak: 0,
        rolled_back: false,
        steps: 0,
        history: VecDeque::new(),
        values,
    })
}

impl<F: Scalar> EntitySession<F> {
    pub fn id(&self) -> &str {
        &self.id
    }

    /// Last consumed time step.
    pub fn t(&self) -> i64 {
        self.featurizer.t()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lanes(&self) -> usize {
        self.featurizer.lanes().len()
    }

    pub fn featurizer(&self) -> &EntityFeaturizer<F> {
        &self.featurizer
    }

    pub fn rolled_back(&self) -> bool {
        self.rolled_back
    }

    pub fn summary(&self) -> OpenSummary {
        let mut skipped: Vec<String> = self.skipped.iter().map(|(s, m)| format!("{s}/{m}")).collect();
        skipped.sort();
        OpenSummary {
            id: self.id.clone(),
            t: self.t(),
            series: self.featurizer.series().len(),
            lanes: self.lanes(),
            skipped,
        }
    }

    pub fn score_history(&self) -> Vec<ScorePoint> {
        self.history.iter().copied().collect()
    }

    /// Consumes the observations at `input.t`, which must be `t() + 1`.
    /// Rejected input leaves the session unchanged.
    pub fn step(&mut self, input: &StepInput) -> Result<ScoreReport> {
        let last = self.t();
        if input.t != last + 1 {
            return Err(MelodyError::OutOfOrder { last, got: input.t });
        }
        self.values.iter_mut().for_each(|v| *v = None);
        for obs in &input.values {
            let idx = self
                .metric_index
                .get(&obs.metric)
                .and_then(|&m| self.featurizer.series_index(&SeriesKey::new(obs.service.clone(), MetricId(m as u16))));
            match idx {
                Some(j) => self.values[j] = obs.value,
                None if self.skipped.contains(&(obs.service.clone(), obs.metric.clone())) => {}
                None => {
                    return Err(MelodyError::UnknownSeries {
                        service: obs.service.clone(),
                        metric: obs.metric.clone(),
                    })
                }
            }
        }
        self.featurizer.step(input.t, &self.values)?;
        let raw = self.featurizer.raw_features();
        // cannot fail for a model that passed its construction checks
        let decision = self.model.decide(&self.model.normalize(&raw)?)?;
        let score = decision.score.as_f64();
        let anomalous = match self.config.threshold {
            Some(th) => score >= th,
            None => decision.anomalous,
        };
        self.streak = if anomalous { self.streak + 1 } else { 0 };
        if self.streak >= self.config.patience {
            self.rolled_back = true;
        }
        let verdict = if self.rolled_back { Verdict::Rollback } else { Verdict::Continue };
        self.steps += 1;
        if self.config.history_limit > 0 {
            if self.history.len() == self.config.history_limit {
                self.history.pop_front();
            }
            self.history.push_back(ScorePoint {
                t: input.t,
                score,
                decision: verdict,
            });
        }
        Ok(ScoreReport {
            id: self.id.clone(),
            t: input.t,
            score,
            anomalous,
            stage: decision.stage,
            decision: verdict,
            top_features: self.top_features(&raw),
        })
    }

    fn top_features(&self, raw: &RawFeatures<F>) -> Vec<TopFeature> {
        let imp = &self.model.importance;
        let mut ranked: Vec<TopFeature> = (0..self.model.schema.pooled())
            .filter_map(|i| {
                let v = raw.pooled(i)?.as_f64();
                let c = v * imp.get(i).copied().unwrap_or(0.0);
                (c > 0.0).then(|| TopFeature {
                    name: self.model.schema.names[i].clone(),
                    value: v,
                    contribution: c,
                })
            })
            .collect();
        ranked.sort_by(|a, b| b.contribution.total_cmp(&a.contribution).then_with(|| a.name.cmp(&b.name)));
        ranked.truncate(self.config.top_k);
        ranked
    }
}

/// Scores every stream step of a stored entity through a fresh session.
pub fn replay_entity<F: Scalar>(model: Arc<HybridModel<F>>, entity: &EntityRecord) -> Result<Vec<ScoreReport>> {
    let names = model.metrics.clone();
    let mut session = open_session(model, &SessionInit::from_entity(entity, &names))?;
    (0..entity.stream_len())
        .map(|k| session.step(&StepInput::from_entity(entity, &names, k)))
        .collect()
}

type Shared<F> = Arc<Mutex<EntitySession<F>>>;

/// Concurrent set of live sessions sharing one model.
#[derive(Debug)]
pub struct SessionRegistry<F> {
    model: Arc<HybridModel<F>>,
    sessions: RwLock<HashMap<String, Shared<F>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloseSummary {
    pub id: String,
    pub steps: usize,
    pub rolled_back: bool,
}

impl<F: Scalar> SessionRegistry<F> {
    pub fn new(model: Arc<HybridModel<F>>) -> Self {
        Self {
            model,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &Arc<HybridModel<F>> {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn open(&self, init: &SessionInit) -> Result<OpenSummary> {
        if self.sessions.read().expect("session map poisoned").contains_key(&init.id) {
            return Err(MelodyError::DuplicateEntity(init.id.clone()));
        }
        let session = open_session(self.model.clone(), init)?;
        let summary = session.summary();
        let mut map = self.sessions.write().expect("session map poisoned");
        if map.contains_key(&init.id) {
            return Err(MelodyError::DuplicateEntity(init.id.clone()));
        }
        map.insert(init.id.clone(), Arc::new(Mutex::new(session)));
        Ok(summary)
    }

    fn get(&self, id: &str) -> Result<Shared<F>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| MelodyError::UnknownSession(id.to_string()))
    }

    pub fn step(&self, id: &str, input: &StepInput) -> Result<ScoreReport> {
        let s = self.get(id)?;
        let mut guard = s.lock().expect("session poisoned");
        guard.step(input)
    }

    pub fn scores(&self, id: &str) -> Result<Vec<ScorePoint>> {
        let s = self.get(id)?;
        let guard = s.lock().expect("session poisoned");
        Ok(guard.score_history())
    }

    pub fn close(&self, id: &str) -> Result<CloseSummary> {
        let s = self
            .sessions
            .write()
            .expect("session map poisoned")
            .remove(id)
            .ok_or_else(|| MelodyError::UnknownSession(id.to_string()))?;
        let guard = s.lock().expect("session poisoned");
        Ok(CloseSummary {
            id: id.to_string(),
            steps: guard.steps(),
            rolled_back: guard.rolled_back(),
        })
    }

    /// Dispatches one protocol request.
    pub fn handle(&self, req: Request) -> Response {
        let result = match req {
            Request::Open(init) => self.open(&init).map(Reply::Open),
            Request::Step { id, t, values } => self.step(&id, &StepInput { t, values }).map(Reply::Step),
            Request::Scores { id } => self.scores(&id).map(|scores| Reply::Scores { id, scores }),
            Request::Close { id } => self.close(&id).map(Reply::Close),
        };
        match result {
            Ok(r) => Response::ok(r),
            Err(e) => Response::error(&e),
        }
    }
}

/// Protocol request, tagged by `op`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Open(SessionInit),
    Step { id: String, t: i64, values: Vec<ValueObs> },
    Scores { id: String },
    Close { id: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Reply {
    Open(OpenSummary),
    Step(ScoreReport),
    Scores { id: String, scores: Vec<ScorePoint> },
    Close(CloseSummary),
    Error { code: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(flatten)]
    pub reply: Reply,
}

impl Response {
    pub fn ok(reply: Reply) -> Self {
        Self { ok: true, reply }
    }

    pub fn error(e: &MelodyError) -> Self {
        Self::error_with(e.code(), e.to_string())
    }

    pub fn error_with(code: &str, message: String) -> Self {
        Self {
            ok: false,
            reply: Reply::Error {
                code: code.to_string(),
                message,
            },
        }
    }
}

/// Parses one NDJSON line and handles it.
pub fn handle_line<F: Scalar>(registry: &SessionRegistry<F>, line: &str) -> Response {
    match serde_json::from_str::<Request>(line) {
        Ok(req) => registry.handle(req),
        Err(e) => Response::error_with("bad_request", e.to_string()),
    }
}

/// Serves requests line by line until end of input. Blank lines are skipped.
pub fn serve_ndjson<F: Scalar, R: BufRead, W: Write>(registry: &SessionRegistry<F>, reader: R, mut writer: W) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(registry, &line);
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_format() {
        let r: Request = serde_json::from_str(
            r#"{"op":"step","id":"e1","t":11,"values":[{"service":"api","metric":"cpu_utilization","value":null}]}"#,
        )
        .unwrap();
        assert_eq!(
            r,
            Request::Step {
                id: "e1".into(),
                t: 11,
                values: vec![ValueObs {
                    service: "api".into(),
                    metric: "cpu_utilization".into(),
                    value: None
                }]
            }
        );
        let r: Request = serde_json::from_str(r#"{"op":"close","id":"x"}"#).unwrap();
        assert_eq!(r, Request::Close { id: "x".into() });
    }

    #[test]
    fn error_response_shape() {
        let v = serde_json::to_value(Response::error(&MelodyError::UnknownSession("z".into()))).unwrap();
        assert_eq!(v["ok"], false);
        assert_eq!(v["op"], "error");
        assert_eq!(v["code"], "unknown_session");
    }
}
