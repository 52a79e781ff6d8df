//! Cloud side: deep re-analysis of edge reports, suspect-part localization,
//! judge records, and the retrain → validate → release model cycle.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::Envelope;
use crate::edge::{classify, lof_score, AnomalyReport, EdgeError, LabelWeights, LinearClassifier, LofParams, ModelSnapshot, MODEL_SCHEMA, MODEL_TOPIC};
use crate::rng::{stream_rng, RESERVOIR_STREAM};
use crate::telemetry::{scaling_from_frames, standardize, FeatureVector, Scaling, SimMs, TelemetryFrame};

pub const DEFAULT_REFERENCE_CAPACITY: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error(transparent)]
    Edge(#[from] EdgeError),
}

impl From<crate::telemetry::TelemetryError> for CloudError {
    fn from(e: crate::telemetry::TelemetryError) -> Self {
        CloudError::Schema(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorWeight {
    pub sensor_id: String,
    pub weight: f64,
}

/// part_id → sensors that indicate it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartSensorMap(pub BTreeMap<String, Vec<SensorWeight>>);

impl PartSensorMap {
    pub fn validate(&self, sensors: &BTreeSet<String>) -> Result<(), CloudError> {
        if self.0.is_empty() {
            return Err(CloudError::Catalog("part-sensor map is empty".into()));
        }
        for (part, entries) in &self.0 {
            for e in entries {
                if !e.weight.is_finite() || e.weight < 0.0 {
                    return Err(CloudError::Catalog(format!("part {part}: weight for {} must be finite and >= 0", e.sensor_id)));
                }
            }
        }
        for s in sensors {
            if !self.covers(s) {
                return Err(CloudError::Catalog(format!("sensor {s} is not mapped to any part")));
            }
        }
        Ok(())
    }

    pub fn covers(&self, sensor_id: &str) -> bool {
        self.0.values().flatten().any(|e| e.sensor_id == sensor_id)
    }
}

/// Part maximizing `Σ weight · deviation`; ties go to the smallest part id.
pub fn localize_part(feature_deviations: &BTreeMap<String, f64>, map: &PartSensorMap) -> Result<String, CloudError> {
    let mut best: Option<(&String, f64)> = None;
    for (part, entries) in &map.0 {
        let score: f64 = entries
            .iter()
            .map(|e| e.weight * feature_deviations.get(&e.sensor_id).copied().unwrap_or(0.0))
            .sum();
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((part, score));
        }
    }
    best.map(|(p, _)| p.clone()).ok_or_else(|| CloudError::Catalog("part-sensor map is empty".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosedAnomaly {
    pub report: AnomalyReport,
    pub refined_score: f64,
    pub suspect_part_id: String,
    /// `None` when the cloud classifier abstains.
    pub severity_label: Option<String>,
    pub diagnosed_ts: SimMs,
}

/// Re-scores the report's gated frame against the cloud reference set
/// (already standardized with `model.scaling`), localizes the part and
/// labels the severity with the cloud model.
pub fn deep_analyze(
    report: &AnomalyReport,
    reference: &[FeatureVector],
    map: &PartSensorMap,
    model: &ModelSnapshot,
    diagnosed_ts: SimMs,
) -> Result<DiagnosedAnomaly, CloudError> {
    let gated = report
        .gated_frame()
        .ok_or_else(|| CloudError::Schema(format!("report {} carries no frames", report.report_id)))?;
    for sensor in gated.readings.keys() {
        if !map.covers(sensor) {
            return Err(CloudError::Catalog(format!("sensor {sensor} is not in the part catalog")));
        }
    }
    let point = standardize(gated, &model.scaling)?;
    if let Some(r) = reference.first() {
        if r.len() != point.len() {
            return Err(CloudError::Schema(format!(
                "reference dimension {} does not match report dimension {}",
                r.len(),
                point.len()
            )));
        }
    }
    let params = LofParams { window_size: reference.len().max(1), ..model.lof };
    let refined_score = lof_score(&point, reference, &params)?;
    let suspect_part_id = localize_part(&report.feature_deviations, map)?;
    let severity = classify(&point, &model.classifier, model.confidence_margin)?;
    Ok(DiagnosedAnomaly {
        report: report.clone(),
        refined_score,
        suspect_part_id,
        severity_label: severity.label().map(str::to_string),
        diagnosed_ts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRecord {
    pub report_id: String,
    pub predicted_label: Option<String>,
    pub true_label: Option<String>,
    pub refined_score: f64,
    pub ts: SimMs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawKind {
    /// Historical normal operation, the basis of scaling statistics.
    Calibration,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEntry {
    pub kind: RawKind,
    pub report_id: Option<String>,
    pub frame: TelemetryFrame,
}

/// Append-only raw frame storage.
#[derive(Debug, Clone, Default)]
pub struct RawStore {
    entries: Vec<RawEntry>,
    gated: HashMap<String, usize>,
}

impl RawStore {
    pub fn push_calibration(&mut self, frame: TelemetryFrame) {
        self.entries.push(RawEntry { kind: RawKind::Calibration, report_id: None, frame });
    }

    pub fn push_report(&mut self, report: &AnomalyReport) {
        for f in &report.raw_frames {
            self.entries.push(RawEntry { kind: RawKind::Report, report_id: Some(report.report_id.clone()), frame: f.clone() });
        }
        if !report.raw_frames.is_empty() {
            self.gated.insert(report.report_id.clone(), self.entries.len() - 1);
        }
    }

    pub fn gated_frame(&self, report_id: &str) -> Option<&TelemetryFrame> {
        self.gated.get(report_id).map(|&i| &self.entries[i].frame)
    }

    pub fn calibration_frames(&self) -> impl Iterator<Item = &TelemetryFrame> {
        self.entries.iter().filter(|e| e.kind == RawKind::Calibration).map(|e| &e.frame)
    }

    pub fn entries(&self) -> &[RawEntry] {
        &self.entries
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("raw entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Averaged multiclass perceptron. `examples` are (features, label) in
/// training order; the bias is learned as an extra constant feature.
pub fn train_averaged_perceptron(examples: &[(FeatureVector, String)], epochs: usize) -> LinearClassifier {
    let Some((first, _)) = examples.first() else { return LinearClassifier::default() };
    let dim = first.len();
    let labels: BTreeSet<&String> = examples.iter().map(|(_, l)| l).collect();
    let mut weights: BTreeMap<String, Vec<f64>> = labels.iter().map(|l| ((*l).clone(), vec![0.0; dim + 1])).collect();
    let mut sums = weights.clone();
    let augmented = |x: &[f64]| -> Vec<f64> { x.iter().copied().chain(std::iter::once(1.0)).collect() };
    let epochs = epochs.max(1);
    for _ in 0..epochs {
        for (x, y) in examples {
            let xa = augmented(x);
            let mut pred: Option<(&String, f64)> = None;
            for (l, w) in &weights {
                let s: f64 = w.iter().zip(&xa).map(|(a, b)| a * b).sum();
                if pred.is_none_or(|(_, b)| s > b) {
                    pred = Some((l, s));
                }
            }
            let pred = pred.expect("at least one label").0.clone();
            if &pred != y {
                for (w, v) in weights.get_mut(y).expect("known label").iter_mut().zip(&xa) {
                    *w += v;
                }
                for (w, v) in weights.get_mut(&pred).expect("known label").iter_mut().zip(&xa) {
                    *w -= v;
                }
            }
            for (l, w) in &weights {
                for (s, v) in sums.get_mut(l).expect("same keys").iter_mut().zip(w) {
                    *s += v;
                }
            }
        }
    }
    let count = (epochs * examples.len()) as f64;
    LinearClassifier {
        labels: sums
            .into_iter()
            .map(|(l, s)| {
                let avg: Vec<f64> = s.iter().map(|v| v / count).collect();
                (l, LabelWeights { weights: avg[..dim].to_vec(), bias: avg[dim] })
            })
            .collect(),
    }
}

fn accuracy(classifier: &LinearClassifier, margin: f64, holdout: &[(FeatureVector, String)]) -> Result<f64, CloudError> {
    if holdout.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (x, y) in holdout {
        if classify(x, classifier, margin)?.label() == Some(y.as_str()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / holdout.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvaluation {
    pub labeled_records: usize,
    pub train_size: usize,
    pub holdout_size: usize,
    pub candidate_accuracy: f64,
    pub incumbent_accuracy: f64,
    pub incumbent_version: u64,
    pub released: Option<ModelSnapshot>,
}

/// Retrains and validates a candidate; `released` is set only when the
/// candidate beats the incumbent on the holdout (the last 20% of labeled
/// records, rounded up). Returns `None` when there is nothing to train on.
pub fn evaluate_update(history: &[JudgeRecord], raw: &RawStore, current: &ModelSnapshot, epochs: usize) -> Result<Option<UpdateEvaluation>, CloudError> {
    evaluate_update_with_floor(history, raw, current, epochs, 0.0)
}

/// As [`evaluate_update`], additionally requiring the candidate's holdout
/// accuracy to reach `accuracy_floor` (the accuracy recorded when the
/// current model was released).
pub fn evaluate_update_with_floor(
    history: &[JudgeRecord],
    raw: &RawStore,
    current: &ModelSnapshot,
    epochs: usize,
    accuracy_floor: f64,
) -> Result<Option<UpdateEvaluation>, CloudError> {
    let labeled: Vec<(&TelemetryFrame, String)> = history
        .iter()
        .filter_map(|r| Some((raw.gated_frame(&r.report_id)?, r.true_label.clone()?)))
        .collect();
    let n = labeled.len();
    let holdout_size = n.div_ceil(5);
    let train_size = n - holdout_size;
    if train_size == 0 {
        return Ok(None);
    }

    let mut scaling: Scaling = scaling_from_frames(raw.calibration_frames());
    for (id, s) in &current.scaling {
        scaling.entry(id.clone()).or_insert(*s);
    }
    let featurize = |scaling: &Scaling| -> Result<Vec<(FeatureVector, String)>, CloudError> {
        labeled.iter().map(|(f, l)| Ok((standardize(f, scaling)?, l.clone()))).collect()
    };
    let candidate_data = featurize(&scaling)?;
    let incumbent_data = featurize(&current.scaling)?;

    let classifier = train_averaged_perceptron(&candidate_data[..train_size], epochs);
    let candidate_accuracy = accuracy(&classifier, current.confidence_margin, &candidate_data[train_size..])?;
    let incumbent_accuracy = accuracy(&current.classifier, current.confidence_margin, &incumbent_data[train_size..])?;

    let released = (candidate_accuracy > incumbent_accuracy && candidate_accuracy >= accuracy_floor).then(|| ModelSnapshot {
        version: current.version + 1,
        scaling,
        classifier,
        ..current.clone()
    });
    Ok(Some(UpdateEvaluation {
        labeled_records: n,
        train_size,
        holdout_size,
        candidate_accuracy,
        incumbent_accuracy,
        incumbent_version: current.version,
        released,
    }))
}

pub fn update_model(history: &[JudgeRecord], raw: &RawStore, current: &ModelSnapshot, epochs: usize) -> Result<Option<ModelSnapshot>, CloudError> {
    Ok(evaluate_update(history, raw, current, epochs)?.and_then(|e| e.released))
}

pub fn model_envelope(snapshot: &ModelSnapshot, ts: SimMs) -> Envelope {
    Envelope::json(format!("model-v{}", snapshot.version), MODEL_TOPIC, ts, MODEL_SCHEMA, snapshot)
}

/// Algorithm R reservoir of raw reading vectors.
#[derive(Debug, Clone)]
pub struct Reservoir {
    capacity: usize,
    seen: u64,
    items: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self { capacity, seen: 0, items: Vec::new(), rng: stream_rng(seed, RESERVOIR_STREAM) }
    }

    pub fn offer(&mut self, item: Vec<f64>) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = item;
            }
        }
    }

    pub fn items(&self) -> &[Vec<f64>] {
        &self.items
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdatePolicy {
    #[default]
    PlatformOperator,
    Customer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudConfig {
    pub reference_capacity: usize,
    pub update_every: usize,
    pub label_delay_ms: SimMs,
    pub perceptron_epochs: usize,
    pub calibration_frames: usize,
    pub update_policy: UpdatePolicy,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            reference_capacity: DEFAULT_REFERENCE_CAPACITY,
            update_every: 100,
            label_delay_ms: 0,
            perceptron_epochs: 10,
            calibration_frames: 64,
            update_policy: UpdatePolicy::PlatformOperator,
        }
    }
}

#[derive(Debug, Clone)]
struct PendingJudgement {
    due: SimMs,
    diagnosis: DiagnosedAnomaly,
}

/// Stateful cloud analyzer: owns the current model, the reference reservoir,
/// raw storage and the judge history.
#[derive(Debug)]
pub struct CloudAnalyzer {
    config: CloudConfig,
    model: ModelSnapshot,
    map: PartSensorMap,
    sensor_ids: Vec<String>,
    reservoir: Reservoir,
    raw: RawStore,
    judges: Vec<JudgeRecord>,
    pending: VecDeque<PendingJudgement>,
    since_update: usize,
    release_accuracy: f64,
}

impl CloudAnalyzer {
    pub fn new(config: CloudConfig, model: ModelSnapshot, map: PartSensorMap, sensor_ids: Vec<String>, seed: u64) -> Self {
        let reservoir = Reservoir::new(config.reference_capacity, seed);
        Self { config, model, map, sensor_ids, reservoir, raw: RawStore::default(), judges: Vec::new(), pending: VecDeque::new(), since_update: 0, release_accuracy: 0.0 }
    }

    pub fn model(&self) -> &ModelSnapshot {
        &self.model
    }

    pub fn judges(&self) -> &[JudgeRecord] {
        &self.judges
    }

    pub fn raw_store(&self) -> &RawStore {
        &self.raw
    }

    pub fn config(&self) -> &CloudConfig {
        &self.config
    }

    fn raw_vector(&self, frame: &TelemetryFrame) -> Option<Vec<f64>> {
        self.sensor_ids.iter().map(|id| frame.readings.get(id).copied()).collect()
    }

    pub fn add_calibration(&mut self, frame: TelemetryFrame) {
        if let Some(v) = self.raw_vector(&frame) {
            self.reservoir.offer(v);
        }
        self.raw.push_calibration(frame);
    }

    /// Reference set standardized with the current scaling.
    pub fn reference(&self) -> Vec<FeatureVector> {
        self.reservoir
            .items()
            .iter()
            .map(|raw| {
                self.sensor_ids
                    .iter()
                    .zip(raw)
                    .map(|(id, v)| match self.model.scaling.get(id) {
                        Some(s) if s.stddev != 0.0 => (v - s.mean) / s.stddev,
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect()
    }

    /// Deep-analyzes one report and queues its judge record for labeling.
    pub fn analyze(&mut self, report: &AnomalyReport, ts: SimMs) -> Result<DiagnosedAnomaly, CloudError> {
        self.raw.push_report(report);
        let diagnosis = deep_analyze(report, &self.reference(), &self.map, &self.model, ts)?;
        if diagnosis.refined_score <= self.model.alert_threshold {
            if let Some(v) = report.gated_frame().and_then(|f| self.raw_vector(f)) {
                self.reservoir.offer(v);
            }
        }
        self.pending.push_back(PendingJudgement { due: ts + self.config.label_delay_ms, diagnosis: diagnosis.clone() });
        Ok(diagnosis)
    }

    pub fn next_label_due(&self) -> Option<SimMs> {
        self.pending.front().map(|p| p.due)
    }

    /// Appends judge records whose label delay has elapsed, using `truth`
    /// to supply the operator/ground-truth label.
    pub fn backfill_labels(&mut self, now: SimMs, truth: impl Fn(&DiagnosedAnomaly) -> Option<String>) -> Vec<JudgeRecord> {
        let mut out = Vec::new();
        while self.pending.front().is_some_and(|p| p.due <= now) {
            let p = self.pending.pop_front().expect("checked");
            let record = JudgeRecord {
                report_id: p.diagnosis.report.report_id.clone(),
                predicted_label: p.diagnosis.severity_label.clone(),
                true_label: truth(&p.diagnosis),
                refined_score: p.diagnosis.refined_score,
                ts: now,
            };
            self.judges.push(record.clone());
            self.since_update += 1;
            out.push(record);
        }
        out
    }

    /// Runs the update cycle once `update_every` new records have arrived.
    pub fn maybe_update(&mut self) -> Result<Option<UpdateEvaluation>, CloudError> {
        if self.config.update_every == 0 || self.since_update < self.config.update_every {
            return Ok(None);
        }
        self.since_update = 0;
        let eval = evaluate_update_with_floor(&self.judges, &self.raw, &self.model, self.config.perceptron_epochs, self.release_accuracy)?;
        if let Some(e) = eval.as_ref().filter(|e| e.released.is_some()) {
            self.model = e.released.clone().expect("checked");
            self.release_accuracy = e.candidate_accuracy;
        }
        Ok(eval)
    }
}
