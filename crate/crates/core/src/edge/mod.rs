//! Per-vehicle edge gateway: streaming LOF scoring, threshold gating,
//! labeling, and application of cloud-distributed model snapshots.

pub mod classifier;
pub mod gateway;
pub mod lof;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{Scaling, SimMs, TelemetryError, TelemetryFrame};

pub use classifier::{classify, Classification, LabelWeights, LinearClassifier};
pub use gateway::{gate, Gateway, GatewayConfig, GateDecision, GateState, IngestOutcome};
pub use lof::{lof_score, LofParams, LofWindow};

pub const ANOMALY_SCHEMA: &str = "anomaly_report.v1";
pub const MODEL_SCHEMA: &str = "model_snapshot.v1";
pub const MODEL_TOPIC: &str = "fleet/model";

pub fn anomaly_topic(vehicle_id: &str) -> String {
    format!("fleet/{vehicle_id}/anomaly")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdgeError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("model validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

/// Versioned bundle distributed cloud → edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub version: u64,
    pub scaling: Scaling,
    pub classifier: LinearClassifier,
    pub lof: LofParams,
    pub alert_threshold: f64,
    pub confidence_margin: f64,
}

impl ModelSnapshot {
    pub fn validate(&self) -> Result<(), EdgeError> {
        if self.version < 1 {
            return Err(EdgeError::Validation("version must be >= 1".into()));
        }
        self.lof.validate()?;
        self.classifier.dim()?;
        if !self.alert_threshold.is_finite() {
            return Err(EdgeError::Validation("alert_threshold must be finite".into()));
        }
        if !(self.confidence_margin >= 0.0) || !self.confidence_margin.is_finite() {
            return Err(EdgeError::Validation("confidence_margin must be a finite value >= 0".into()));
        }
        if self.scaling.values().any(|s| !s.mean.is_finite() || !s.stddev.is_finite() || s.stddev < 0.0) {
            return Err(EdgeError::Validation("scaling statistics must be finite with stddev >= 0".into()));
        }
        Ok(())
    }

    /// Checks that the snapshot can drive a gateway with these sensors.
    pub fn validate_for(&self, sensor_ids: &[String]) -> Result<(), EdgeError> {
        self.validate()?;
        for id in sensor_ids {
            if !self.scaling.contains_key(id) {
                return Err(EdgeError::Validation(format!("no scaling entry for sensor {id}")));
            }
        }
        if let Some(dim) = self.classifier.dim()? {
            if dim != sensor_ids.len() {
                return Err(EdgeError::Validation(format!(
                    "classifier dimension {dim} does not match {} sensors",
                    sensor_ids.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub first_ts: SimMs,
    pub last_ts: SimMs,
}

impl TimeWindow {
    pub fn overlaps(&self, start: SimMs, end: SimMs) -> bool {
        self.first_ts <= end && start <= self.last_ts
    }
}

/// Edge-side suspicious-data record. Field order is the JSON order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub report_id: String,
    pub vehicle_id: String,
    pub episode_id: u64,
    pub window: TimeWindow,
    pub score: f64,
    pub label: Option<String>,
    pub confidence: Option<f64>,
    pub feature_deviations: std::collections::BTreeMap<String, f64>,
    pub model_version: u64,
    /// Context frames, oldest first, then the gated frame last.
    pub raw_frames: Vec<TelemetryFrame>,
}

impl AnomalyReport {
    pub fn gated_frame(&self) -> Option<&TelemetryFrame> {
        self.raw_frames.last()
    }

    pub fn report_ts(&self) -> SimMs {
        self.window.last_ts
    }
}
