use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::classifier::{classify, Classification};
use super::lof::LofWindow;
use super::{anomaly_topic, AnomalyReport, EdgeError, ModelSnapshot, TimeWindow, ANOMALY_SCHEMA};
use crate::bus::Envelope;
use crate::telemetry::{standardize, SimMs, TelemetryFrame};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub cooldown_ms: SimMs,
    /// Frames preceding the gated one that travel with a report.
    pub context_frames: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self { cooldown_ms: 60_000, context_frames: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateState {
    pub cooldown_until: SimMs,
    pub open_episode_id: Option<u64>,
    pub episodes_opened: u64,
}

impl Default for GateState {
    fn default() -> Self {
        Self { cooldown_until: SimMs::MIN, open_episode_id: None, episodes_opened: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateDecision {
    Emit { episode_id: u64 },
    Suppress { episode_id: u64 },
    Pass,
}

/// Threshold gate with per-episode cooldown. Only a score strictly above
/// the threshold can open or extend an episode.
pub fn gate(score: f64, report_ts: SimMs, alert_threshold: f64, cooldown_ms: SimMs, state: &GateState) -> (GateDecision, GateState) {
    if !(score > alert_threshold) {
        return (GateDecision::Pass, state.clone());
    }
    if report_ts >= state.cooldown_until {
        let episode_id = state.episodes_opened + 1;
        let next = GateState {
            cooldown_until: state.cooldown_until.max(report_ts.saturating_add(cooldown_ms)),
            open_episode_id: Some(episode_id),
            episodes_opened: episode_id,
        };
        (GateDecision::Emit { episode_id }, next)
    } else {
        let episode_id = state.open_episode_id.unwrap_or(state.episodes_opened);
        (GateDecision::Suppress { episode_id }, state.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub score: f64,
    pub decision: GateDecision,
    pub report: Option<AnomalyReport>,
    pub envelopes: Vec<Envelope>,
}

#[derive(Debug, Clone)]
pub struct Gateway {
    vehicle_id: String,
    sensor_ids: Vec<String>,
    config: GatewayConfig,
    model: ModelSnapshot,
    window: LofWindow,
    /// Raw readings of the window points, oldest first, for re-standardizing.
    raw_points: VecDeque<Vec<f64>>,
    restandardize: bool,
    gate_state: GateState,
    context: VecDeque<TelemetryFrame>,
    episode_frames: Vec<TelemetryFrame>,
}

impl Gateway {
    /// `sensor_ids` must be sorted; that order is the feature order.
    pub fn new(vehicle_id: impl Into<String>, sensor_ids: Vec<String>, model: ModelSnapshot, config: GatewayConfig) -> Result<Self, EdgeError> {
        model.validate_for(&sensor_ids)?;
        Ok(Self {
            vehicle_id: vehicle_id.into(),
            window: LofWindow::new(model.lof),
            sensor_ids,
            config,
            model,
            raw_points: VecDeque::new(),
            restandardize: false,
            gate_state: GateState::default(),
            context: VecDeque::new(),
            episode_frames: Vec::new(),
        })
    }

    pub fn vehicle_id(&self) -> &str {
        &self.vehicle_id
    }

    pub fn model(&self) -> &ModelSnapshot {
        &self.model
    }

    pub fn model_version(&self) -> u64 {
        self.model.version
    }

    pub fn gate_state(&self) -> &GateState {
        &self.gate_state
    }

    pub fn window(&self) -> &LofWindow {
        &self.window
    }

    /// Frames of the currently open episode (the gated frame plus every
    /// suppressed frame since).
    pub fn episode_frames(&self) -> &[TelemetryFrame] {
        &self.episode_frames
    }

    pub fn ingest(&mut self, frame: &TelemetryFrame) -> Result<IngestOutcome, EdgeError> {
        if frame.vehicle_id != self.vehicle_id {
            return Err(EdgeError::SchemaMismatch(format!(
                "frame for vehicle {} delivered to gateway {}",
                frame.vehicle_id, self.vehicle_id
            )));
        }
        if frame.readings.len() != self.sensor_ids.len() || !self.sensor_ids.iter().all(|id| frame.readings.contains_key(id)) {
            return Err(EdgeError::SchemaMismatch(format!("frame sensors do not match gateway {}", self.vehicle_id)));
        }
        if self.restandardize {
            self.rebuild_window()?;
        }

        let features = standardize(frame, &self.model.scaling)?;
        let score = self.window.score(&features)?;
        let (decision, next_state) = gate(score, frame.timestamp, self.model.alert_threshold, self.config.cooldown_ms, &self.gate_state);
        self.gate_state = next_state;

        let mut report = None;
        let mut envelopes = Vec::new();
        match decision {
            GateDecision::Emit { episode_id } => {
                let classification = classify(&features, &self.model.classifier, self.model.confidence_margin)?;
                let mut raw_frames: Vec<TelemetryFrame> = self.context.iter().cloned().collect();
                raw_frames.push(frame.clone());
                let r = AnomalyReport {
                    report_id: format!("rpt-{}-{episode_id:05}", self.vehicle_id),
                    vehicle_id: self.vehicle_id.clone(),
                    episode_id,
                    window: TimeWindow { first_ts: raw_frames[0].timestamp, last_ts: frame.timestamp },
                    score,
                    label: classification.label().map(str::to_string),
                    confidence: classification.confidence(),
                    feature_deviations: self.sensor_ids.iter().cloned().zip(features.iter().map(|x| x.abs())).collect(),
                    model_version: self.model.version,
                    raw_frames,
                };
                debug_assert!(!matches!(classification, Classification::Labeled { confidence, .. } if confidence < self.model.confidence_margin));
                envelopes.push(Envelope::json(r.report_id.clone(), anomaly_topic(&self.vehicle_id), frame.timestamp, ANOMALY_SCHEMA, &r));
                self.episode_frames = vec![frame.clone()];
                report = Some(r);
            }
            GateDecision::Suppress { .. } => self.episode_frames.push(frame.clone()),
            GateDecision::Pass => {}
        }

        self.window.push(features)?;
        self.raw_points.push_back(self.sensor_ids.iter().map(|id| frame.readings[id]).collect());
        while self.raw_points.len() > self.model.lof.window_size {
            self.raw_points.pop_front();
        }
        self.context.push_back(frame.clone());
        while self.context.len() > self.config.context_frames {
            self.context.pop_front();
        }
        Ok(IngestOutcome { score, decision, report, envelopes })
    }

    fn rebuild_window(&mut self) -> Result<(), EdgeError> {
        let scaling = &self.model.scaling;
        let ids = &self.sensor_ids;
        let points: Vec<Vec<f64>> = self
            .raw_points
            .iter()
            .map(|raw| {
                ids.iter()
                    .zip(raw)
                    .map(|(id, v)| {
                        let s = scaling[id];
                        if s.stddev == 0.0 { 0.0 } else { (v - s.mean) / s.stddev }
                    })
                    .collect()
            })
            .collect();
        self.window.rebuild(self.model.lof, points)?;
        while self.raw_points.len() > self.model.lof.window_size {
            self.raw_points.pop_front();
        }
        self.restandardize = false;
        Ok(())
    }

    /// Applies `snapshot` iff it is well-formed for this gateway and newer
    /// than the current model. The reference window is kept and
    /// re-standardized with the new scaling before the next frame.
    pub fn apply_model(&mut self, snapshot: ModelSnapshot) -> Result<bool, EdgeError> {
        snapshot.validate_for(&self.sensor_ids)?;
        if snapshot.version <= self.model.version {
            return Ok(false);
        }
        self.model = snapshot;
        self.restandardize = true;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::{LabelWeights, LinearClassifier, LofParams};
    use crate::telemetry::{SensorScaling, Scaling};
    use std::collections::BTreeMap;

    fn snapshot(version: u64) -> ModelSnapshot {
        let scaling: Scaling = ["a", "b"].iter().map(|s| (s.to_string(), SensorScaling { mean: 0.0, stddev: 1.0 })).collect();
        ModelSnapshot {
            version,
            scaling,
            classifier: LinearClassifier::default(),
            lof: LofParams { k: 2, window_size: 16, reach_floor: 1e-9 },
            alert_threshold: 2.0,
            confidence_margin: 0.5,
        }
    }

    fn frame(t: SimMs, a: f64, b: f64) -> TelemetryFrame {
        let mut readings = BTreeMap::new();
        readings.insert("a".to_string(), a);
        readings.insert("b".to_string(), b);
        TelemetryFrame { vehicle_id: "v".into(), timestamp: t, readings }
    }

    fn gateway() -> Gateway {
        Gateway::new("v", vec!["a".into(), "b".into()], snapshot(1), GatewayConfig::default()).unwrap()
    }

    #[test]
    fn gate_rules() {
        let s0 = GateState::default();
        assert_eq!(gate(0.9, 0, 2.0, 60_000, &s0).0, GateDecision::Pass);
        let (d, s1) = gate(3.0, 1_000, 2.0, 60_000, &s0);
        assert_eq!(d, GateDecision::Emit { episode_id: 1 });
        assert_eq!(s1.cooldown_until, 61_000);
        let (d, s2) = gate(3.1, 2_000, 2.0, 60_000, &s1);
        assert_eq!(d, GateDecision::Suppress { episode_id: 1 });
        assert_eq!(s2, s1);
        let (d, _) = gate(3.1, 61_000, 2.0, 60_000, &s2);
        assert_eq!(d, GateDecision::Emit { episode_id: 2 });
        assert_eq!(gate(2.0, 0, 2.0, 60_000, &s0).0, GateDecision::Pass);
        assert_eq!(gate(f64::NAN, 0, 2.0, 60_000, &s0).0, GateDecision::Pass);
    }

    #[test]
    fn warm_up_emits_nothing() {
        let mut g = gateway();
        for i in 0..3 {
            let out = g.ingest(&frame(i * 1000, 1e6 * i as f64, 0.0)).unwrap();
            assert_eq!(out.score, 1.0);
            assert!(out.envelopes.is_empty());
        }
    }

    #[test]
    fn outlier_after_warm_up_emits_one_report() {
        let mut g = gateway();
        let pts = [(0.0, 0.0), (0.1, 0.0), (0.0, 0.1), (0.1, 0.1), (0.05, 0.05)];
        for (i, (a, b)) in pts.iter().enumerate() {
            assert!(g.ingest(&frame(i as SimMs * 1000, *a, *b)).unwrap().envelopes.is_empty());
        }
        let out = g.ingest(&frame(5000, 20.0, 0.0)).unwrap();
        assert_eq!(out.envelopes.len(), 1);
        let r = out.report.unwrap();
        assert_eq!(r.window, TimeWindow { first_ts: 1000, last_ts: 5000 });
        assert_eq!(r.raw_frames.len(), 5);
        assert_eq!(r.label, None);
        assert_eq!(r.confidence, None);
        assert_eq!(out.envelopes[0].topic, "fleet/v/anomaly");
        let decoded: AnomalyReport = out.envelopes[0].decode().unwrap();
        assert_eq!(decoded, r);

        let out = g.ingest(&frame(6000, 25.0, 0.0)).unwrap();
        assert!(matches!(out.decision, GateDecision::Suppress { episode_id: 1 } | GateDecision::Pass));
        assert!(out.envelopes.is_empty());
    }

    #[test]
    fn labeled_reports_respect_margin() {
        let mut snap = snapshot(1);
        let mut labels = BTreeMap::new();
        labels.insert("a_fault".to_string(), LabelWeights { weights: vec![1.0, 0.0], bias: -3.0 });
        labels.insert("normal".to_string(), LabelWeights { weights: vec![0.0, 0.0], bias: 0.0 });
        snap.classifier = LinearClassifier { labels };
        let mut g = Gateway::new("v", vec!["a".into(), "b".into()], snap, GatewayConfig::default()).unwrap();
        for (i, (a, b)) in [(0.0, 0.0), (0.1, 0.0), (0.0, 0.1), (0.1, 0.1)].iter().enumerate() {
            g.ingest(&frame(i as SimMs * 1000, *a, *b)).unwrap();
        }
        let r = g.ingest(&frame(9000, 20.0, 0.0)).unwrap().report.unwrap();
        assert_eq!(r.label.as_deref(), Some("a_fault"));
        assert_eq!(r.confidence, Some(17.0));
    }

    #[test]
    fn model_versions_only_move_forward() {
        let mut g = gateway();
        assert!(g.apply_model(snapshot(2)).unwrap());
        assert_eq!(g.model_version(), 2);
        assert!(!g.apply_model(snapshot(2)).unwrap());
        assert!(g.apply_model(snapshot(3)).unwrap());
        assert!(!g.apply_model(snapshot(1)).unwrap());
        assert_eq!(g.model_version(), 3);

        let mut bad = snapshot(9);
        bad.scaling.remove("b");
        assert!(matches!(g.apply_model(bad), Err(EdgeError::Validation(_))));
        assert_eq!(g.model_version(), 3);
    }

    #[test]
    fn new_scaling_restandardizes_window() {
        let mut g = gateway();
        for i in 0..6 {
            g.ingest(&frame(i * 1000, i as f64, 2.0 * i as f64)).unwrap();
        }
        let mut snap = snapshot(2);
        snap.scaling.insert("a".into(), SensorScaling { mean: 1.0, stddev: 2.0 });
        g.apply_model(snap).unwrap();
        g.ingest(&frame(6000, 6.0, 12.0)).unwrap();
        let first = g.window().points().next().unwrap().clone();
        assert_eq!(first, vec![-0.5, 0.0]);
    }

    #[test]
    fn rejects_foreign_frames() {
        let mut g = gateway();
        let mut f = frame(0, 0.0, 0.0);
        f.readings.remove("b");
        assert!(matches!(g.ingest(&f), Err(EdgeError::SchemaMismatch(_))));
        let mut f = frame(0, 0.0, 0.0);
        f.vehicle_id = "other".into();
        assert!(g.ingest(&f).is_err());
    }
}
