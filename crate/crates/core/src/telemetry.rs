//! Sensor data model and seeded synthetic telemetry.
//!
//! A [`VehicleProfile`] describes the sensors of one vehicle and its route.
//! [`generate_frame`] produces one multidimensional sample at a simulated
//! instant: every sensor draws exactly one standard-normal variate from the
//! vehicle's [`GenState`] (in sensor-id order), whether or not a failure
//! signature is active. Signatures only distort the drawn value, so the
//! sequence before a signature's onset is identical to the sequence of a
//! signature-free run under the same seed.
//!
//! Noise is `ChaCha8Rng` output mapped through `rand_distr::StandardNormal`
//! (ziggurat), both fully specified and platform independent.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_rng;

/// Simulated time in integer milliseconds from epoch 0.
pub type SimMs = i64;

/// Standardized feature vector, one entry per sensor in sensor-id order.
pub type FeatureVector = Vec<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("timestamp {t} outside route interval [{departure}, {arrival}] of vehicle {vehicle_id}")]
    OutOfRoute {
        vehicle_id: String,
        t: SimMs,
        departure: SimMs,
        arrival: SimMs,
    },
    #[error("timestamp {t} is not on the sampling grid of vehicle {vehicle_id}")]
    OffGrid { vehicle_id: String, t: SimMs },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub sensor_id: String,
    #[serde(default)]
    pub unit: String,
    pub baseline_mean: f64,
    pub baseline_stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub origin: String,
    pub destination: String,
    pub departure_ts: SimMs,
    pub arrival_ts: SimMs,
}

impl Route {
    pub fn contains(&self, t: SimMs) -> bool {
        t >= self.departure_ts && t <= self.arrival_ts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleProfile {
    pub vehicle_id: String,
    pub sensors: Vec<SensorSpec>,
    pub route: Route,
    pub sample_period: SimMs,
}

impl VehicleProfile {
    pub fn validate(&self) -> Result<(), TelemetryError> {
        let bad = |msg: String| Err(TelemetryError::InvalidProfile(format!("{}: {msg}", self.vehicle_id)));
        if self.sensors.is_empty() {
            return bad("no sensors".into());
        }
        if self.sample_period <= 0 {
            return bad(format!("sample_period must be > 0, got {}", self.sample_period));
        }
        if self.route.departure_ts >= self.route.arrival_ts {
            return bad("departure_ts must precede arrival_ts".into());
        }
        let mut seen = BTreeSet::new();
        for s in &self.sensors {
            if !seen.insert(s.sensor_id.as_str()) {
                return bad(format!("duplicated sensor_id {}", s.sensor_id));
            }
            if !(s.baseline_stddev >= 0.0) || !s.baseline_stddev.is_finite() || !s.baseline_mean.is_finite() {
                return bad(format!("sensor {} has invalid baseline", s.sensor_id));
            }
        }
        Ok(())
    }

    /// Sensors sorted by id; this is the feature order everywhere.
    pub fn sorted_sensors(&self) -> Vec<&SensorSpec> {
        let mut v: Vec<&SensorSpec> = self.sensors.iter().collect();
        v.sort_by(|a, b| a.sensor_id.cmp(&b.sensor_id));
        v
    }

    pub fn sensor_ids(&self) -> Vec<String> {
        self.sorted_sensors().into_iter().map(|s| s.sensor_id.clone()).collect()
    }

    /// Sampling instants `departure_ts + i * sample_period` up to arrival.
    pub fn sample_times(&self) -> impl Iterator<Item = SimMs> + '_ {
        let start = self.route.departure_ts;
        let end = self.route.arrival_ts;
        let period = self.sample_period;
        (0..).map(move |i| start + i * period).take_while(move |t| *t <= end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub vehicle_id: String,
    pub timestamp: SimMs,
    pub readings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SignaturePattern {
    /// Additive drift of `rate_per_ms` reading units per elapsed millisecond.
    Drift { rate_per_ms: f64 },
    /// Adds `magnitude` baseline standard deviations on every `every_n`-th
    /// sample counted from onset (the onset sample included).
    Spike { magnitude: f64, every_n: u32 },
    /// Multiplies the noise term by `factor`.
    VarianceInflation { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSignature {
    pub signature_id: String,
    pub vehicle_id: String,
    pub affected_sensors: Vec<String>,
    pub onset_ts: SimMs,
    pub pattern: SignaturePattern,
    pub true_part_id: String,
    pub true_label: String,
}

impl FailureSignature {
    pub fn validate(&self, profile: &VehicleProfile) -> Result<(), TelemetryError> {
        let bad = |msg: String| Err(TelemetryError::InvalidProfile(format!("signature {}: {msg}", self.signature_id)));
        if self.affected_sensors.is_empty() {
            return bad("affected_sensors is empty".into());
        }
        if !profile.route.contains(self.onset_ts) {
            return bad(format!("onset_ts {} outside route interval", self.onset_ts));
        }
        for s in &self.affected_sensors {
            if !profile.sensors.iter().any(|p| &p.sensor_id == s) {
                return bad(format!("unknown sensor {s}"));
            }
        }
        let finite = match self.pattern {
            SignaturePattern::Drift { rate_per_ms } => rate_per_ms.is_finite(),
            SignaturePattern::Spike { magnitude, every_n } => magnitude.is_finite() && every_n >= 1,
            SignaturePattern::VarianceInflation { factor } => factor.is_finite(),
        };
        if !finite {
            return bad("pattern parameters must be finite (and every_n >= 1)".into());
        }
        Ok(())
    }
}

/// Generator state of one vehicle stream.
#[derive(Debug, Clone)]
pub struct GenState {
    rng: ChaCha8Rng,
}

impl GenState {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { rng: stream_rng(seed, stream) }
    }

    fn next_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

pub fn generate_frame(
    profile: &VehicleProfile,
    t: SimMs,
    gen_state: &mut GenState,
    active_signatures: &[FailureSignature],
) -> Result<TelemetryFrame, TelemetryError> {
    let route = &profile.route;
    if !route.contains(t) {
        return Err(TelemetryError::OutOfRoute {
            vehicle_id: profile.vehicle_id.clone(),
            t,
            departure: route.departure_ts,
            arrival: route.arrival_ts,
        });
    }
    if (t - route.departure_ts) % profile.sample_period != 0 {
        return Err(TelemetryError::OffGrid { vehicle_id: profile.vehicle_id.clone(), t });
    }

    let mut readings = BTreeMap::new();
    for sensor in profile.sorted_sensors() {
        let z = gen_state.next_normal();
        let sd = sensor.baseline_stddev;
        let mut noise_scale = 1.0;
        let mut offset = 0.0;
        for sig in active_signatures {
            if sig.vehicle_id != profile.vehicle_id
                || t < sig.onset_ts
                || !sig.affected_sensors.iter().any(|s| s == &sensor.sensor_id)
            {
                continue;
            }
            let elapsed = t - sig.onset_ts;
            match sig.pattern {
                SignaturePattern::Drift { rate_per_ms } => offset += rate_per_ms * elapsed as f64,
                SignaturePattern::Spike { magnitude, every_n } => {
                    let idx = elapsed / profile.sample_period;
                    if idx % i64::from(every_n.max(1)) == 0 {
                        offset += magnitude * sd;
                    }
                }
                SignaturePattern::VarianceInflation { factor } => noise_scale *= factor,
            }
        }
        let value = sensor.baseline_mean + sd * noise_scale * z + offset;
        readings.insert(sensor.sensor_id.clone(), value);
    }
    Ok(TelemetryFrame { vehicle_id: profile.vehicle_id.clone(), timestamp: t, readings })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorScaling {
    pub mean: f64,
    pub stddev: f64,
}

/// Per-sensor scaling statistics keyed by sensor id.
pub type Scaling = BTreeMap<String, SensorScaling>;

pub fn scaling_from_profile(profile: &VehicleProfile) -> Scaling {
    profile
        .sensors
        .iter()
        .map(|s| (s.sensor_id.clone(), SensorScaling { mean: s.baseline_mean, stddev: s.baseline_stddev }))
        .collect()
}

pub fn standardize(frame: &TelemetryFrame, scaling: &Scaling) -> Result<FeatureVector, TelemetryError> {
    frame
        .readings
        .iter()
        .map(|(id, &value)| {
            let s = scaling
                .get(id)
                .ok_or_else(|| TelemetryError::SchemaMismatch(format!("no scaling entry for sensor {id}")))?;
            Ok(if s.stddev == 0.0 { 0.0 } else { (value - s.mean) / s.stddev })
        })
        .collect()
}

/// Inverse of [`standardize`] for sensors with positive stddev.
pub fn destandardize(features: &[f64], sensor_ids: &[String], scaling: &Scaling) -> Result<Vec<f64>, TelemetryError> {
    if features.len() != sensor_ids.len() {
        return Err(TelemetryError::SchemaMismatch(format!(
            "{} features for {} sensors",
            features.len(),
            sensor_ids.len()
        )));
    }
    features
        .iter()
        .zip(sensor_ids)
        .map(|(f, id)| {
            let s = scaling
                .get(id)
                .ok_or_else(|| TelemetryError::SchemaMismatch(format!("no scaling entry for sensor {id}")))?;
            Ok(f * s.stddev + s.mean)
        })
        .collect()
}

/// Population mean and standard deviation per sensor over `frames`.
pub fn scaling_from_frames<'a>(frames: impl IntoIterator<Item = &'a TelemetryFrame>) -> Scaling {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in frames {
        for (id, v) in &f.readings {
            acc.entry(id.clone()).or_default().push(*v);
        }
    }
    acc.into_iter()
        .map(|(id, values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (id, SensorScaling { mean, stddev: var.sqrt() })
        })
        .collect()
}

/// One JSON object per line, fields in declaration order, readings sorted.
pub fn frames_to_jsonl(frames: &[TelemetryFrame]) -> String {
    let mut out = String::new();
    for f in frames {
        out.push_str(&serde_json::to_string(f).expect("frame serializes"));
        out.push('\n');
    }
    out
}
