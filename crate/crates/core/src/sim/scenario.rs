//! Scenario documents: one TOML (or JSON) file binding fleet, failures,
//! logistics and thresholds into a runnable configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Depot, PartSpec, Printer, StaffMember, Topology};
use crate::bus::FaultModel;
use crate::cloud::{CloudConfig, PartSensorMap};
use crate::edge::{GatewayConfig, LinearClassifier, LofParams, ModelSnapshot};
use crate::telemetry::{FailureSignature, Scaling, SensorScaling, SimMs, VehicleProfile};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("dangling reference: {kind} {id:?} referenced by {from} does not exist")]
    Dangling { kind: &'static str, id: String, from: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub alert_threshold: f64,
    pub confidence_margin: f64,
    /// Minimum impact that triggers an order.
    pub order_threshold: f64,
    /// Logistic slope `a` of the failure-probability model.
    pub impact_slope: f64,
    /// Logistic midpoint `s0`.
    pub impact_midpoint: f64,
    pub horizon_ms: SimMs,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            alert_threshold: 2.0,
            confidence_margin: 0.5,
            order_threshold: 1.0,
            impact_slope: 1.0,
            impact_midpoint: 2.0,
            horizon_ms: 3_600_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StockEntry {
    pub part_id: String,
    pub depot_id: String,
    pub count: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialModel {
    pub version: u64,
    pub classifier: LinearClassifier,
    /// Fleet scaling; computed from calibration frames when absent.
    pub scaling: Option<Scaling>,
}

impl Default for InitialModel {
    fn default() -> Self {
        Self { version: 1, classifier: LinearClassifier::default(), scaling: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub seed: u64,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub edge: GatewayConfig,
    #[serde(default)]
    pub lof: LofParams,
    #[serde(default)]
    pub cloud: CloudConfig,
    #[serde(default)]
    pub bus: FaultModel,
    #[serde(default)]
    pub vehicles: Vec<VehicleProfile>,
    #[serde(default)]
    pub signatures: Vec<FailureSignature>,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub parts: Vec<PartSpec>,
    #[serde(default)]
    pub part_sensor_map: PartSensorMap,
    #[serde(default)]
    pub damage_table: BTreeMap<String, f64>,
    #[serde(default)]
    pub depots: Vec<Depot>,
    #[serde(default)]
    pub inventory: Vec<StockEntry>,
    #[serde(default)]
    pub printers: Vec<Printer>,
    #[serde(default)]
    pub staff: Vec<StaffMember>,
    #[serde(default)]
    pub initial_model: InitialModel,
}

fn unique<'a>(kind: &str, ids: impl IntoIterator<Item = &'a String>) -> Result<BTreeSet<&'a str>, ScenarioError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return invalid(format!("duplicate {kind} {id:?}"));
        }
    }
    Ok(seen)
}

fn resolve(set: &BTreeSet<&str>, kind: &'static str, id: &str, from: impl Into<String>) -> Result<(), ScenarioError> {
    if set.contains(id) {
        Ok(())
    } else {
        Err(ScenarioError::Dangling { kind, id: id.to_string(), from: from.into() })
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Sensor ids shared by every vehicle, sorted.
    pub fn fleet_sensors(&self) -> Vec<String> {
        self.vehicles.first().map(|v| v.sensor_ids()).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema != SCHEMA_VERSION {
            return invalid(format!("unsupported schema {} (expected {SCHEMA_VERSION})", self.schema));
        }
        let t = &self.thresholds;
        for (name, v) in [
            ("alert_threshold", t.alert_threshold),
            ("order_threshold", t.order_threshold),
            ("impact_slope", t.impact_slope),
            ("impact_midpoint", t.impact_midpoint),
        ] {
            if !v.is_finite() {
                return invalid(format!("thresholds.{name} must be finite"));
            }
        }
        if t.horizon_ms < 0 {
            return invalid("thresholds.horizon_ms must be >= 0");
        }
        if self.edge.cooldown_ms < 0 {
            return invalid("edge.cooldown_ms must be >= 0");
        }
        self.bus.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.cloud.reference_capacity == 0 {
            return invalid("cloud.reference_capacity must be >= 1");
        }
        if self.cloud.label_delay_ms < 0 {
            return invalid("cloud.label_delay_ms must be >= 0");
        }

        self.topology.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let locations: BTreeSet<&str> = self.topology.locations.iter().map(String::as_str).collect();

        let vehicles = unique("vehicle_id", self.vehicles.iter().map(|v| &v.vehicle_id))?;
        let fleet = self.fleet_sensors();
        for v in &self.vehicles {
            v.validate().map_err(|e| ScenarioError::Invalid(format!("vehicle {}: {e}", v.vehicle_id)))?;
            if v.sensor_ids() != fleet {
                return invalid(format!("vehicle {} sensors differ from the fleet sensor set {fleet:?}", v.vehicle_id));
            }
            if v.route.departure_ts < 0 {
                return invalid(format!("vehicle {}: departure_ts must be >= 0", v.vehicle_id));
            }
            let from = format!("vehicle {}", v.vehicle_id);
            resolve(&locations, "location", &v.route.origin, from.clone())?;
            resolve(&locations, "location", &v.route.destination, from)?;
        }

        let parts = unique("part_id", self.parts.iter().map(|p| &p.part_id))?;
        unique("signature_id", self.signatures.iter().map(|s| &s.signature_id))?;
        for s in &self.signatures {
            let from = format!("signature {}", s.signature_id);
            resolve(&vehicles, "vehicle", &s.vehicle_id, from.clone())?;
            resolve(&parts, "part", &s.true_part_id, from)?;
            let profile = self.vehicles.iter().find(|v| v.vehicle_id == s.vehicle_id).expect("resolved");
            s.validate(profile).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }

        let sensor_set: BTreeSet<&str> = fleet.iter().map(String::as_str).collect();
        for (part, weights) in &self.part_sensor_map.0 {
            resolve(&parts, "part", part, "part_sensor_map")?;
            for w in weights {
                resolve(&sensor_set, "sensor", &w.sensor_id, format!("part_sensor_map.{part}"))?;
            }
        }
        if !self.vehicles.is_empty() {
            let owned: BTreeSet<String> = fleet.iter().cloned().collect();
            self.part_sensor_map.validate(&owned).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        for (label, cost) in &self.damage_table {
            if !(cost.is_finite() && *cost >= 0.0) {
                return invalid(format!("damage_table.{label} must be a finite value >= 0"));
            }
        }
        for p in &self.parts {
            if !(p.holding_cost_per_day >= 0.0 && p.print_cost >= 0.0) {
                return invalid(format!("part {}: costs must be >= 0", p.part_id));
            }
        }

        let depots = unique("depot_id", self.depots.iter().map(|d| &d.depot_id))?;
        for d in &self.depots {
            resolve(&locations, "location", &d.location, format!("depot {}", d.depot_id))?;
        }
        for e in &self.inventory {
            let from = format!("inventory entry {}@{}", e.part_id, e.depot_id);
            resolve(&parts, "part", &e.part_id, from.clone())?;
            resolve(&depots, "depot", &e.depot_id, from)?;
            if e.count < 0 {
                return invalid(format!("inventory count for {}@{} is negative", e.part_id, e.depot_id));
            }
        }
        unique("printer_id", self.printers.iter().map(|p| &p.printer_id))?;
        for p in &self.printers {
            resolve(&locations, "location", &p.location, format!("printer {}", p.printer_id))?;
        }
        unique("staff_id", self.staff.iter().map(|s| &s.staff_id))?;
        for s in &self.staff {
            resolve(&locations, "location", &s.location, format!("staff {}", s.staff_id))?;
            if s.available_until < s.available_from {
                return invalid(format!("staff {}: empty availability window", s.staff_id));
            }
        }

        let probe = ModelSnapshot {
            version: self.initial_model.version,
            scaling: self
                .initial_model
                .scaling
                .clone()
                .unwrap_or_else(|| fleet.iter().map(|s| (s.clone(), SensorScaling { mean: 0.0, stddev: 1.0 })).collect()),
            classifier: self.initial_model.classifier.clone(),
            lof: self.lof,
            alert_threshold: t.alert_threshold,
            confidence_margin: t.confidence_margin,
        };
        probe.validate_for(&fleet).map_err(|e| ScenarioError::Invalid(format!("initial_model: {e}")))?;
        Ok(())
    }
}

/// Loads and validates a scenario; `.json` files are read as JSON, anything
/// else as TOML.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        Scenario::from_json(&text)
    } else {
        Scenario::from_toml(&text)
    }
}
