//! Programmatic scenario builder for synthetic fleets.

use std::collections::BTreeMap;

use super::scenario::{InitialModel, Scenario, StockEntry, Thresholds, SCHEMA_VERSION};
use crate::backend::{Depot, Link, PartSpec, Printer, StaffMember, Topology};
use crate::bus::FaultModel;
use crate::cloud::{CloudConfig, PartSensorMap, SensorWeight};
use crate::edge::{GatewayConfig, LabelWeights, LinearClassifier, LofParams};
use crate::sim::NORMAL_LABEL;
use crate::telemetry::{FailureSignature, Route, SensorSpec, SignaturePattern, SimMs, VehicleProfile};

pub const ORIGIN: &str = "HUB";
pub const DESTINATION: &str = "DST";

/// One sensor channel and the part/failure class it reveals.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub sensor_id: &'static str,
    pub part_id: &'static str,
    pub category: &'static str,
    pub label: &'static str,
    pub baseline_mean: f64,
    pub baseline_stddev: f64,
}

pub const CHANNELS: [Channel; 3] = [
    Channel { sensor_id: "oil_temp", part_id: "thermostat", category: "thermal", label: "overheat", baseline_mean: 90.0, baseline_stddev: 2.0 },
    Channel { sensor_id: "pressure", part_id: "seal", category: "hydraulic", label: "leak", baseline_mean: 30.0, baseline_stddev: 0.5 },
    Channel { sensor_id: "vibration", part_id: "bearing", category: "mechanical", label: "bearing_wear", baseline_mean: 1.0, baseline_stddev: 0.1 },
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFailure {
    pub vehicle: usize,
    /// Index into [`CHANNELS`].
    pub channel: usize,
    pub onset_after_departure_ms: SimMs,
    pub pattern: SignaturePattern,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetSpec {
    pub seed: u64,
    pub vehicles: usize,
    pub sample_period: SimMs,
    pub trip_ms: SimMs,
    /// Vehicle `i` departs at `i * stagger_ms`.
    pub stagger_ms: SimMs,
    pub failures: Vec<SyntheticFailure>,
    pub printers: usize,
    pub print_minutes: u32,
    pub local_stock: i64,
    pub remote_stock: i64,
    pub transit_ms: SimMs,
    pub thresholds: Thresholds,
    pub lof: LofParams,
    pub edge: GatewayConfig,
    pub cloud: CloudConfig,
    pub bus: FaultModel,
}

impl Default for FleetSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            vehicles: 1,
            sample_period: 60_000,
            trip_ms: 4 * 3_600_000,
            stagger_ms: 0,
            failures: Vec::new(),
            printers: 1,
            print_minutes: 60,
            local_stock: 0,
            remote_stock: 0,
            transit_ms: 3 * 3_600_000,
            thresholds: Thresholds { order_threshold: 100.0, ..Thresholds::default() },
            lof: LofParams { k: 10, window_size: 64, ..LofParams::default() },
            edge: GatewayConfig { cooldown_ms: 30 * 60_000, context_frames: 4 },
            cloud: CloudConfig::default(),
            bus: FaultModel::default(),
        }
    }
}

pub fn vehicle_id(i: usize) -> String {
    format!("v{i:04}")
}

/// Per-label linear scorer: `x[channel] - 5` for each failure class against
/// a zero score for normal.
pub fn reference_classifier() -> LinearClassifier {
    let mut labels = BTreeMap::new();
    labels.insert(NORMAL_LABEL.to_string(), LabelWeights { weights: vec![0.0; CHANNELS.len()], bias: 0.0 });
    let mut order: Vec<usize> = (0..CHANNELS.len()).collect();
    order.sort_by_key(|&i| CHANNELS[i].sensor_id);
    for (pos, &i) in order.iter().enumerate() {
        let mut w = vec![0.0; CHANNELS.len()];
        w[pos] = 1.0;
        labels.insert(CHANNELS[i].label.to_string(), LabelWeights { weights: w, bias: -5.0 });
    }
    LinearClassifier { labels }
}

pub fn fleet(spec: &FleetSpec) -> Scenario {
    let sensors: Vec<SensorSpec> = CHANNELS
        .iter()
        .map(|c| SensorSpec {
            sensor_id: c.sensor_id.into(),
            unit: String::new(),
            baseline_mean: c.baseline_mean,
            baseline_stddev: c.baseline_stddev,
        })
        .collect();
    let vehicles: Vec<VehicleProfile> = (0..spec.vehicles)
        .map(|i| {
            let dep = i as SimMs * spec.stagger_ms;
            VehicleProfile {
                vehicle_id: vehicle_id(i),
                sensors: sensors.clone(),
                route: Route { origin: ORIGIN.into(), destination: DESTINATION.into(), departure_ts: dep, arrival_ts: dep + spec.trip_ms },
                sample_period: spec.sample_period,
            }
        })
        .collect();
    let signatures = spec
        .failures
        .iter()
        .enumerate()
        .map(|(n, f)| {
            let c = &CHANNELS[f.channel];
            FailureSignature {
                signature_id: format!("sig-{n:03}"),
                vehicle_id: vehicle_id(f.vehicle),
                affected_sensors: vec![c.sensor_id.into()],
                onset_ts: vehicles[f.vehicle].route.departure_ts + f.onset_after_departure_ms,
                pattern: f.pattern,
                true_part_id: c.part_id.into(),
                true_label: c.label.into(),
            }
        })
        .collect();
    let parts = CHANNELS
        .iter()
        .map(|c| PartSpec {
            part_id: c.part_id.into(),
            category: c.category.into(),
            print_minutes: spec.print_minutes,
            service_minutes: 45,
            holding_cost_per_day: 2.0,
            print_cost: 15.0,
        })
        .collect();
    let part_sensor_map = PartSensorMap(
        CHANNELS.iter().map(|c| (c.part_id.to_string(), vec![SensorWeight { sensor_id: c.sensor_id.into(), weight: 1.0 }])).collect(),
    );
    let mut damage_table: BTreeMap<String, f64> = CHANNELS.iter().map(|c| (c.label.to_string(), 1000.0)).collect();
    damage_table.insert(NORMAL_LABEL.into(), 0.0);

    let depots = vec![
        Depot { depot_id: "depot-dst".into(), location: DESTINATION.into() },
        Depot { depot_id: "depot-hub".into(), location: ORIGIN.into() },
    ];
    let mut inventory = Vec::new();
    for c in &CHANNELS {
        for (depot, count) in [("depot-dst", spec.local_stock), ("depot-hub", spec.remote_stock)] {
            if count > 0 {
                inventory.push(StockEntry { part_id: c.part_id.into(), depot_id: depot.into(), count });
            }
        }
    }
    let printers = (0..spec.printers).map(|i| Printer { printer_id: format!("printer-{i:02}"), location: DESTINATION.into() }).collect();
    let horizon = spec.vehicles as SimMs * spec.stagger_ms + spec.trip_ms + 86_400_000;
    let staff = vec![StaffMember {
        staff_id: "tech-01".into(),
        location: DESTINATION.into(),
        skills: CHANNELS.iter().map(|c| c.category.to_string()).collect(),
        available_from: 0,
        available_until: horizon,
    }];

    Scenario {
        schema: SCHEMA_VERSION,
        seed: spec.seed,
        thresholds: spec.thresholds.clone(),
        edge: spec.edge,
        lof: spec.lof,
        cloud: spec.cloud.clone(),
        bus: spec.bus.clone(),
        vehicles,
        signatures,
        topology: Topology {
            locations: vec![DESTINATION.into(), ORIGIN.into()],
            links: vec![Link { a: ORIGIN.into(), b: DESTINATION.into(), transit_ms: spec.transit_ms }],
        },
        parts,
        part_sensor_map,
        damage_table,
        depots,
        inventory,
        printers,
        staff,
        initial_model: InitialModel { version: 1, classifier: reference_classifier(), scaling: None },
    }
}
