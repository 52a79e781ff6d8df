//! Run metrics folded from an event log and the ground truth it carries.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backend::{Event, EventRecord, PartCatalog, StoreError};
use crate::edge::TimeWindow;
use crate::telemetry::{FailureSignature, Route, SimMs};

const MS_PER_DAY: f64 = 86_400_000.0;

/// Injected failures and routes, recorded at the head of every log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub routes: BTreeMap<String, Route>,
    pub signatures: Vec<FailureSignature>,
    pub catalog: PartCatalog,
}

impl GroundTruth {
    /// Signatures on `vehicle_id` whose active interval [onset, arrival]
    /// overlaps `window`, earliest onset first.
    pub fn matching(&self, vehicle_id: &str, window: &TimeWindow) -> Vec<&FailureSignature> {
        let mut v: Vec<&FailureSignature> = self
            .signatures
            .iter()
            .filter(|s| {
                s.vehicle_id == vehicle_id
                    && self.routes.get(vehicle_id).is_some_and(|r| window.overlaps(s.onset_ts, r.arrival_ts))
            })
            .collect();
        v.sort_by(|a, b| (a.onset_ts, &a.signature_id).cmp(&(b.onset_ts, &b.signature_id)));
        v
    }

    /// Parts that truly failed on `vehicle_id` by `ts`.
    pub fn failed_parts(&self, vehicle_id: &str, ts: SimMs) -> BTreeSet<&str> {
        self.signatures
            .iter()
            .filter(|s| s.vehicle_id == vehicle_id && s.onset_ts <= ts)
            .map(|s| s.true_part_id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureDetection {
    pub signature_id: String,
    pub vehicle_id: String,
    pub detected: bool,
    pub latency_ms: Option<SimMs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub mode: String,
    pub seed: u64,
    pub events: u64,
    pub arrivals: usize,
    pub signatures: usize,
    pub episodes: usize,
    pub matched_episodes: usize,
    pub detections: Vec<SignatureDetection>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub orders: usize,
    pub ready_orders: usize,
    pub readiness_rate: Option<f64>,
    pub delayed_arrivals: usize,
    pub delayed_service_rate: Option<f64>,
    pub stock_cost: f64,
    pub print_jobs: usize,
    pub print_cost: f64,
    pub released_versions: Vec<u64>,
    pub event_log: Option<String>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Checks that a log is complete: offsets contiguous from 0, a run start
/// first and a run end last, and non-decreasing timestamps.
pub fn check_integrity(log: &[EventRecord]) -> Result<(), StoreError> {
    let err = |m: String| Err(StoreError::Integrity(m));
    for (i, r) in log.iter().enumerate() {
        if r.offset != i as u64 {
            return err(format!("offset {} found at position {i}", r.offset));
        }
    }
    for w in log.windows(2) {
        if w[1].ts < w[0].ts {
            return err(format!("timestamp decreases at offset {}", w[1].offset));
        }
    }
    match log.first().map(|r| &r.event) {
        Some(Event::RunStarted { .. }) => {}
        _ => return err("log does not begin with run_started".into()),
    }
    match log.last().map(|r| &r.event) {
        Some(Event::RunEnded { events }) if *events + 1 == log.len() as u64 => Ok(()),
        Some(Event::RunEnded { .. }) => err("run_ended event count does not match the log".into()),
        _ => err("log is truncated: no run_ended record".into()),
    }
}

type StockClock<'a> = BTreeMap<(&'a str, &'a str), (i64, SimMs)>;

/// Charges holding cost for the interval since the last change, then applies `delta`.
fn accrue<'a>(stock: &mut StockClock<'a>, key: (&'a str, &'a str), delta: i64, ts: SimMs, per_day: f64, cost: &mut f64) {
    let e = stock.entry(key).or_insert((0, ts));
    *cost += e.0 as f64 * per_day * (ts - e.1) as f64 / MS_PER_DAY;
    *e = (e.0 + delta, ts);
}

pub fn compute_metrics(log: &[EventRecord]) -> Result<SimulationReport, StoreError> {
    check_integrity(log)?;
    let Event::RunStarted { mode, seed, ground_truth: truth } = &log[0].event else { unreachable!("checked") };
    let end_ts = log.last().map_or(0, |r| r.ts);

    let mut episodes: BTreeMap<&str, (&str, TimeWindow)> = BTreeMap::new();
    let mut orders: BTreeMap<&str, (&str, &str, &str)> = BTreeMap::new(); // id → (vehicle, part, trigger)
    let mut ready: BTreeSet<&str> = BTreeSet::new();
    let mut arrivals = 0;
    let mut delayed = 0;
    let mut stock: StockClock = BTreeMap::new();
    let mut stock_cost = 0.0;
    let mut print_jobs = 0;
    let mut print_cost = 0.0;
    let mut released = Vec::new();

    let holding = |part: &str| truth.catalog.get(part).map_or(0.0, |p| p.holding_cost_per_day);
    for r in log {
        match &r.event {
            Event::AnomalyPublished { report_id, vehicle_id, window, .. } => {
                episodes.entry(report_id).or_insert((vehicle_id, *window));
            }
            Event::OrderCreated { order_id, vehicle_id, part_id, trigger, .. } => {
                orders.insert(order_id, (vehicle_id, part_id, trigger));
            }
            Event::OrderReady { order_id, .. } => {
                ready.insert(order_id);
            }
            Event::MaintenanceConducted { vehicle_id, ready_orders, .. } => {
                arrivals += 1;
                let covered: BTreeSet<&str> = ready_orders.iter().filter_map(|o| orders.get(o.as_str()).map(|x| x.1)).collect();
                if truth.failed_parts(vehicle_id, r.ts).iter().any(|p| !covered.contains(p)) {
                    delayed += 1;
                }
            }
            Event::InventoryInitialized { part_id, depot_id, count } | Event::StockRestocked { part_id, depot_id, count } => {
                accrue(&mut stock, (part_id, depot_id), *count, r.ts, holding(part_id), &mut stock_cost);
            }
            Event::StockDecremented { part_id, depot_id, .. } => {
                accrue(&mut stock, (part_id, depot_id), -1, r.ts, holding(part_id), &mut stock_cost)
            }
            Event::PrintJobQueued { job, .. } => {
                print_jobs += 1;
                print_cost += truth.catalog.get(&job.part_id).map_or(0.0, |p| p.print_cost);
            }
            Event::ModelReleased { version, .. } => released.push(*version),
            _ => {}
        }
    }
    for ((part, _), (count, since)) in &stock {
        stock_cost += *count as f64 * holding(part) * (end_ts - since) as f64 / MS_PER_DAY;
    }

    let mut matched_episodes = 0;
    let mut first_hit: BTreeMap<&str, SimMs> = BTreeMap::new();
    for (vehicle, window) in episodes.values() {
        let hits = truth.matching(vehicle, window);
        if !hits.is_empty() {
            matched_episodes += 1;
        }
        for s in hits {
            let t = first_hit.entry(&s.signature_id).or_insert(window.last_ts);
            *t = (*t).min(window.last_ts);
        }
    }
    let detections: Vec<SignatureDetection> = truth
        .signatures
        .iter()
        .map(|s| {
            let hit = first_hit.get(s.signature_id.as_str());
            SignatureDetection {
                signature_id: s.signature_id.clone(),
                vehicle_id: s.vehicle_id.clone(),
                detected: hit.is_some(),
                latency_ms: hit.map(|t| t - s.onset_ts),
            }
        })
        .collect();
    let detected = detections.iter().filter(|d| d.detected).count();

    let platform_orders: Vec<&str> = orders.iter().filter(|(_, o)| o.2 == DIAGNOSIS_TRIGGER).map(|(id, _)| *id).collect();
    let ready_orders = platform_orders.iter().filter(|id| ready.contains(*id)).count();

    Ok(SimulationReport {
        mode: mode.clone(),
        seed: *seed,
        events: log.len() as u64,
        arrivals,
        signatures: truth.signatures.len(),
        episodes: episodes.len(),
        matched_episodes,
        precision: ratio(matched_episodes, episodes.len()),
        recall: ratio(detected, truth.signatures.len()),
        detections,
        orders: platform_orders.len(),
        ready_orders,
        readiness_rate: ratio(ready_orders, platform_orders.len()),
        delayed_arrivals: delayed,
        delayed_service_rate: ratio(delayed, arrivals),
        stock_cost,
        print_jobs,
        print_cost,
        released_versions: released,
        event_log: None,
    })
}

/// Trigger tag of orders raised from an in-trip diagnosis.
pub const DIAGNOSIS_TRIGGER: &str = "diagnosis";
/// Trigger tag of orders raised when a failure is found at arrival.
pub const INSPECTION_TRIGGER: &str = "arrival_inspection";

impl SimulationReport {
    /// Flat `metric,value` rows; not-applicable values are left empty.
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let rows: Vec<(&str, String)> = vec![
            ("mode", self.mode.clone()),
            ("seed", self.seed.to_string()),
            ("events", self.events.to_string()),
            ("arrivals", self.arrivals.to_string()),
            ("signatures", self.signatures.to_string()),
            ("episodes", self.episodes.to_string()),
            ("matched_episodes", self.matched_episodes.to_string()),
            ("precision", opt(self.precision)),
            ("recall", opt(self.recall)),
            ("orders", self.orders.to_string()),
            ("ready_orders", self.ready_orders.to_string()),
            ("readiness_rate", opt(self.readiness_rate)),
            ("delayed_arrivals", self.delayed_arrivals.to_string()),
            ("delayed_service_rate", opt(self.delayed_service_rate)),
            ("stock_cost", self.stock_cost.to_string()),
            ("print_jobs", self.print_jobs.to_string()),
            ("print_cost", self.print_cost.to_string()),
            (
                "released_versions",
                self.released_versions.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
            ),
        ];
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(k);
            out.push(',');
            out.push_str(&v);
            out.push('\n');
        }
        for d in &self.detections {
            out.push_str(&format!(
                "latency_ms[{}],{}\n",
                d.signature_id,
                d.latency_ms.map(|l| l.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}
