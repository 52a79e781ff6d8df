//! Append-only event store shared by the analysis and backend sides.
//!
//! Every materialized view is a left fold of the log from offset 0; the live
//! views are maintained by applying the same fold step on each append, so
//! replaying a persisted log reproduces them exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::erp::{FulfillmentPlan, MaintenanceOrder, OrderStatus, PrintJob};
use crate::bus::BusEvent;
use crate::cloud::JudgeRecord;
use crate::edge::TimeWindow;
use crate::sim::metrics::GroundTruth;
use crate::telemetry::SimMs;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown view {0:?}")]
    UnknownView(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    RunStarted { mode: String, seed: u64, ground_truth: GroundTruth },
    InventoryInitialized { part_id: String, depot_id: String, count: i64 },
    PrinterRegistered { printer_id: String, location: String },
    CalibrationLoaded { frames: usize },
    Bus(BusEvent),
    AnomalyPublished {
        report_id: String,
        vehicle_id: String,
        episode_id: u64,
        window: TimeWindow,
        score: f64,
        label: Option<String>,
        model_version: u64,
    },
    ModuleError { module: String, subject: String, error: String },
    AnomalyDiagnosed {
        report_id: String,
        vehicle_id: String,
        episode_id: u64,
        window: TimeWindow,
        edge_score: f64,
        refined_score: f64,
        suspect_part_id: String,
        severity_label: Option<String>,
        edge_label: Option<String>,
    },
    JudgeRecorded(JudgeRecord),
    ModelEvaluated {
        incumbent_version: u64,
        labeled_records: usize,
        holdout_size: usize,
        candidate_accuracy: f64,
        incumbent_accuracy: f64,
        released_version: Option<u64>,
    },
    ModelReleased { version: u64, holdout_accuracy: f64, predecessor_accuracy: f64, triggered_by: String },
    ModelDistributed { version: u64, receipt: usize },
    ModelApplied { vehicle_id: String, version: u64 },
    ModelRejected { vehicle_id: String, version: u64, current_version: u64, reason: String },
    ImpactAssessed {
        report_id: String,
        vehicle_id: String,
        part_id: String,
        probability: f64,
        damage: f64,
        impact: f64,
        horizon_ms: SimMs,
        action: String,
    },
    OperatorNotified { vehicle_id: String, subject: String, reason: String },
    OrderCreated {
        order_id: String,
        vehicle_id: String,
        part_id: String,
        episode_id: Option<u64>,
        report_id: Option<String>,
        destination: String,
        deadline: SimMs,
        trigger: String,
    },
    StaffAssigned { order_id: String, staff_id: String },
    OrderUnstaffed { order_id: String },
    OrderPlanned { order_id: String, plan: FulfillmentPlan, late_at_plan: bool },
    StockDecremented { part_id: String, depot_id: String, order_id: String },
    StockRestocked { part_id: String, depot_id: String, count: i64 },
    PrintJobQueued { order_id: String, job: PrintJob },
    OrderManualReview { order_id: String, reason: String },
    OrderReady { order_id: String, ready_ts: SimMs },
    OrderLate { order_id: String, ready_ts: SimMs },
    VehicleArrived { vehicle_id: String, destination: String },
    MaintenanceConducted { vehicle_id: String, ready_orders: Vec<String>, staff: Vec<String> },
    RunEnded { events: u64 },
}

impl Event {
    pub fn kind(&self) -> String {
        match serde_json::to_value(self).expect("event serializes") {
            serde_json::Value::Object(m) => m.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string(),
            _ => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub offset: u64,
    pub ts: SimMs,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrinterQueue {
    pub location: String,
    pub jobs: Vec<PrintJob>,
}

impl PrinterQueue {
    /// End of the last queued job, or `None` for an idle printer.
    pub fn free_at(&self) -> Option<SimMs> {
        self.jobs.last().map(|j| j.finish_ts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub offset: u64,
    pub ts: SimMs,
    pub vehicle_id: String,
    pub subject: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Views {
    pub orders: BTreeMap<String, MaintenanceOrder>,
    /// part_id → depot_id → count
    pub stock_levels: BTreeMap<String, BTreeMap<String, i64>>,
    pub printer_queues: BTreeMap<String, PrinterQueue>,
    pub notifications: Vec<Notification>,
}

pub const VIEW_NAMES: [&str; 5] = ["open_orders", "orders", "stock_levels", "printer_queues", "notifications"];

impl Views {
    pub fn apply(&mut self, rec: &EventRecord) {
        match &rec.event {
            Event::InventoryInitialized { part_id, depot_id, count } | Event::StockRestocked { part_id, depot_id, count } => {
                *self.stock_levels.entry(part_id.clone()).or_default().entry(depot_id.clone()).or_default() += count;
            }
            Event::StockDecremented { part_id, depot_id, .. } => {
                *self.stock_levels.entry(part_id.clone()).or_default().entry(depot_id.clone()).or_default() -= 1;
            }
            Event::PrinterRegistered { printer_id, location } => {
                self.printer_queues.insert(printer_id.clone(), PrinterQueue { location: location.clone(), jobs: Vec::new() });
            }
            Event::PrintJobQueued { job, .. } => {
                self.printer_queues.entry(job.printer_id.clone()).or_default().jobs.push(job.clone());
            }
            Event::OrderCreated { order_id, vehicle_id, part_id, episode_id, destination, deadline, .. } => {
                self.orders.insert(
                    order_id.clone(),
                    MaintenanceOrder {
                        order_id: order_id.clone(),
                        vehicle_id: vehicle_id.clone(),
                        part_id: part_id.clone(),
                        episode_id: *episode_id,
                        destination: destination.clone(),
                        deadline: *deadline,
                        status: OrderStatus::Created,
                        staff_id: None,
                        unstaffed: false,
                        plan: None,
                        late_at_plan: false,
                    },
                );
            }
            Event::StaffAssigned { order_id, staff_id } => {
                if let Some(o) = self.orders.get_mut(order_id) {
                    o.staff_id = Some(staff_id.clone());
                }
            }
            Event::OrderUnstaffed { order_id } => {
                if let Some(o) = self.orders.get_mut(order_id) {
                    o.unstaffed = true;
                }
            }
            Event::OrderPlanned { order_id, plan, late_at_plan } => {
                if let Some(o) = self.orders.get_mut(order_id) {
                    o.status = OrderStatus::Fulfilling;
                    o.plan = Some(plan.clone());
                    o.late_at_plan = *late_at_plan;
                }
            }
            Event::OrderManualReview { order_id, .. } => {
                if let Some(o) = self.orders.get_mut(order_id) {
                    o.status = OrderStatus::ManualReview;
                }
            }
            Event::OrderReady { order_id, .. } => {
                if let Some(o) = self.orders.get_mut(order_id) {
                    o.status = OrderStatus::Ready;
                }
            }
            Event::OrderLate { order_id, .. } => {
                if let Some(o) = self.orders.get_mut(order_id) {
                    o.status = OrderStatus::Late;
                }
            }
            Event::OperatorNotified { vehicle_id, subject, reason } => self.notifications.push(Notification {
                offset: rec.offset,
                ts: rec.ts,
                vehicle_id: vehicle_id.clone(),
                subject: subject.clone(),
                reason: reason.clone(),
            }),
            _ => {}
        }
    }

    pub fn fold<'a>(records: impl IntoIterator<Item = &'a EventRecord>) -> Self {
        let mut v = Views::default();
        for r in records {
            v.apply(r);
        }
        v
    }

    pub fn open_orders(&self) -> impl Iterator<Item = &MaintenanceOrder> {
        self.orders.values().filter(|o| o.is_open())
    }

    pub fn stock(&self, part_id: &str, depot_id: &str) -> i64 {
        self.stock_levels.get(part_id).and_then(|m| m.get(depot_id)).copied().unwrap_or(0)
    }

    pub fn query(&self, view_name: &str) -> Result<serde_json::Value, StoreError> {
        let v = match view_name {
            "open_orders" => serde_json::to_value(self.open_orders().collect::<Vec<_>>()),
            "orders" => serde_json::to_value(&self.orders),
            "stock_levels" => serde_json::to_value(&self.stock_levels),
            "printer_queues" => serde_json::to_value(&self.printer_queues),
            "notifications" => serde_json::to_value(&self.notifications),
            other => return Err(StoreError::UnknownView(other.to_string())),
        };
        Ok(v.expect("views serialize"))
    }

    /// Canonical bytes of every named view, for equality checks.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let all: BTreeMap<&str, serde_json::Value> = VIEW_NAMES.iter().map(|n| (*n, self.query(n).expect("known view"))).collect();
        serde_json::to_vec(&all).expect("views serialize")
    }
}

/// Single-writer in-memory store.
#[derive(Debug, Default)]
pub struct EventStore {
    records: Vec<EventRecord>,
    views: Views,
}

impl EventStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, ts: SimMs, event: Event) -> u64 {
        let offset = self.records.len() as u64;
        let rec = EventRecord { offset, ts, event };
        self.views.apply(&rec);
        self.records.push(rec);
        offset
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn views(&self) -> &Views {
        &self.views
    }

    pub fn query_view(&self, view_name: &str) -> Result<serde_json::Value, StoreError> {
        self.views.query(view_name)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        records_to_jsonl(&self.records)
    }
}

pub fn records_to_jsonl(records: &[EventRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses a JSON-lines log and checks that offsets run contiguously from 0.
pub fn parse_jsonl(text: &str) -> Result<Vec<EventRecord>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord = serde_json::from_str(line)
            .map_err(|e| StoreError::Integrity(format!("line {}: {e}", i + 1)))?;
        if rec.offset != out.len() as u64 {
            return Err(StoreError::Integrity(format!("line {}: expected offset {}, found {}", i + 1, out.len(), rec.offset)));
        }
        out.push(rec);
    }
    Ok(out)
}
