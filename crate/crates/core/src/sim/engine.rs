//! Single-timeline discrete-event run of a scenario.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, GroundTruth, SimulationReport, DIAGNOSIS_TRIGGER, INSPECTION_TRIGGER};
use super::scenario::Scenario;
use crate::backend::{
    assign_staff, create_order, decide_action, evaluate_impact, fulfill_order, resolve_order, Action, ErpSetup, Event, EventRecord,
    EventStore, OrderRequest, OrderStatus, PlanSource, Views,
};
use crate::bus::{Broker, Delivery, Envelope};
use crate::cloud::{model_envelope, CloudAnalyzer, DiagnosedAnomaly, UpdatePolicy};
use crate::edge::{AnomalyReport, Gateway, ModelSnapshot};
use crate::rng::CALIBRATION_STREAM_BASE;
use crate::telemetry::{generate_frame, scaling_from_frames, FailureSignature, GenState, SimMs, TelemetryFrame};

pub const NORMAL_LABEL: &str = "normal";

const CLOUD_CLIENT: &str = "cloud";
const ERP_CLIENT: &str = "erp";
const OPS_CLIENT: &str = "ops";
const PRINTERS_CLIENT: &str = "printers";
const ORDER_TOPIC: &str = "erp/order";
const NOTIFY_TOPIC: &str = "ops/notify";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Edge detection, cloud analysis and in-trip ordering enabled.
    #[default]
    Platform,
    /// Failures are only discovered when the vehicle arrives.
    Baseline,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Platform => "platform",
            Mode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub mode: Mode,
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OrderMessage {
    order_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Notice {
    vehicle_id: String,
    subject: String,
    reason: String,
}

#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<EventRecord>,
    pub views: Views,
    pub report: SimulationReport,
    /// Raw storage contents as JSON lines.
    pub raw_jsonl: String,
}

impl RunOutput {
    pub fn events_jsonl(&self) -> String {
        crate::backend::records_to_jsonl(&self.records)
    }

    /// Writes events.jsonl, report.json, report.csv and raw.jsonl.
    pub fn write_to(&mut self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let log_path = dir.join("events.jsonl");
        std::fs::write(&log_path, self.events_jsonl())?;
        self.report.event_log = Some(log_path.display().to_string());
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report).expect("report serializes"))?;
        std::fs::write(dir.join("report.csv"), self.report.to_csv())?;
        std::fs::write(dir.join("raw.jsonl"), &self.raw_jsonl)?;
        Ok(())
    }
}

struct Engine<'s> {
    sc: &'s Scenario,
    store: EventStore,
    bus: Broker,
    cloud: Option<CloudAnalyzer>,
    gateways: Vec<Option<Gateway>>,
    gen: Vec<GenState>,
    signatures: Vec<Vec<FailureSignature>>,
    gateway_index: BTreeMap<String, usize>,
    setup: ErpSetup,
    truth: GroundTruth,
    arrived: BTreeSet<String>,
}

fn gateway_client(vehicle_id: &str) -> String {
    format!("gw-{vehicle_id}")
}

impl<'s> Engine<'s> {
    fn flush_bus(&mut self, now: SimMs) {
        for ev in self.bus.drain_log() {
            self.store.append(now, Event::Bus(ev));
        }
    }

    fn module_error(&mut self, now: SimMs, module: &str, subject: &str, error: impl ToString) {
        self.store.append(now, Event::ModuleError { module: module.into(), subject: subject.into(), error: error.to_string() });
    }

    fn publish(&mut self, env: Envelope, now: SimMs) -> usize {
        let id = env.message_id.clone();
        let n = match self.bus.publish(env) {
            Ok(n) => n,
            Err(e) => {
                self.module_error(now, "message_bus", &id, e);
                0
            }
        };
        self.flush_bus(now);
        n
    }

    /// Publishes the operator notice for the notification event at `offset`.
    fn publish_notice(&mut self, offset: u64, now: SimMs) {
        if let Event::OperatorNotified { vehicle_id, subject, reason } = &self.store.records()[offset as usize].event {
            let notice = Notice { vehicle_id: vehicle_id.clone(), subject: subject.clone(), reason: reason.clone() };
            self.publish(Envelope::json(format!("ntf-{offset:07}"), NOTIFY_TOPIC, now, "operator_notice.v1", &notice), now);
        }
    }

    fn notify(&mut self, now: SimMs, vehicle_id: &str, subject: &str, reason: &str) {
        let offset = self.store.append(
            now,
            Event::OperatorNotified { vehicle_id: vehicle_id.into(), subject: subject.into(), reason: reason.into() },
        );
        self.publish_notice(offset, now);
    }

    fn staff_order(&mut self, now: SimMs, order_id: &str) {
        match assign_staff(&mut self.store, now, order_id, &self.setup) {
            Ok(Some(_)) => {}
            Ok(None) => {
                let offset = self.store.len() as u64 - 1;
                self.publish_notice(offset, now);
            }
            Err(e) => self.module_error(now, "backend_coord", order_id, e),
        }
    }

    fn ingest(&mut self, idx: usize, now: SimMs) {
        let profile = &self.sc.vehicles[idx];
        let Some(gw) = self.gateways[idx].as_mut() else { return };
        let outcome = generate_frame(profile, now, &mut self.gen[idx], &self.signatures[idx])
            .map_err(crate::edge::EdgeError::from)
            .and_then(|frame| gw.ingest(&frame));
        match outcome {
            Ok(out) => {
                if let Some(r) = &out.report {
                    self.store.append(
                        now,
                        Event::AnomalyPublished {
                            report_id: r.report_id.clone(),
                            vehicle_id: r.vehicle_id.clone(),
                            episode_id: r.episode_id,
                            window: r.window,
                            score: r.score,
                            label: r.label.clone(),
                            model_version: r.model_version,
                        },
                    );
                }
                for env in out.envelopes {
                    self.publish(env, now);
                }
            }
            Err(e) => {
                let v = profile.vehicle_id.clone();
                self.module_error(now, "edge_gateway", &v, e);
            }
        }
    }

    /// Runs delivery rounds until nothing more is due at `now`.
    fn pump(&mut self, now: SimMs) {
        loop {
            let batch = self.bus.deliver(now);
            self.flush_bus(now);
            if batch.is_empty() {
                break;
            }
            for d in batch {
                self.handle(d, now);
            }
        }
    }

    fn handle(&mut self, d: Delivery, now: SimMs) {
        match d.client_id.as_str() {
            CLOUD_CLIENT => self.on_report(&d.envelope, now),
            ERP_CLIENT => self.on_order(&d.envelope, now),
            OPS_CLIENT | PRINTERS_CLIENT => {}
            client => {
                if let Some(&idx) = client.strip_prefix("gw-").and_then(|v| self.gateway_index.get(v)) {
                    self.on_model(idx, &d.envelope, now);
                }
            }
        }
    }

    fn on_report(&mut self, env: &Envelope, now: SimMs) {
        let report: AnomalyReport = match env.decode() {
            Ok(r) => r,
            Err(e) => return self.module_error(now, "cloud_analyzer", &env.message_id, e),
        };
        let Some(cloud) = self.cloud.as_mut() else { return };
        match cloud.analyze(&report, now) {
            Ok(d) => {
                self.store.append(
                    now,
                    Event::AnomalyDiagnosed {
                        report_id: report.report_id.clone(),
                        vehicle_id: report.vehicle_id.clone(),
                        episode_id: report.episode_id,
                        window: report.window,
                        edge_score: report.score,
                        refined_score: d.refined_score,
                        suspect_part_id: d.suspect_part_id.clone(),
                        severity_label: d.severity_label.clone(),
                        edge_label: report.label.clone(),
                    },
                );
                self.coordinate(&d, now);
            }
            Err(e) => self.module_error(now, "cloud_analyzer", &report.report_id, e),
        }
    }

    fn coordinate(&mut self, d: &DiagnosedAnomaly, now: SimMs) {
        let t = &self.sc.thresholds;
        let a = evaluate_impact(d, t.horizon_ms, &self.sc.damage_table, t.impact_slope, t.impact_midpoint);
        let action = decide_action(&a, d, t.order_threshold);
        let r = &d.report;
        self.store.append(
            now,
            Event::ImpactAssessed {
                report_id: r.report_id.clone(),
                vehicle_id: r.vehicle_id.clone(),
                part_id: d.suspect_part_id.clone(),
                probability: a.probability,
                damage: a.damage,
                impact: a.impact,
                horizon_ms: a.horizon_ms,
                action: action.as_str().into(),
            },
        );
        match action {
            Action::NotifyOperator => self.notify(now, &r.vehicle_id, &r.report_id, "unlabeled diagnosis needs manual analysis"),
            Action::Log => {}
            Action::Order => {
                let Some(profile) = self.sc.vehicles.iter().find(|v| v.vehicle_id == r.vehicle_id) else {
                    return self.module_error(now, "backend_coord", &r.report_id, "report from unknown vehicle");
                };
                let req = OrderRequest {
                    vehicle_id: r.vehicle_id.clone(),
                    part_id: d.suspect_part_id.clone(),
                    episode_id: Some(r.episode_id),
                    report_id: Some(r.report_id.clone()),
                    destination: profile.route.destination.clone(),
                    deadline: profile.route.arrival_ts,
                    trigger: DIAGNOSIS_TRIGGER.into(),
                };
                let (order, created) = create_order(&mut self.store, now, &req);
                if created {
                    self.staff_order(now, &order.order_id);
                    let msg = OrderMessage { order_id: order.order_id.clone() };
                    self.publish(Envelope::json(format!("erp-{}", order.order_id), ORDER_TOPIC, now, "erp_order.v1", &msg), now);
                }
            }
        }
    }

    /// Vendor side: plans the order and dispatches any print job.
    fn fulfill(&mut self, order_id: &str, now: SimMs) {
        match fulfill_order(&mut self.store, now, order_id, &self.setup) {
            Ok(plan) => {
                if let PlanSource::Print { printer_id, job } = &plan.source {
                    let env = Envelope::json(format!("print-{}", job.job_id), format!("vendor/print/{printer_id}"), now, "print_job.v1", job);
                    self.publish(env, now);
                }
            }
            Err(e @ crate::backend::ErpError::NotCreated(_)) => self.module_error(now, "backend_coord", order_id, e),
            Err(e) => {
                let vehicle = self.store.views().orders.get(order_id).map(|o| o.vehicle_id.clone()).unwrap_or_default();
                self.notify(now, &vehicle, order_id, &format!("order needs manual review: {e}"));
            }
        }
    }

    fn on_order(&mut self, env: &Envelope, now: SimMs) {
        let msg: OrderMessage = match env.decode() {
            Ok(m) => m,
            Err(e) => return self.module_error(now, "backend_coord", &env.message_id, e),
        };
        self.fulfill(&msg.order_id, now);
        let arrived = self.store.views().orders.get(&msg.order_id).is_some_and(|o| self.arrived.contains(&o.vehicle_id));
        if arrived {
            resolve_order(&mut self.store, now, &msg.order_id);
        }
    }

    fn on_model(&mut self, idx: usize, env: &Envelope, now: SimMs) {
        let Some(gw) = self.gateways[idx].as_mut() else { return };
        let vehicle_id = gw.vehicle_id().to_string();
        let snapshot: ModelSnapshot = match env.decode() {
            Ok(s) => s,
            Err(e) => return self.module_error(now, "edge_gateway", &vehicle_id, e),
        };
        let version = snapshot.version;
        let current = gw.model_version();
        let ev = match gw.apply_model(snapshot) {
            Ok(true) => Event::ModelApplied { vehicle_id, version },
            Ok(false) => Event::ModelRejected { vehicle_id, version, current_version: current, reason: "not newer than the current model".into() },
            Err(e) => Event::ModelRejected { vehicle_id, version, current_version: current, reason: e.to_string() },
        };
        self.store.append(now, ev);
    }

    /// Label backfill, update cadence and model distribution.
    fn learn(&mut self, now: SimMs) {
        let Some(cloud) = self.cloud.as_mut() else { return };
        let truth = &self.truth;
        let records = cloud.backfill_labels(now, |d| {
            Some(
                truth
                    .matching(&d.report.vehicle_id, &d.report.window)
                    .first()
                    .map_or_else(|| NORMAL_LABEL.to_string(), |s| s.true_label.clone()),
            )
        });
        let policy = cloud.config().update_policy;
        let update = cloud.maybe_update();
        for r in records {
            self.store.append(now, Event::JudgeRecorded(r));
        }
        match update {
            Ok(None) => {}
            Ok(Some(eval)) => {
                let released = eval.released.clone();
                self.store.append(
                    now,
                    Event::ModelEvaluated {
                        incumbent_version: eval.incumbent_version,
                        labeled_records: eval.labeled_records,
                        holdout_size: eval.holdout_size,
                        candidate_accuracy: eval.candidate_accuracy,
                        incumbent_accuracy: eval.incumbent_accuracy,
                        released_version: released.as_ref().map(|s| s.version),
                    },
                );
                if let Some(snapshot) = released {
                    self.store.append(
                        now,
                        Event::ModelReleased {
                            version: snapshot.version,
                            holdout_accuracy: eval.candidate_accuracy,
                            predecessor_accuracy: eval.incumbent_accuracy,
                            triggered_by: match policy {
                                UpdatePolicy::PlatformOperator => "platform_operator".into(),
                                UpdatePolicy::Customer => "customer".into(),
                            },
                        },
                    );
                    let receipt = self.publish(model_envelope(&snapshot, now), now);
                    self.store.append(now, Event::ModelDistributed { version: snapshot.version, receipt });
                    self.pump(now);
                }
            }
            Err(e) => self.module_error(now, "cloud_analyzer", "model_update", e),
        }
    }

    fn arrive(&mut self, idx: usize, now: SimMs) {
        let profile = &self.sc.vehicles[idx];
        let vehicle_id = profile.vehicle_id.clone();
        let destination = profile.route.destination.clone();
        self.store.append(now, Event::VehicleArrived { vehicle_id: vehicle_id.clone(), destination: destination.clone() });
        self.arrived.insert(vehicle_id.clone());

        let fulfilling: Vec<String> = self
            .store
            .views()
            .orders
            .values()
            .filter(|o| o.vehicle_id == vehicle_id && o.status == OrderStatus::Fulfilling)
            .map(|o| o.order_id.clone())
            .collect();
        for id in fulfilling {
            resolve_order(&mut self.store, now, &id);
        }

        let ready_parts: BTreeSet<String> = self
            .store
            .views()
            .orders
            .values()
            .filter(|o| o.vehicle_id == vehicle_id && o.status == OrderStatus::Ready)
            .map(|o| o.part_id.clone())
            .collect();
        let missing: Vec<String> = self
            .truth
            .failed_parts(&vehicle_id, now)
            .into_iter()
            .filter(|p| !ready_parts.contains(*p))
            .map(String::from)
            .collect();
        for part in missing {
            let req = OrderRequest {
                vehicle_id: vehicle_id.clone(),
                part_id: part,
                episode_id: None,
                report_id: None,
                destination: destination.clone(),
                deadline: now,
                trigger: INSPECTION_TRIGGER.into(),
            };
            let (order, created) = create_order(&mut self.store, now, &req);
            if created {
                self.staff_order(now, &order.order_id);
                self.fulfill(&order.order_id, now);
                resolve_order(&mut self.store, now, &order.order_id);
            }
        }

        let (ready_orders, staff): (Vec<String>, Vec<String>) = self
            .store
            .views()
            .orders
            .values()
            .filter(|o| o.vehicle_id == vehicle_id && o.status == OrderStatus::Ready)
            .map(|o| (o.order_id.clone(), o.staff_id.clone().unwrap_or_default()))
            .unzip();
        let staff = staff.into_iter().filter(|s| !s.is_empty()).collect();
        self.store.append(now, Event::MaintenanceConducted { vehicle_id: vehicle_id.clone(), ready_orders, staff });

        if self.gateways[idx].take().is_some() {
            self.bus.unsubscribe_all(&gateway_client(&vehicle_id));
        }
    }
}

fn calibration_frames(sc: &Scenario, seed: u64) -> Vec<TelemetryFrame> {
    let mut out = Vec::new();
    for (idx, profile) in sc.vehicles.iter().enumerate() {
        let mut state = GenState::new(seed, CALIBRATION_STREAM_BASE + idx as u64);
        for t in profile.sample_times().take(sc.cloud.calibration_frames) {
            out.push(generate_frame(profile, t, &mut state, &[]).expect("sample times lie on the route grid"));
        }
    }
    out
}

/// Model the fleet starts with: scenario classifier plus scenario or
/// calibration scaling.
pub fn initial_snapshot(sc: &Scenario, calibration: &[TelemetryFrame]) -> ModelSnapshot {
    ModelSnapshot {
        version: sc.initial_model.version,
        scaling: sc.initial_model.scaling.clone().unwrap_or_else(|| scaling_from_frames(calibration)),
        classifier: sc.initial_model.classifier.clone(),
        lof: sc.lof,
        alert_threshold: sc.thresholds.alert_threshold,
        confidence_margin: sc.thresholds.confidence_margin,
    }
}

pub fn run(sc: &Scenario, opts: &RunOptions) -> RunOutput {
    let seed = opts.seed.unwrap_or(sc.seed);
    let platform = opts.mode == Mode::Platform;
    let truth = GroundTruth {
        routes: sc.vehicles.iter().map(|v| (v.vehicle_id.clone(), v.route.clone())).collect(),
        signatures: sc.signatures.clone(),
        catalog: sc.parts.iter().map(|p| (p.part_id.clone(), p.clone())).collect(),
    };
    let mut engine = Engine {
        sc,
        store: EventStore::new(),
        bus: Broker::new(sc.bus.clone(), seed).expect("fault model validated with the scenario"),
        cloud: None,
        gateways: Vec::new(),
        gen: sc.vehicles.iter().enumerate().map(|(i, _)| GenState::new(seed, i as u64)).collect(),
        signatures: sc
            .vehicles
            .iter()
            .map(|v| sc.signatures.iter().filter(|s| s.vehicle_id == v.vehicle_id).cloned().collect())
            .collect(),
        gateway_index: sc.vehicles.iter().enumerate().map(|(i, v)| (v.vehicle_id.clone(), i)).collect(),
        setup: ErpSetup {
            catalog: truth.catalog.clone(),
            topology: sc.topology.clone(),
            depots: sc.depots.clone(),
            printers: sc.printers.clone(),
            staff: sc.staff.clone(),
        },
        truth: truth.clone(),
        arrived: BTreeSet::new(),
    };

    let e = &mut engine;
    e.store.append(0, Event::RunStarted { mode: opts.mode.as_str().into(), seed, ground_truth: truth });
    for s in &sc.inventory {
        e.store.append(0, Event::InventoryInitialized { part_id: s.part_id.clone(), depot_id: s.depot_id.clone(), count: s.count });
    }
    for p in &sc.printers {
        e.store.append(0, Event::PrinterRegistered { printer_id: p.printer_id.clone(), location: p.location.clone() });
    }
    for (client, filter) in [(ERP_CLIENT, ORDER_TOPIC), (OPS_CLIENT, NOTIFY_TOPIC), (PRINTERS_CLIENT, "vendor/print/+")] {
        e.bus.subscribe(client, filter).expect("static filter");
    }

    let mut frames: BTreeMap<SimMs, Vec<usize>> = BTreeMap::new();
    if platform {
        let calibration = calibration_frames(sc, seed);
        let model = initial_snapshot(sc, &calibration);
        let mut cloud = CloudAnalyzer::new(sc.cloud.clone(), model.clone(), sc.part_sensor_map.clone(), sc.fleet_sensors(), seed);
        if !calibration.is_empty() {
            e.store.append(0, Event::CalibrationLoaded { frames: calibration.len() });
        }
        for f in calibration {
            cloud.add_calibration(f);
        }
        e.cloud = Some(cloud);
        e.bus.subscribe(CLOUD_CLIENT, "fleet/+/anomaly").expect("static filter");
        for (idx, v) in sc.vehicles.iter().enumerate() {
            let gw = Gateway::new(v.vehicle_id.clone(), v.sensor_ids(), model.clone(), sc.edge).expect("model validated with the scenario");
            e.gateways.push(Some(gw));
            e.bus.subscribe(&gateway_client(&v.vehicle_id), crate::edge::MODEL_TOPIC).expect("static filter");
            for t in v.sample_times() {
                frames.entry(t).or_default().push(idx);
            }
        }
    } else {
        e.gateways = sc.vehicles.iter().map(|_| None).collect();
    }
    let mut arrivals: BTreeMap<SimMs, Vec<usize>> = BTreeMap::new();
    for (idx, v) in sc.vehicles.iter().enumerate() {
        arrivals.entry(v.route.arrival_ts).or_default().push(idx);
    }

    let mut now: SimMs = 0;
    loop {
        let next = [
            frames.keys().next().copied(),
            arrivals.keys().next().copied(),
            e.bus.next_due(),
            e.cloud.as_ref().and_then(|c| c.next_label_due()),
        ]
        .into_iter()
        .flatten()
        .min();
        let Some(t) = next else { break };
        now = now.max(t);
        if let Some(vs) = frames.remove(&t) {
            for idx in vs {
                e.ingest(idx, now);
            }
        }
        e.pump(now);
        e.learn(now);
        if let Some(vs) = arrivals.remove(&t) {
            for idx in vs {
                e.arrive(idx, now);
            }
            e.pump(now);
        }
    }
    let n = e.store.len() as u64;
    e.store.append(now, Event::RunEnded { events: n });

    let records = engine.store.records().to_vec();
    let report = compute_metrics(&records).expect("a finished run is a complete log");
    RunOutput {
        views: engine.store.views().clone(),
        raw_jsonl: engine.cloud.as_ref().map(|c| c.raw_store().to_jsonl()).unwrap_or_default(),
        records,
        report,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub platform: SimulationReport,
    pub baseline: SimulationReport,
}

/// Runs the same seeded scenario with and without the platform.
pub fn compare_baseline(sc: &Scenario, seed: Option<u64>) -> BaselineComparison {
    BaselineComparison {
        platform: run(sc, &RunOptions { mode: Mode::Platform, seed }).report,
        baseline: run(sc, &RunOptions { mode: Mode::Baseline, seed }).report,
    }
}
