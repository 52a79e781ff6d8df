//! Impact evaluation, order creation, stock-or-print fulfillment and staff
//! assignment. State lives in the event store; every function here reads the
//! store's views and appends events.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::store::{Event, EventStore, Views};
use crate::cloud::DiagnosedAnomaly;
use crate::telemetry::SimMs;

/// Damage-table key used when a diagnosis carries no severity label.
pub const UNLABELED_KEY: &str = "unlabeled";

const MS_PER_MINUTE: SimMs = 60_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErpError {
    #[error("unknown order {0}")]
    UnknownOrder(String),
    #[error("order {0} is not in state Created")]
    NotCreated(String),
    #[error("unknown part {0}")]
    UnknownPart(String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("order {0} cannot be fulfilled: no stock and no printers")]
    Unfulfillable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub part_id: String,
    pub category: String,
    pub print_minutes: u32,
    pub service_minutes: u32,
    /// Cost of keeping one unit in stock for one day.
    #[serde(default)]
    pub holding_cost_per_day: f64,
    #[serde(default)]
    pub print_cost: f64,
}

pub type PartCatalog = BTreeMap<String, PartSpec>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: String,
    pub b: String,
    pub transit_ms: SimMs,
}

/// Locations plus one undirected link per distinct pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub locations: Vec<String>,
    #[serde(default)]
    pub links: Vec<Link>,
}

impl Topology {
    pub fn validate(&self) -> Result<(), ErpError> {
        let locs: BTreeSet<&str> = self.locations.iter().map(String::as_str).collect();
        if locs.len() != self.locations.len() {
            return Err(ErpError::Topology("duplicate location".into()));
        }
        let mut seen = BTreeSet::new();
        for l in &self.links {
            for end in [&l.a, &l.b] {
                if !locs.contains(end.as_str()) {
                    return Err(ErpError::Topology(format!("link references unknown location {end}")));
                }
            }
            if l.a == l.b {
                return Err(ErpError::Topology(format!("self link at {}", l.a)));
            }
            if l.transit_ms < 0 {
                return Err(ErpError::Topology(format!("negative transit between {} and {}", l.a, l.b)));
            }
            let key = if l.a < l.b { (&l.a, &l.b) } else { (&l.b, &l.a) };
            if !seen.insert(key) {
                return Err(ErpError::Topology(format!("duplicate link between {} and {}", l.a, l.b)));
            }
        }
        let n = self.locations.len();
        if seen.len() != n * n.saturating_sub(1) / 2 {
            return Err(ErpError::Topology("every pair of distinct locations needs a link".into()));
        }
        Ok(())
    }

    pub fn has_location(&self, loc: &str) -> bool {
        self.locations.iter().any(|l| l == loc)
    }

    pub fn transit(&self, from: &str, to: &str) -> Option<SimMs> {
        if from == to {
            return self.has_location(from).then_some(0);
        }
        self.links
            .iter()
            .find(|l| (l.a == from && l.b == to) || (l.a == to && l.b == from))
            .map(|l| l.transit_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Depot {
    pub depot_id: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Printer {
    pub printer_id: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaffMember {
    pub staff_id: String,
    pub location: String,
    pub skills: Vec<String>,
    pub available_from: SimMs,
    pub available_until: SimMs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactAssessment {
    pub probability: f64,
    pub damage: f64,
    pub impact: f64,
    pub horizon_ms: SimMs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Order,
    NotifyOperator,
    Log,
}

impl Action {
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Order => "order",
            Action::NotifyOperator => "notify_operator",
            Action::Log => "log",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderStatus {
    Created,
    Fulfilling,
    Ready,
    Late,
    ManualReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrintJob {
    pub job_id: String,
    pub printer_id: String,
    pub part_id: String,
    pub start_ts: SimMs,
    pub finish_ts: SimMs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlanSource {
    Stock { depot_id: String },
    Print { printer_id: String, job: PrintJob },
}

impl PlanSource {
    fn rank(&self) -> (u8, &str) {
        match self {
            PlanSource::Stock { depot_id } => (0, depot_id),
            PlanSource::Print { printer_id, .. } => (1, printer_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FulfillmentPlan {
    pub source: PlanSource,
    /// When the part exists at its source location.
    pub availability_ts: SimMs,
    pub delivery_depart_ts: SimMs,
    /// When the part is at the destination.
    pub ready_ts: SimMs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaintenanceOrder {
    pub order_id: String,
    pub vehicle_id: String,
    pub part_id: String,
    pub episode_id: Option<u64>,
    pub destination: String,
    pub deadline: SimMs,
    pub status: OrderStatus,
    pub staff_id: Option<String>,
    pub unstaffed: bool,
    pub plan: Option<FulfillmentPlan>,
    pub late_at_plan: bool,
}

impl MaintenanceOrder {
    pub fn is_open(&self) -> bool {
        matches!(self.status, OrderStatus::Created | OrderStatus::Fulfilling)
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn evaluate_impact(
    d: &DiagnosedAnomaly,
    horizon_ms: SimMs,
    damage_table: &BTreeMap<String, f64>,
    slope: f64,
    midpoint: f64,
) -> ImpactAssessment {
    let probability = logistic(slope * (d.refined_score - midpoint));
    let key = d.severity_label.as_deref().unwrap_or(UNLABELED_KEY);
    let damage = damage_table.get(key).copied().unwrap_or(0.0);
    ImpactAssessment { probability, damage, impact: probability * damage, horizon_ms }
}

pub fn decide_action(assessment: &ImpactAssessment, d: &DiagnosedAnomaly, order_threshold: f64) -> Action {
    if d.severity_label.is_none() {
        Action::NotifyOperator
    } else if assessment.impact >= order_threshold {
        Action::Order
    } else {
        Action::Log
    }
}

/// What the ERP needs to open an order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRequest {
    pub vehicle_id: String,
    pub part_id: String,
    pub episode_id: Option<u64>,
    pub report_id: Option<String>,
    pub destination: String,
    pub deadline: SimMs,
    pub trigger: String,
}

fn find_order<'a>(views: &'a Views, vehicle_id: &str, part_id: &str, episode_id: Option<u64>) -> Option<&'a MaintenanceOrder> {
    views
        .orders
        .values()
        .find(|o| o.vehicle_id == vehicle_id && o.part_id == part_id && o.episode_id == episode_id)
}

/// Returns the order and whether it was newly created.
pub fn create_order(store: &mut EventStore, ts: SimMs, req: &OrderRequest) -> (MaintenanceOrder, bool) {
    if let Some(o) = find_order(store.views(), &req.vehicle_id, &req.part_id, req.episode_id) {
        return (o.clone(), false);
    }
    let order_id = format!("ord-{:05}", store.views().orders.len() + 1);
    store.append(
        ts,
        Event::OrderCreated {
            order_id: order_id.clone(),
            vehicle_id: req.vehicle_id.clone(),
            part_id: req.part_id.clone(),
            episode_id: req.episode_id,
            report_id: req.report_id.clone(),
            destination: req.destination.clone(),
            deadline: req.deadline,
            trigger: req.trigger.clone(),
        },
    );
    (store.views().orders[&order_id].clone(), true)
}

/// Every feasible plan for `part` delivered to `destination`, unordered.
#[allow(clippy::too_many_arguments)]
pub fn plan_candidates(
    views: &Views,
    now: SimMs,
    part: &PartSpec,
    destination: &str,
    depots: &[Depot],
    printers: &[Printer],
    topology: &Topology,
) -> Vec<FulfillmentPlan> {
    let mut out = Vec::new();
    for d in depots {
        if views.stock(&part.part_id, &d.depot_id) <= 0 {
            continue;
        }
        let Some(transit) = topology.transit(&d.location, destination) else { continue };
        out.push(FulfillmentPlan {
            source: PlanSource::Stock { depot_id: d.depot_id.clone() },
            availability_ts: now,
            delivery_depart_ts: now,
            ready_ts: now + transit,
        });
    }
    for p in printers {
        let Some(transit) = topology.transit(&p.location, destination) else { continue };
        let queue = views.printer_queues.get(&p.printer_id);
        let start = queue.and_then(|q| q.free_at()).map_or(now, |f| f.max(now));
        let finish = start + SimMs::from(part.print_minutes) * MS_PER_MINUTE;
        let n = queue.map_or(0, |q| q.jobs.len()) + 1;
        out.push(FulfillmentPlan {
            source: PlanSource::Print {
                printer_id: p.printer_id.clone(),
                job: PrintJob {
                    job_id: format!("job-{}-{n:04}", p.printer_id),
                    printer_id: p.printer_id.clone(),
                    part_id: part.part_id.clone(),
                    start_ts: start,
                    finish_ts: finish,
                },
            },
            availability_ts: finish,
            delivery_depart_ts: finish,
            ready_ts: finish + transit,
        });
    }
    out
}

/// Earliest ready_ts; ties go to stock, then the smaller id.
pub fn choose_plan(candidates: Vec<FulfillmentPlan>) -> Option<FulfillmentPlan> {
    candidates.into_iter().min_by(|a, b| (a.ready_ts, a.source.rank()).cmp(&(b.ready_ts, b.source.rank())))
}

/// Static ERP inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErpSetup {
    pub catalog: PartCatalog,
    pub topology: Topology,
    pub depots: Vec<Depot>,
    pub printers: Vec<Printer>,
    pub staff: Vec<StaffMember>,
}

pub fn fulfill_order(store: &mut EventStore, ts: SimMs, order_id: &str, setup: &ErpSetup) -> Result<FulfillmentPlan, ErpError> {
    let order = store.views().orders.get(order_id).cloned().ok_or_else(|| ErpError::UnknownOrder(order_id.into()))?;
    if order.status != OrderStatus::Created {
        return Err(ErpError::NotCreated(order_id.into()));
    }
    let Some(part) = setup.catalog.get(&order.part_id) else {
        store.append(ts, Event::OrderManualReview { order_id: order_id.into(), reason: format!("unknown part {}", order.part_id) });
        return Err(ErpError::UnknownPart(order.part_id));
    };
    let cands = plan_candidates(store.views(), ts, part, &order.destination, &setup.depots, &setup.printers, &setup.topology);
    let Some(plan) = choose_plan(cands) else {
        store.append(ts, Event::OrderManualReview { order_id: order_id.into(), reason: "no stock and no printers".into() });
        return Err(ErpError::Unfulfillable(order_id.into()));
    };
    let late_at_plan = plan.ready_ts > order.deadline;
    store.append(ts, Event::OrderPlanned { order_id: order_id.into(), plan: plan.clone(), late_at_plan });
    match &plan.source {
        PlanSource::Stock { depot_id } => {
            store.append(
                ts,
                Event::StockDecremented { part_id: part.part_id.clone(), depot_id: depot_id.clone(), order_id: order_id.into() },
            );
        }
        PlanSource::Print { job, .. } => {
            store.append(ts, Event::PrintJobQueued { order_id: order_id.into(), job: job.clone() });
        }
    }
    Ok(plan)
}

/// Staff able to service `part` at `destination` for a vehicle arriving at
/// `arrival_ts`, in preference order.
pub fn staff_candidates<'a>(roster: &'a [StaffMember], part: &PartSpec, destination: &str, arrival_ts: SimMs) -> Vec<&'a StaffMember> {
    let end = arrival_ts + SimMs::from(part.service_minutes) * MS_PER_MINUTE;
    let mut c: Vec<&StaffMember> = roster
        .iter()
        .filter(|s| {
            s.location == destination
                && s.skills.iter().any(|k| *k == part.category)
                && s.available_from <= arrival_ts
                && s.available_until >= end
        })
        .collect();
    c.sort_by(|a, b| (a.available_from, &a.staff_id).cmp(&(b.available_from, &b.staff_id)));
    c
}

pub fn assign_staff(store: &mut EventStore, ts: SimMs, order_id: &str, setup: &ErpSetup) -> Result<Option<String>, ErpError> {
    let order = store.views().orders.get(order_id).cloned().ok_or_else(|| ErpError::UnknownOrder(order_id.into()))?;
    let part = setup.catalog.get(&order.part_id).ok_or_else(|| ErpError::UnknownPart(order.part_id.clone()))?;
    match staff_candidates(&setup.staff, part, &order.destination, order.deadline).first() {
        Some(s) => {
            store.append(ts, Event::StaffAssigned { order_id: order_id.into(), staff_id: s.staff_id.clone() });
            Ok(Some(s.staff_id.clone()))
        }
        None => {
            store.append(ts, Event::OrderUnstaffed { order_id: order_id.into() });
            store.append(
                ts,
                Event::OperatorNotified {
                    vehicle_id: order.vehicle_id.clone(),
                    subject: order_id.into(),
                    reason: "no qualified staff available at destination".into(),
                },
            );
            Ok(None)
        }
    }
}

/// Marks a Fulfilling order Ready or Late. Returns the new status.
pub fn resolve_order(store: &mut EventStore, ts: SimMs, order_id: &str) -> Option<OrderStatus> {
    let order = store.views().orders.get(order_id)?;
    if order.status != OrderStatus::Fulfilling {
        return None;
    }
    let ready_ts = order.plan.as_ref()?.ready_ts;
    if ready_ts <= order.deadline {
        store.append(ts, Event::OrderReady { order_id: order_id.into(), ready_ts });
        Some(OrderStatus::Ready)
    } else {
        store.append(ts, Event::OrderLate { order_id: order_id.into(), ready_ts });
        Some(OrderStatus::Late)
    }
}
