//! Backend coordination: the shared event store and the ERP workflow that
//! turns diagnoses into maintenance orders.

pub mod erp;
pub mod store;

pub use erp::{
    assign_staff, choose_plan, create_order, decide_action, evaluate_impact, fulfill_order, logistic, plan_candidates,
    resolve_order, Action, Depot, ErpError, ErpSetup, FulfillmentPlan, ImpactAssessment, Link, MaintenanceOrder,
    OrderRequest, OrderStatus, PartCatalog, PartSpec, PlanSource, PrintJob, Printer, StaffMember, Topology,
};
pub use store::{parse_jsonl, records_to_jsonl, Event, EventRecord, EventStore, StoreError, Views};
