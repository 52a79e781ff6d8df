//! Predictive-maintenance platform for business vehicles, as a deterministic
//! discrete-event simulation.
//!
//! Vehicles stream telemetry to per-vehicle edge gateways, which score every
//! frame with Local Outlier Factor and publish only suspicious frames over a
//! pub/sub bus. The cloud re-analyzes reports against a fleet-wide reference
//! set, localizes the suspect part, and retrains and redistributes the edge
//! model. The backend evaluates failure impact over a shared event store,
//! orders parts, and fulfils them from stock or a 3D printer near the
//! destination so the part is ready when the vehicle arrives.

pub mod backend;
pub mod bus;
pub mod cloud;
pub mod edge;
pub mod rng;
pub mod sim;
pub mod telemetry;
