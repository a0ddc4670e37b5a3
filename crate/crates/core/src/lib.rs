//! Protocol library and deterministic network simulator for an anonymous,
//! ledger-backed infection-control system.
//!
//! The pieces, bottom up:
//!
//! - [`crypto`]: short-lived credentials over a symmetric pairing, with
//!   signature aggregation and certificates sized for constrained radios.
//! - [`bloom`]: the Bloom filters status blocks are built from.
//! - [`wire`]: byte-exact frame encodings for every protocol step.
//! - [`metrics`]: operation counters, the calibrated cost model, and the
//!   report builders.
//! - [`ledger`]: status and zone block chains plus their queries.
//! - [`raft`]: the validator consensus that commits blocks.
//! - [`simnet`]: deterministic discrete-event scheduler and link models.
//! - [`actors`]: users, places, health authorities and the key
//!   distribution center as event-driven state machines.
//! - [`scenario`]: run configuration and event scripts.
//! - [`engine`]: glues actors to the scheduler and runs whole scenarios.

mod math;

pub mod actors;
pub mod bloom;
pub mod crypto;
pub mod engine;
pub mod ledger;
pub mod metrics;
pub mod raft;
pub mod scenario;
pub mod simnet;
pub mod wire;
