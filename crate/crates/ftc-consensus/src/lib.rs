//! Simulation library for distributed adaptive fault-tolerant tracking.
//!
//! A group of follower agents with partially unknown dynamics tracks a leader
//! over a communication graph. Each agent runs a local residual-based fault
//! detector, a bank of isolation estimators, and a control law that switches
//! from a baseline consensus controller to adaptive accommodation once a
//! fault is suspected. Everything is fixed-step and fully deterministic so
//! that traces can be compared byte for byte across runs.

pub mod control;
pub mod diagnosis;
pub mod graph;
pub mod plant;
pub mod registry;
pub mod scenario;
pub mod sim;
pub mod trace;
