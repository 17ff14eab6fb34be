//! Sensor networks exposed as hierarchical file systems over a 9P-style
//! protocol, running on a deterministic discrete-event network simulator.

pub mod client;
pub mod devicefs;
pub mod fscore;
pub mod muxfs;
pub mod shell;
pub mod simnet;
pub mod sweep;
pub mod views;
pub mod wire;
pub mod world;
