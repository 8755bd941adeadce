//! Desk-scale split-inference testbed: partitioned CNN serving over a
//! byte-exact wire protocol, a passive feature sniffer, statistical
//! feature-shape reconstruction, feature-distilled surrogate training,
//! and a suite of transfer/query evasion attacks with experiment harnesses.

pub mod tensor;
pub mod models;
