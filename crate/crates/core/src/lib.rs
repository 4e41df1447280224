//! Approximate aggregation queries over point-event data, answered from a
//! masked autoregressive density model instead of the rows themselves.

pub mod dataset;
pub mod eval;
pub mod geocell;
pub mod model;
pub mod nn;
pub mod query;
pub mod synth;
pub mod trainer;
