//! Test-only helpers: a random trace generator and a brute-force metric
//! oracle that recomputes every metric straight from its definition.
#![allow(dead_code)]

pub mod oracle;
pub mod random_trace;
pub mod fixtures;
