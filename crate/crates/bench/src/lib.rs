//! Criterion benchmarks for the solver stages; see `benches/solvers.rs`.
