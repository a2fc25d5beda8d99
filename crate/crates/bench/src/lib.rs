//! Criterion benchmarks for the hot loops of `chaosrough`; see `benches/`.
