//! Criterion benchmarks for the fatseg pipeline; see `benches/`.
