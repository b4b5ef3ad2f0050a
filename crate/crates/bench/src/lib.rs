//! Benchmarks for the metric pipeline; see `benches/`.
