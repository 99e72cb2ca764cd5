//! Criterion benchmarks for `polylab`; see `benches/`.
