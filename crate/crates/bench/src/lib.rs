//! Criterion benchmarks for cinefuse live under `benches/`.
