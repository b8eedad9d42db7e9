//! Criterion benchmarks for the amalgamation engine live in `benches/`.
