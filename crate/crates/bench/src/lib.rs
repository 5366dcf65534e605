//! Criterion benchmarks for the scoring pipeline live in `benches/`.
