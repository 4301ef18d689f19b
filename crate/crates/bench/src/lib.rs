//! Criterion benchmarks for the hot paths of qread-core live in `benches/`.
