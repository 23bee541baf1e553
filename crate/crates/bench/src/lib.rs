//! Criterion benchmarks for `metareg-core`; see `benches/`.
