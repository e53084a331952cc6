//! Criterion benchmarks live under `benches/`; nothing is exported here.
