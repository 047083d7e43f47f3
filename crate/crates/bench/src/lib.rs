//! Criterion benchmarks for the covloc hot paths; see `benches/`.
