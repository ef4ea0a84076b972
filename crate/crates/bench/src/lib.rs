//! Benchmarks live in `benches/`; run them with `cargo bench -p unimatch-bench`.
