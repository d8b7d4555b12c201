//! Bench-only crate; the measurements live in `benches/`. Run them with
//! `cargo bench -p adqp-bench`.
