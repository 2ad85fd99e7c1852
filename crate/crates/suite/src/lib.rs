//! Acceptance criteria for the egobench workspace live in `tests/acceptance.rs`.
