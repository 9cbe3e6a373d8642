//! Acceptance criteria for the dualshot workspace live in `tests/acceptance.rs`.
