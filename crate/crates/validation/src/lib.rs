//! Acceptance suite for `fewmax`; see `tests/acceptance.rs`.
