//! Test-only crate: the acceptance suite lives in `tests/acceptance.rs`.
//! The library is intentionally empty; depending on the tree crate only
//! through dev-dependencies keeps its instrumentation hooks out of
//! non-test builds.
