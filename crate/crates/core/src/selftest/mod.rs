//! Built-in verification suites behind `sfdfusion selftest`.

pub mod oracle;

mod checks;

pub use checks::{run, CheckResult, Overrides};
