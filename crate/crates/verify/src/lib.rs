//! Reporting helpers for the acceptance suite in `tests/acceptance.rs`.
//!
//! Verdict lines are written straight to stderr so they show up even when
//! the test harness captures the output of passing tests.

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

static SERIAL: Mutex<()> = Mutex::new(());

/// Holds a process-wide lock so criteria with runtime limits never share
/// the CPU with another criterion.
pub fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Formats one `ACCEPTANCE <id> PASS|FAIL <name>: <detail>` line.
pub fn verdict_line(id: u32, name: &str, passed: bool, detail: &str) -> String {
    format!(
        "ACCEPTANCE {id:>2} {} {name}: {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    )
}

/// Prints the verdict line and panics on FAIL.
pub fn verdict(id: u32, name: &str, passed: bool, detail: String) {
    let _ = std::io::stderr().write_all(verdict_line(id, name, passed, &detail).as_bytes());
    assert!(passed, "criterion {id} ({name}) failed: {detail}");
}

pub fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}
