//! Fuzz the run-configuration parser: arbitrary text must yield either a
//! config or a structured error, never a panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = demf::cli::parse_run_config(text);
});
