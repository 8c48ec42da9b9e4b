//! Fuzz the binary checkpoint parser: arbitrary bytes must be rejected
//! cleanly, with no panics and no allocation blowups from length fields.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = demf::diffcore::parse_checkpoint(data);
});
