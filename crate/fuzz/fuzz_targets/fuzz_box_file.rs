//! Fuzz the box interchange parser: it must never panic, and accepted
//! records must survive a write/parse round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(records) = demf::eval::parse_box_file(text) {
        let rewritten = demf::eval::write_box_file(&records);
        let reparsed = demf::eval::parse_box_file(&rewritten).expect("round trip parses");
        assert_eq!(reparsed, records);
    }
});
