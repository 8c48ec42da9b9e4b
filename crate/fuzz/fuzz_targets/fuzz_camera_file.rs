//! Fuzz the camera-file parser: it must never panic, and every camera it
//! accepts must survive a write/parse round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cams) = demf::geometry::parse_camera_file(text) {
        let rewritten = demf::geometry::write_camera_file(&cams);
        let reparsed = demf::geometry::parse_camera_file(&rewritten).expect("round trip parses");
        assert_eq!(reparsed, cams);
    }
});
