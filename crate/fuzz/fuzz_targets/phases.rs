#![no_main]

use echotrack::training::parse_phases;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(phases) = parse_phases(data) {
        assert!(phases.iter().all(|p| p.frames >= 2));
    }
});
