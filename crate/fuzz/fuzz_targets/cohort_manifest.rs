#![no_main]

use echotrack::gls::CohortManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = CohortManifest::parse(data) {
        assert!(!m.entries.is_empty());
    }
});
