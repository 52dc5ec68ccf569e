#![no_main]

use echotrack::container::TrackFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = TrackFile::parse(data) {
        let _ = file.trajectories();
    }
});
