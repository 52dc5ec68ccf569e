#![no_main]

use echotrack::container::SceneMeta;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = SceneMeta::parse(data);
});
