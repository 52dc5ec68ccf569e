#![no_main]

use echotrack::synthdata::{BenchmarkManifest, Split};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = BenchmarkManifest::parse(data) {
        let n: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| m.ids(s).len()).sum();
        assert_eq!(n, m.scenes.len());
    }
});
