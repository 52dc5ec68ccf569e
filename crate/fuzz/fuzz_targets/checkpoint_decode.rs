#![no_main]

use echotrack::checkpoint::Archive;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(archive) = Archive::decode(data) {
        // Compare encodings: NaN payloads make tensor equality unusable.
        let bytes = archive.encode().expect("decoded archives re-encode");
        let again = Archive::decode(&bytes).expect("re-encoded archives decode");
        assert_eq!(again.encode().expect("second encode"), bytes);
    }
});
