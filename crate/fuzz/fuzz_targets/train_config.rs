#![no_main]

use echotrack::training::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = TrainConfig::parse_toml(data) {
        cfg.validate().expect("parsed configs are valid");
    }
});
