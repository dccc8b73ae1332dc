#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = insenskit::config::ScenarioConfig::from_str_in(text, std::path::Path::new("."));
    }
});
