#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(samples) = insenskit::io::parse_trace_samples(text) {
            assert!(samples.windows(2).all(|w| w[0].arc < w[1].arc));
        }
    }
});
