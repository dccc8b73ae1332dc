#![no_main]

use insenskit::io::Container;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(c.encode(), data);
    }
});
