#![no_main]

use avsep::synthdata::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = Manifest::parse(text) {
            assert!(Manifest::parse(&m.to_json()).is_ok());
        }
    }
});
