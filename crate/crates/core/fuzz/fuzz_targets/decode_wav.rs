#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = avsep::dsp::decode_wav(data) {
        assert!(w.samples.iter().all(|s| s.is_finite()));
    }
});
