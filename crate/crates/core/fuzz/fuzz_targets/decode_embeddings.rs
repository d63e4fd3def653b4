#![no_main]

use avsep::synthdata::{decode_embeddings, encode_embeddings};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frames) = decode_embeddings(data) {
        assert_eq!(encode_embeddings(&frames).unwrap(), data);
    }
});
