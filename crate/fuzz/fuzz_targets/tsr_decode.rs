#![no_main]
use clipseg_tensor::io::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode(data) {
        // anything accepted re-encodes to the same bytes
        assert_eq!(encode(&t), data);
    }
});
