#![no_main]
use clipseg_core::io::masks::{decode_binary, encode_binary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(masks) = decode_binary(data) {
        assert_eq!(decode_binary(&encode_binary(&masks)).unwrap(), masks);
    }
});
