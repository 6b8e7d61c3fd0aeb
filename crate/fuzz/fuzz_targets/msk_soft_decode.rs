#![no_main]
use clipseg_core::io::masks::{decode_soft, encode_soft};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(masks) = decode_soft(data) {
        assert_eq!(decode_soft(&encode_soft(&masks)).unwrap(), masks);
    }
});
