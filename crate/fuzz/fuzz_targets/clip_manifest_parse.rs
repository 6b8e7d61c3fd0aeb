#![no_main]
use clipseg_harness::manifest::ClipManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = ClipManifest::parse(text) {
        assert_eq!(ClipManifest::parse(&m.to_text()).unwrap(), m);
    }
});
