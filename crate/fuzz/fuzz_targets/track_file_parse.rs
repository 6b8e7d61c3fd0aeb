#![no_main]
use clipseg_harness::trackfile::TrackFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = TrackFile::parse(text) {
        assert_eq!(TrackFile::parse(&file.to_text()).unwrap(), file);
    }
});
