#![no_main]
use clipseg_harness::config::parse_config;
use clipseg_harness::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_config(text);
    if let Ok(cfg) = RunConfig::load(Some(text), &[]) {
        let again = RunConfig::load(Some(&cfg.to_text()), &[]).unwrap();
        assert_eq!(again.to_pairs(), cfg.to_pairs());
    }
});
