#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = meanfield_cli::parse_config(text, None) {
            // a parsed config must survive its own round trip
            let again = meanfield_cli::parse_config(&cfg.to_toml().unwrap(), None).unwrap();
            assert_eq!(
                cfg.experiment.content_hash(),
                again.experiment.content_hash()
            );
        }
    }
});
