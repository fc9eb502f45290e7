#![no_main]

use libfuzzer_sys::fuzz_target;
use vthinker_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let base = std::env::temp_dir();
    if let Ok(cfg) = RunConfig::from_str_with(text, &base, &[], None) {
        let _ = cfg.to_toml();
    }
});
