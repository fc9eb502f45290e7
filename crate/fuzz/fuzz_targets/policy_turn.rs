#![no_main]

use libfuzzer_sys::fuzz_target;
use vthinker_core::rollout::parse_turn;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_turn(text);
    }
});
