#![no_main]

use libfuzzer_sys::fuzz_target;
use vthinker_core::sketch::{annotations, parse_program};

fuzz_target!(|data: &[u8]| {
    if let Ok(src) = std::str::from_utf8(data) {
        if parse_program(src).is_ok() {
            let _ = annotations(src);
        }
    }
});
