#![no_main]

use libfuzzer_sys::fuzz_target;
use vthinker_core::executor::protocol::{decode_hello, decode_request, decode_response, read_frame};

fuzz_target!(|data: &[u8]| {
    let mut input = data;
    // Stops at the first framing error; each body goes through every decoder.
    while let Ok(Some(body)) = read_frame(&mut input) {
        let _ = decode_hello(&body);
        let _ = decode_request(&body);
        let _ = decode_response(&body);
    }
});
