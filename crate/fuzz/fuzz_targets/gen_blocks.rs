#![no_main]

use libfuzzer_sys::fuzz_target;
use vthinker_core::gateway::blocks::{
    parse_blocks, parse_extension, parse_gen_output, parse_judgement, parse_repair, parse_verdict,
};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_blocks(text);
    let _ = parse_gen_output(text);
    let _ = parse_verdict(text);
    let _ = parse_repair(text);
    let _ = parse_extension(text);
    let _ = parse_judgement(text);
});
