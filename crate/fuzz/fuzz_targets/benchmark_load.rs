#![no_main]

use libfuzzer_sys::fuzz_target;
use vthinker_core::vtbench::load_benchmark;

fuzz_target!(|data: &[u8]| {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.jsonl");
    std::fs::write(&path, data).unwrap();
    let _ = load_benchmark(&path);
});
