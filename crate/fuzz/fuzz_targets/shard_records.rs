#![no_main]

use libfuzzer_sys::fuzz_target;
use vthinker_core::datamodel::{read_records, Sample};

fuzz_target!(|data: &[u8]| {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    std::fs::write(&path, data).unwrap();
    if let Ok((samples, _)) = read_records::<Sample, _>(&path, |_, _| Ok(())) {
        for s in &samples {
            let _ = s.id_matches();
        }
    }
});
