//! Replays the checked-in fuzz corpus seeds on stable so the targets'
//! entry points stay exercised without cargo-fuzz.

use std::path::PathBuf;

use vthinker_core::datamodel::{read_records, Sample};
use vthinker_core::executor::protocol::{decode_hello, decode_request, decode_response, read_frame};
use vthinker_core::gateway::blocks::{
    parse_blocks, parse_extension, parse_gen_output, parse_judgement, parse_repair, parse_verdict,
};
use vthinker_core::rollout::parse_turn;
use vthinker_core::sketch::{annotations, parse_program};
use vthinker_core::vtbench::load_benchmark;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn frame_seeds() {
    let mut decoded = 0;
    for (_, data) in seeds("frame_decode") {
        let mut input = data.as_slice();
        while let Ok(Some(body)) = read_frame(&mut input) {
            let ok = decode_hello(&body).is_ok() | decode_request(&body).is_ok() | decode_response(&body).is_ok();
            decoded += ok as usize;
        }
    }
    assert!(decoded >= 4);
}

#[test]
fn block_seeds() {
    for (name, data) in seeds("gen_blocks") {
        let text = String::from_utf8(data).unwrap();
        let blocks = parse_blocks(&text);
        assert_eq!(blocks.is_ok(), name != "seed-unbalanced", "{name}");
        let _ = (parse_verdict(&text), parse_repair(&text), parse_extension(&text), parse_judgement(&text));
        if name == "seed-sample" {
            parse_gen_output(&text).unwrap();
        }
    }
}

#[test]
fn sketch_seeds() {
    for (name, data) in seeds("sketch_parse") {
        let src = String::from_utf8(data).unwrap();
        let parsed = parse_program(&src);
        assert_eq!(parsed.is_ok(), !name.ends_with("-rejected"), "{name}: {parsed:?}");
        let _ = annotations(&src);
    }
}

#[test]
fn turn_seeds() {
    for (_, data) in seeds("policy_turn") {
        let _ = parse_turn(std::str::from_utf8(&data).unwrap());
    }
}

#[test]
fn shard_and_benchmark_seeds() {
    let dir = tempfile::tempdir().unwrap();
    for (name, data) in seeds("shard_records") {
        let path = dir.path().join(&name);
        std::fs::write(&path, data).unwrap();
        let r = read_records::<Sample, _>(&path, |_, _| Ok(()));
        assert_eq!(r.is_ok(), name != "seed-bad-json", "{name}");
    }
    for (name, data) in seeds("benchmark_load") {
        let path = dir.path().join(&name);
        std::fs::write(&path, data).unwrap();
        // No image store next to the seed, so loading is expected to fail cleanly.
        assert!(load_benchmark(&path).is_err(), "{name}");
    }
}
