//! The checked-in fuzz corpus seeds must stay valid inputs, otherwise the
//! fuzzer starts from rejected bytes only.

use std::fs;
use std::path::PathBuf;

use dmckn::config::RunConfig;
use dmckn::dataio::{decode_checkpoint, decode_features, parse_labels, parse_vocab};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("seed-"))
        .map(|p| (p.display().to_string(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn binary_seeds_decode() {
    for (name, bytes) in seeds("feature_file") {
        decode_features(&bytes, &name).unwrap();
    }
    for (name, bytes) in seeds("checkpoint") {
        decode_checkpoint(&bytes, &name).unwrap().params().unwrap();
    }
}

#[test]
fn text_seeds_parse() {
    for (name, bytes) in seeds("vocab") {
        parse_vocab(std::str::from_utf8(&bytes).unwrap(), &name).unwrap();
    }
    for (name, bytes) in seeds("label_file") {
        let text = std::str::from_utf8(&bytes).unwrap();
        let (vocab, labels) = text.split_once('\0').unwrap_or(("a\nb\nc\n", text));
        let vocab = parse_vocab(vocab, &name).unwrap();
        assert!(!parse_labels(labels, &vocab, &name).unwrap().is_empty());
    }
    for (name, bytes) in seeds("run_config") {
        RunConfig::from_toml_str(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
