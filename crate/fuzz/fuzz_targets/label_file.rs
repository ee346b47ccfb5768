#![no_main]

use dmckn::dataio::{parse_labels, parse_vocab};
use libfuzzer_sys::fuzz_target;

// Input is a vocabulary and a label file separated by a NUL byte.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (vocab, labels) = text.split_once('\0').unwrap_or(("a\nb\nc\n", text));
    if let Ok(vocab) = parse_vocab(vocab, "fuzz") {
        let _ = parse_labels(labels, &vocab, "fuzz");
    }
});
