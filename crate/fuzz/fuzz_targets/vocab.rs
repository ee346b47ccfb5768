#![no_main]

use dmckn::dataio::{encode_vocab, parse_vocab};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(vocab) = parse_vocab(text, "fuzz") {
        let again = parse_vocab(&encode_vocab(vocab.labels()), "fuzz").expect("encoded vocab parses");
        assert_eq!(again, vocab);
    }
});
