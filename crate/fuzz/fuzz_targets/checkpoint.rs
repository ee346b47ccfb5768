#![no_main]

use dmckn::dataio::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data, "fuzz") {
        let bytes = encode_checkpoint(&ck).expect("decoded checkpoint re-encodes");
        decode_checkpoint(&bytes, "fuzz").expect("re-encoded checkpoint decodes");
    }
});
