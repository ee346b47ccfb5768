#![no_main]

use dmckn::dataio::{decode_features, encode_features};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = decode_features(data, "fuzz") {
        // Anything accepted must survive a round trip.
        let bytes = encode_features(&set).expect("decoded set re-encodes");
        let again = decode_features(&bytes, "fuzz").expect("re-encoded set decodes");
        assert_eq!(again.ids, set.ids);
        assert_eq!((again.grid, again.dim), (set.grid, set.dim));
    }
});
