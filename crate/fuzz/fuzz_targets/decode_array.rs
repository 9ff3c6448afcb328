#![no_main]

use libfuzzer_sys::fuzz_target;
use udig_core::persistence::{decode_array, encode_array};

fuzz_target!(|data: &[u8]| {
    if let Ok(array) = decode_array(data) {
        // anything that decodes must re-encode to the same bytes
        let bytes = encode_array(&array).expect("decoded array encodes");
        assert_eq!(bytes, data);
    }
});
