#![no_main]

use libfuzzer_sys::fuzz_target;
use skinseg::codec::{decode_binary_mask, encode_binary_mask};

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = decode_binary_mask(data) {
        let again = decode_binary_mask(&encode_binary_mask(&mask)).expect("re-encoded mask decodes");
        assert_eq!(again, mask);
    }
});
