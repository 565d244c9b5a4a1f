#![no_main]

use libfuzzer_sys::fuzz_target;
use skinseg::codec::{decode_part_mask, encode_part_mask};

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = decode_part_mask(data) {
        let again = decode_part_mask(&encode_part_mask(&mask)).expect("re-encoded mask decodes");
        assert_eq!(again, mask);
    }
});
