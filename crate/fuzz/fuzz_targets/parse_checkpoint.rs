#![no_main]

use libfuzzer_sys::fuzz_target;
use skinseg::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode(data) {
        assert_eq!(decode(&encode(&params)).expect("re-encoded checkpoint decodes"), params);
    }
});
