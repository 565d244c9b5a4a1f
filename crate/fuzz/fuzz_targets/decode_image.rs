#![no_main]

use libfuzzer_sys::fuzz_target;
use skinseg::codec::{decode_rgb, rgb_to_tensor};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_rgb(data) {
        let _ = rgb_to_tensor(&img);
    }
});
