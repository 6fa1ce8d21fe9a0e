#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use pdeflow::io::{encode_trajectory, parse_trajectory};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(track) = parse_trajectory(text, Path::new("fuzz")) {
            let again = parse_trajectory(&encode_trajectory(&track), Path::new("fuzz")).expect("re-parse");
            assert_eq!(again, track);
        }
    }
});
