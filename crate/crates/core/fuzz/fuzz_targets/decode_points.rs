#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use pdeflow::io::{decode_points, encode_points};

fuzz_target!(|data: &[u8]| {
    if let Ok(cloud) = decode_points(data, Path::new("fuzz")) {
        assert_eq!(encode_points(&cloud), data);
    }
});
