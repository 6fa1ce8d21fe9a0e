#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use pdeflow::io::{decode_ground_truth, encode_ground_truth};

fuzz_target!(|data: &[u8]| {
    if let Ok(gt) = decode_ground_truth(data, Path::new("fuzz")) {
        assert_eq!(encode_ground_truth(&gt), data);
    }
});
