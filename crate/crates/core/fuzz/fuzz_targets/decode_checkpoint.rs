#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use pdeflow::io::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode_checkpoint(data, Path::new("fuzz")) {
        assert_eq!(encode_checkpoint(&params), data);
    }
});
