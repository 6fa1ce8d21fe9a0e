#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use pdeflow::io::{decode_flow, encode_flow};

fuzz_target!(|data: &[u8]| {
    if let Ok(flow) = decode_flow(data, Path::new("fuzz")) {
        assert_eq!(encode_flow(&flow), data);
    }
});
