#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use pdeflow::io::{encode_manifest, parse_manifest};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(entries) = parse_manifest(text, Path::new("fuzz")) {
            let again = parse_manifest(&encode_manifest(&entries), Path::new("fuzz")).expect("re-parse");
            assert_eq!(again, entries);
        }
    }
});
