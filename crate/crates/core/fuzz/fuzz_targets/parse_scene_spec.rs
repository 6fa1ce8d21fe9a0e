#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use pdeflow::config::parse_scene_spec;
use pdeflow::synth::SceneSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_scene_spec(text, Path::new("fuzz"), &SceneSpec::desk_av());
    }
});
