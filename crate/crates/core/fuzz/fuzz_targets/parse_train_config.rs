#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use pdeflow::config::{parse_train_config, train_config_text};
use pdeflow::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let base = TrainConfig::default();
        if let Ok(config) = parse_train_config(text, Path::new("fuzz"), &base) {
            let again = parse_train_config(&train_config_text(&config), Path::new("fuzz"), &base).expect("re-parse");
            assert_eq!(again, config);
        }
    }
});
