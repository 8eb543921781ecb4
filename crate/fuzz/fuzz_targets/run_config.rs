#![no_main]

use libfuzzer_sys::fuzz_target;
use vmr_core::run::RunConfig;

fuzz_target!(|text: &str| {
    if let Ok(config) = RunConfig::from_toml(text, &[]) {
        let again = RunConfig::from_toml(&config.to_toml(), &[]).expect("serialized config parses");
        assert_eq!(again, config);
    }
});
