#![no_main]

use libfuzzer_sys::fuzz_target;
use vmr_core::run::parse_predictions;

fuzz_target!(|text: &str| {
    let _ = parse_predictions(text);
});
