#![no_main]

use libfuzzer_sys::fuzz_target;
use vmr_core::datasets::parse_synthetic;

fuzz_target!(|text: &str| {
    let _ = parse_synthetic(text);
});
