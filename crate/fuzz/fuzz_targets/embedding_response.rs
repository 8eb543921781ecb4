#![no_main]

use libfuzzer_sys::fuzz_target;
use vmr_core::backends::http::parse_embedding_response;

fuzz_target!(|text: &str| {
    for expected in [1, 2, 3] {
        if let Ok(out) = parse_embedding_response(text, expected) {
            assert_eq!(out.len(), expected);
        }
    }
});
