#![no_main]

use libfuzzer_sys::fuzz_target;
use vmr_core::backends::http::parse_chat_response;

fuzz_target!(|text: &str| {
    let _ = parse_chat_response(text);
});
