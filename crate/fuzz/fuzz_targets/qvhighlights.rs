#![no_main]

use libfuzzer_sys::fuzz_target;
use vmr_core::datasets::{parse_qvhighlights, serialize_qvhighlights, ParseMode};

fuzz_target!(|text: &str| {
    let _ = parse_qvhighlights(text, ParseMode::Lenient);
    if let Ok(ds) = parse_qvhighlights(text, ParseMode::Strict) {
        let out = serialize_qvhighlights(&ds).expect("every video has a duration");
        parse_qvhighlights(&out, ParseMode::Strict).expect("serialized records parse");
    }
});
