#![no_main]

use libfuzzer_sys::fuzz_target;
use vmr_core::datasets::{parse_activitynet, serialize_activitynet, ParseMode};

fuzz_target!(|text: &str| {
    let _ = parse_activitynet(text, ParseMode::Lenient);
    if let Ok(ds) = parse_activitynet(text, ParseMode::Strict) {
        let out = serialize_activitynet(&ds).expect("every video has a duration");
        parse_activitynet(&out, ParseMode::Strict).expect("serialized records parse");
    }
});
