#![no_main]

use libfuzzer_sys::fuzz_target;
use vmr_core::datasets::{parse_charades_sta, serialize_charades_sta, ParseMode};

fuzz_target!(|text: &str| {
    let _ = parse_charades_sta(text, ParseMode::Lenient);
    if let Ok(ds) = parse_charades_sta(text, ParseMode::Strict) {
        let again = parse_charades_sta(&serialize_charades_sta(&ds.queries), ParseMode::Strict)
            .expect("serialized records parse");
        assert_eq!(again.queries, ds.queries);
    }
});
