#![no_main]

use libfuzzer_sys::fuzz_target;
use vmr_core::debias::parse_debias_response;

fuzz_target!(|text: &str| {
    for n_d in [1, 3, 5] {
        let set = parse_debias_response(text, n_d, "q", "a person opens a door").expect("fallback always applies");
        assert!(!set.is_empty() && set.len() <= n_d);
        assert!(set.rewrites().iter().all(|r| !r.trim().is_empty()));
    }
});
