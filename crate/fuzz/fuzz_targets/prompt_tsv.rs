#![no_main]

use asmalign::eval::parse_prompt_tsv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = parse_prompt_tsv(s);
    }
});
