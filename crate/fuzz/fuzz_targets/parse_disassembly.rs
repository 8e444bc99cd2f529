#![no_main]

use asmalign::asm::{count_basic_blocks, parse_disassembly};
use asmalign::tokenizer::rebase;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(f) = parse_disassembly(text) {
        let _ = count_basic_blocks(&f);
        let r = rebase(&f);
        assert_eq!(r.instructions.len(), f.instructions.len());
    }
});
