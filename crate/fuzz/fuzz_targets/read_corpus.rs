#![no_main]

use asmalign::asm::read_corpus;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_corpus(data);
});
