#![no_main]

use asmalign::align::PrecomputedEmbeddings;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = PrecomputedEmbeddings::from_bytes(data);
});
