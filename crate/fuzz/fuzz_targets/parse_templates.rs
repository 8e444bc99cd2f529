#![no_main]

use asmalign::synth::parse_templates;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(ts) = parse_templates(s) {
            for t in &ts {
                let _ = t.instantiate();
            }
        }
    }
});
