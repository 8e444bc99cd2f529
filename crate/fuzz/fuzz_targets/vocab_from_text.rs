#![no_main]

use asmalign::tokenizer::Vocab;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(v) = Vocab::from_text(text) {
        // Whatever loads must serialize back to something that loads the same.
        let again = Vocab::from_text(&v.to_text()).expect("round trip");
        assert_eq!(again.tokens(), v.tokens());
    }
});
