#![no_main]

use std::sync::OnceLock;

use asmalign::tokenizer::{decode, TokenSequence, Vocab, WordPieceTrainer};
use libfuzzer_sys::fuzz_target;

fn vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| {
        let text = vec!["mov rax, qword ptr [rbp - 8]\nadd rax, 1\njmp INSTR0\nret".to_string()];
        WordPieceTrainer::new(400, 1).with_max_instructions(8).train(&text).unwrap()
    })
}

// Pairs of little-endian u16: token id, then instruction index.
fuzz_target!(|data: &[u8]| {
    let mut seq = TokenSequence::default();
    for c in data.chunks_exact(4) {
        seq.token_ids.push(u16::from_le_bytes([c[0], c[1]]) as _);
        seq.instruction_index.push(u16::from_le_bytes([c[2], c[3]]) as u32);
    }
    let _ = decode(&seq, vocab());
});
