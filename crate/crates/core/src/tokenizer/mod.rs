//! Address rebasing, WordPiece vocabulary training, and lossless encoding of
//! rebased functions into token sequences.
//!
//! Id layout is fixed by `max_instructions` alone:
//!
//! | ids                              | meaning                  |
//! |----------------------------------|--------------------------|
//! | 0                                | `<pad>`                  |
//! | 1                                | `<mask>`                 |
//! | 2 .. 2+M                         | jump symbols `INSTR<k>`  |
//! | 2+M .. 2+M+256                   | byte fallback `<0xNN>`   |
//! | 2+M+256 ..                       | learned WordPiece tokens |

mod pretokenize;
mod rebase;
mod vocab;
mod wordpiece;

use thiserror::Error;

use crate::asm::AssemblyFunction;

pub use pretokenize::{jump_symbol, parse_jump_symbol, pretokenize_line, words, Piece};
pub use rebase::rebase;
pub use vocab::{Vocab, VOCAB_FORMAT_VERSION};
pub use wordpiece::{train_wordpiece, WordPieceTrainer};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const MASK_ID: TokenId = 1;
pub const JUMP_BASE: TokenId = 2;
pub const BYTE_TOKENS: usize = 256;
pub const DEFAULT_MAX_INSTRUCTIONS: usize = 64;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocab size {requested} cannot hold {required} reserved and alphabet tokens")]
    VocabTooSmall { requested: usize, required: usize },
    #[error("tokenizer training corpus is empty")]
    EmptyCorpus,
    #[error("unknown token id {0}")]
    UnknownTokenId(TokenId),
    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,
    #[error("vocab file line {line}: {reason}")]
    VocabFormat { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A function encoded as four aligned streams.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub token_ids: Vec<TokenId>,
    /// Index of the instruction owning each token.
    pub instruction_index: Vec<u32>,
    pub position: Vec<u32>,
    pub jump_symbol_mask: Vec<bool>,
    /// Whether instructions were dropped to respect the length limits.
    pub truncated: bool,
    /// Number of byte-fallback tokens emitted.
    pub byte_fallbacks: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of distinct instructions represented.
    pub fn instruction_count(&self) -> usize {
        self.instruction_index
            .last()
            .map_or(0, |&last| last as usize + 1)
    }

    /// Append `<pad>` tokens up to `len`. Padding inherits the last
    /// instruction index so the stream stays non-decreasing.
    pub fn pad_to(&mut self, len: usize) {
        let last = self.instruction_index.last().copied().unwrap_or(0);
        while self.token_ids.len() < len {
            let pos = self.token_ids.len() as u32;
            self.token_ids.push(PAD_ID);
            self.instruction_index.push(last);
            self.position.push(pos);
            self.jump_symbol_mask.push(false);
        }
    }

    /// Positions holding real content: neither `<pad>` nor `<mask>`.
    pub fn content_mask(&self) -> Vec<bool> {
        self.token_ids
            .iter()
            .map(|&id| id != PAD_ID && id != MASK_ID)
            .collect()
    }

    /// Check the stream invariants against `vocab`.
    pub fn check(&self, vocab: &Vocab) -> Result<(), String> {
        let n = self.token_ids.len();
        if self.instruction_index.len() != n
            || self.position.len() != n
            || self.jump_symbol_mask.len() != n
        {
            return Err("stream lengths differ".into());
        }
        if self.instruction_index.windows(2).any(|w| w[0] > w[1]) {
            return Err("instruction index decreases".into());
        }
        for (i, &pos) in self.position.iter().enumerate() {
            if pos as usize != i {
                return Err(format!("position {i} holds {pos}"));
            }
        }
        for (i, (&id, &flag)) in self.token_ids.iter().zip(&self.jump_symbol_mask).enumerate() {
            if id as usize >= vocab.len() {
                return Err(format!("token {i} id {id} out of range"));
            }
            if flag != vocab.jump_index(id).is_some() {
                return Err(format!("jump mask wrong at token {i}"));
            }
        }
        Ok(())
    }
}

/// Encode a rebased function. Sequences are cut at instruction boundaries
/// to fit `max_seq_len` tokens and the vocab's instruction limit; a single
/// instruction longer than `max_seq_len` is cut mid-instruction.
pub fn encode(f: &AssemblyFunction, vocab: &Vocab, max_seq_len: usize) -> TokenSequence {
    let mut seq = TokenSequence::default();
    let mut buf = Vec::new();
    for (index, ins) in f.instructions.iter().enumerate() {
        if index >= vocab.max_instructions() {
            seq.truncated = true;
            break;
        }
        buf.clear();
        let line = ins.text();
        let symbol = ins.jump_target.and_then(|k| {
            let k = usize::try_from(k).ok()?;
            let expected = jump_symbol(k);
            let last = ins.operands.last()?;
            (last == &expected && vocab.jump_id(k).is_some()).then_some((k, expected.len()))
        });
        let fallbacks = match symbol {
            Some((k, sym_len)) => {
                let head = &line[..line.len() - sym_len];
                let n = vocab.encode_text(head, &mut buf);
                buf.push(vocab.jump_id(k).expect("checked above"));
                n
            }
            None => vocab.encode_text(&line, &mut buf),
        };
        let room = max_seq_len.saturating_sub(seq.len());
        if buf.len() > room {
            seq.truncated = true;
            if seq.is_empty() {
                buf.truncate(room);
            } else {
                break;
            }
        }
        seq.byte_fallbacks += fallbacks;
        for &id in &buf {
            let pos = seq.token_ids.len() as u32;
            seq.token_ids.push(id);
            seq.instruction_index.push(index as u32);
            seq.position.push(pos);
            seq.jump_symbol_mask.push(vocab.jump_index(id).is_some());
        }
        if seq.truncated {
            break;
        }
    }
    seq
}

/// Reconstruct the body text of the encoded function, one instruction per
/// line. `<pad>` tokens are skipped.
pub fn decode(seq: &TokenSequence, vocab: &Vocab) -> Result<String, TokenizerError> {
    let mut bytes = Vec::new();
    let mut current: Option<u32> = None;
    for (&id, &instr) in seq.token_ids.iter().zip(&seq.instruction_index) {
        if id == PAD_ID {
            continue;
        }
        if current.is_some_and(|c| c != instr) {
            bytes.push(b'\n');
        }
        current = Some(instr);
        vocab.decode_token(id, &mut bytes)?;
    }
    String::from_utf8(bytes).map_err(|_| TokenizerError::InvalidUtf8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_disassembly;

    fn vocab_for(texts: &[&str]) -> Vocab {
        let corpus: Vec<String> = texts
            .iter()
            .map(|t| rebase(&parse_disassembly(t).unwrap()).body_text())
            .collect();
        WordPieceTrainer::new(600, 1).train(&corpus).unwrap()
    }

    #[test]
    fn single_instruction_has_zero_indices() {
        let f = rebase(&parse_disassembly("0x0: mov eax, 1").unwrap());
        let v = vocab_for(&["0x0: mov eax, 1"]);
        let seq = encode(&f, &v, 64);
        assert!(!seq.is_empty());
        assert!(seq.instruction_index.iter().all(|&i| i == 0));
        assert_eq!(decode(&seq, &v).unwrap(), "mov eax, 1");
    }

    #[test]
    fn jump_symbol_is_masked_exactly() {
        // Fourteen instructions with the last one jumping to the 14th slot.
        let mut text = String::new();
        for i in 0..14u64 {
            text.push_str(&format!("{:#x}: add eax, {i}\n", 0x100 + i * 4));
        }
        text.push_str("0x200: jne 0x134\n0x202: ret\n");
        let f = rebase(&parse_disassembly(&text).unwrap());
        assert_eq!(f.instructions[14].operands, vec!["INSTR13"]);
        let v = vocab_for(&[&text]);
        let seq = encode(&f, &v, 256);
        let flagged: Vec<usize> = (0..seq.len()).filter(|&i| seq.jump_symbol_mask[i]).collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(seq.token_ids[flagged[0]], v.jump_id(13).unwrap());
        assert_eq!(seq.instruction_index[flagged[0]], 14);
        assert_eq!(decode(&seq, &v).unwrap(), f.body_text());
        seq.check(&v).unwrap();
    }

    #[test]
    fn literal_instr_text_is_not_a_jump() {
        let f = rebase(&parse_disassembly("0x0: call INSTR3\n0x5: ret").unwrap());
        let v = vocab_for(&["0x0: nop"]);
        let seq = encode(&f, &v, 64);
        assert!(seq.jump_symbol_mask.iter().all(|&m| !m));
        assert_eq!(decode(&seq, &v).unwrap(), "call INSTR3\nret");
    }

    #[test]
    fn unseen_characters_use_byte_fallback() {
        let v = vocab_for(&["0x0: mov eax, 1"]);
        let f = rebase(&parse_disassembly("0x0: lea rdi, \"héllo wörld ✓\"").unwrap());
        let seq = encode(&f, &v, 256);
        assert!(seq.byte_fallbacks > 0);
        assert_eq!(decode(&seq, &v).unwrap(), f.body_text());
    }

    #[test]
    fn truncation_at_instruction_boundary() {
        let text = "0x0: mov eax, 1\n0x5: mov ebx, 2\n0xa: mov ecx, 3";
        let v = vocab_for(&[text]);
        let f = rebase(&parse_disassembly(text).unwrap());
        let full = encode(&f, &v, 256);
        let per_instr = full.len() / 3;
        let cut = encode(&f, &v, full.len() - 1);
        assert!(cut.truncated);
        assert_eq!(cut.instruction_count(), 2);
        assert_eq!(cut.len(), 2 * per_instr);
        assert_eq!(decode(&cut, &v).unwrap(), "mov eax, 1\nmov ebx, 2");
        // A first instruction longer than the limit is cut inside.
        let tiny = encode(&f, &v, 1);
        assert_eq!(tiny.len(), 1);
        assert!(tiny.truncated);
    }

    #[test]
    fn instruction_limit_truncates() {
        let mut text = String::new();
        for i in 0..70u64 {
            text.push_str(&format!("{:#x}: nop\n", i));
        }
        let v = vocab_for(&[&text]);
        let f = rebase(&parse_disassembly(&text).unwrap());
        let seq = encode(&f, &v, 1024);
        assert!(seq.truncated);
        assert_eq!(seq.instruction_count(), DEFAULT_MAX_INSTRUCTIONS);
    }

    #[test]
    fn padding_keeps_invariants() {
        let v = vocab_for(&["0x0: mov eax, 1"]);
        let f = rebase(&parse_disassembly("0x0: mov eax, 1\n0x5: ret").unwrap());
        let mut seq = encode(&f, &v, 64);
        let n = seq.len();
        seq.pad_to(n + 5);
        seq.check(&v).unwrap();
        assert_eq!(seq.content_mask().iter().filter(|&&c| c).count(), n);
        assert_eq!(decode(&seq, &v).unwrap(), "mov eax, 1\nret");
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let v = vocab_for(&["0x0: nop"]);
        let seq = TokenSequence {
            token_ids: vec![v.len() as u32],
            instruction_index: vec![0],
            position: vec![0],
            jump_symbol_mask: vec![false],
            ..Default::default()
        };
        assert!(matches!(
            decode(&seq, &v),
            Err(TokenizerError::UnknownTokenId(id)) if id == v.len() as u32
        ));
    }
}
