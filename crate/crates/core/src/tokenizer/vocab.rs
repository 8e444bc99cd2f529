use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use super::{
    jump_symbol, words, TokenId, TokenizerError, BYTE_TOKENS, JUMP_BASE, MASK_ID, PAD_ID,
};

pub const VOCAB_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "asmalign-vocab";
const CONTINUATION: &str = "##";

/// Token table. Learned tokens are either word-initial (`mov`, ` eax,`) or
/// continuations (`##ax`), which only match after the start of a word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    max_instructions: usize,
    tokens: Vec<String>,
    learned_end: usize,
    initial: HashMap<String, TokenId>,
    continuation: HashMap<String, TokenId>,
    longest: usize,
}

pub(crate) fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

pub(crate) fn unused_token(i: usize) -> String {
    format!("<unused_{i}>")
}

pub(crate) fn reserved_tokens(max_instructions: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(2 + max_instructions + BYTE_TOKENS);
    out.push("<pad>".to_string());
    out.push("<mask>".to_string());
    out.extend((0..max_instructions).map(jump_symbol));
    out.extend((0..=255u8).map(byte_token));
    out
}

impl Vocab {
    /// Build from the learned tokens (alphabet first, then merges), padding
    /// with `<unused_i>` entries up to `size`.
    pub(crate) fn from_learned(
        max_instructions: usize,
        learned: Vec<String>,
        size: usize,
    ) -> Result<Self, TokenizerError> {
        let mut tokens = reserved_tokens(max_instructions);
        tokens.extend(learned);
        let learned_end = tokens.len();
        let mut taken: HashSet<String> = tokens.iter().cloned().collect();
        let mut i = 0;
        while tokens.len() < size {
            let t = unused_token(i);
            i += 1;
            if taken.insert(t.clone()) {
                tokens.push(t);
            }
        }
        Self::assemble(max_instructions, tokens, learned_end).map_err(|reason| {
            TokenizerError::VocabFormat { line: 0, reason }
        })
    }

    fn assemble(
        max_instructions: usize,
        tokens: Vec<String>,
        learned_end: usize,
    ) -> Result<Self, String> {
        let learned_base = Self::learned_base_for(max_instructions);
        if tokens.len() < learned_base || learned_end < learned_base || learned_end > tokens.len()
        {
            return Err("reserved ranges do not fit".into());
        }
        let mut seen = HashSet::with_capacity(tokens.len());
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        let mut initial = HashMap::new();
        let mut continuation = HashMap::new();
        let mut longest = 0;
        for (id, t) in tokens.iter().enumerate().take(learned_end).skip(learned_base) {
            if t.is_empty() || t == CONTINUATION {
                return Err(format!("empty learned token at id {id}"));
            }
            let (map, surface) = match t.strip_prefix(CONTINUATION) {
                Some(s) => (&mut continuation, s),
                None => (&mut initial, t.as_str()),
            };
            longest = longest.max(surface.len());
            map.insert(surface.to_string(), id as TokenId);
        }
        Ok(Self {
            max_instructions,
            tokens,
            learned_end,
            initial,
            continuation,
            longest,
        })
    }

    pub fn learned_base_for(max_instructions: usize) -> usize {
        JUMP_BASE as usize + max_instructions + BYTE_TOKENS
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_instructions(&self) -> usize {
        self.max_instructions
    }

    pub fn pad_id(&self) -> TokenId {
        PAD_ID
    }

    pub fn mask_id(&self) -> TokenId {
        MASK_ID
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn jump_id(&self, k: usize) -> Option<TokenId> {
        (k < self.max_instructions).then(|| JUMP_BASE + k as TokenId)
    }

    pub fn jump_index(&self, id: TokenId) -> Option<usize> {
        let k = id.checked_sub(JUMP_BASE)? as usize;
        (k < self.max_instructions).then_some(k)
    }

    fn byte_base(&self) -> usize {
        JUMP_BASE as usize + self.max_instructions
    }

    pub fn byte_id(&self, b: u8) -> TokenId {
        (self.byte_base() + b as usize) as TokenId
    }

    pub fn byte_value(&self, id: TokenId) -> Option<u8> {
        let off = (id as usize).checked_sub(self.byte_base())?;
        (off < BYTE_TOKENS).then_some(off as u8)
    }

    /// Ids of learned (non-reserved, non-unused) tokens.
    pub fn learned_ids(&self) -> std::ops::Range<TokenId> {
        Self::learned_base_for(self.max_instructions) as TokenId..self.learned_end as TokenId
    }

    /// Greedy longest-match WordPiece over the words of `text`, appending
    /// ids to `out`. Characters with no matching token fall back to byte
    /// tokens. Returns the number of byte tokens emitted.
    pub fn encode_text(&self, text: &str, out: &mut Vec<TokenId>) -> usize {
        words(text).map(|w| self.encode_word(w, out)).sum()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) -> usize {
        let mut fallbacks = 0;
        let mut start = 0;
        while start < word.len() {
            let map = if start == 0 {
                &self.initial
            } else {
                &self.continuation
            };
            let rest = &word[start..];
            let mut end = rest.len().min(self.longest);
            let mut matched = None;
            while end > 0 {
                if rest.is_char_boundary(end) {
                    if let Some(&id) = map.get(&rest[..end]) {
                        matched = Some((id, end));
                        break;
                    }
                }
                end -= 1;
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    start += len;
                }
                None => {
                    let ch = rest.chars().next().expect("non-empty rest");
                    let mut buf = [0u8; 4];
                    for &b in ch.encode_utf8(&mut buf).as_bytes() {
                        out.push(self.byte_id(b));
                        fallbacks += 1;
                    }
                    start += ch.len_utf8();
                }
            }
        }
        fallbacks
    }

    /// Append the bytes a token stands for.
    pub(crate) fn decode_token(&self, id: TokenId, out: &mut Vec<u8>) -> Result<(), TokenizerError> {
        let token = self.token(id).ok_or(TokenizerError::UnknownTokenId(id))?;
        if let Some(b) = self.byte_value(id) {
            out.push(b);
        } else if (id as usize) >= Self::learned_base_for(self.max_instructions)
            && (id as usize) < self.learned_end
        {
            let surface = token.strip_prefix(CONTINUATION).unwrap_or(token);
            out.extend_from_slice(surface.as_bytes());
        } else {
            out.extend_from_slice(token.as_bytes());
        }
        Ok(())
    }

    /// Serialize: a header naming the reservations, then one JSON-quoted
    /// token per line in id order.
    pub fn to_text(&self) -> String {
        let learned = self.learned_ids();
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {VOCAB_FORMAT_VERSION}");
        let _ = writeln!(out, "size {}", self.tokens.len());
        let _ = writeln!(out, "max_instructions {}", self.max_instructions);
        let _ = writeln!(out, "special pad={PAD_ID} mask={MASK_ID}");
        let _ = writeln!(out, "jump {JUMP_BASE} {}", self.max_instructions);
        let _ = writeln!(out, "bytes {} {BYTE_TOKENS}", self.byte_base());
        let _ = writeln!(out, "learned {} {}", learned.start, learned.end);
        out.push_str("---\n");
        for t in &self.tokens {
            out.push_str(&serde_json::to_string(t).expect("string serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, reason: String| TokenizerError::VocabFormat { line, reason };
        let mut field = |name: &str| -> Result<(usize, Vec<String>), TokenizerError> {
            let (no, line) = lines
                .next()
                .ok_or_else(|| err(0, format!("missing `{name}` header")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(err(no, format!("expected `{name}`")));
            }
            Ok((no, parts.map(str::to_string).collect()))
        };
        let num = |no: usize, s: Option<&String>| -> Result<usize, TokenizerError> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| err(no, "expected a number".into()))
        };

        let (no, v) = field(MAGIC)?;
        if num(no, v.first())? != VOCAB_FORMAT_VERSION as usize {
            return Err(err(no, "unsupported vocab version".into()));
        }
        let (no, v) = field("size")?;
        let size = num(no, v.first())?;
        let (no, v) = field("max_instructions")?;
        let max_instructions = num(no, v.first())?;
        // Bound reservations before allocating anything.
        if max_instructions > 1 << 20 || size > 1 << 24 {
            return Err(err(no, "vocab too large".into()));
        }
        let (no, v) = field("special")?;
        if v != [format!("pad={PAD_ID}"), format!("mask={MASK_ID}")] {
            return Err(err(no, "unexpected special ids".into()));
        }
        let (no, v) = field("jump")?;
        if num(no, v.first())? != JUMP_BASE as usize || num(no, v.get(1))? != max_instructions {
            return Err(err(no, "jump reservation disagrees with max_instructions".into()));
        }
        let (no, v) = field("bytes")?;
        if num(no, v.first())? != JUMP_BASE as usize + max_instructions
            || num(no, v.get(1))? != BYTE_TOKENS
        {
            return Err(err(no, "byte reservation misplaced".into()));
        }
        let (no, v) = field("learned")?;
        let learned_base = num(no, v.first())?;
        let learned_end = num(no, v.get(1))?;
        if learned_base != Self::learned_base_for(max_instructions)
            || learned_end < learned_base
            || learned_end > size
        {
            return Err(err(no, "learned range misplaced".into()));
        }
        let (no, sep) = lines.next().ok_or_else(|| err(0, "missing separator".into()))?;
        if sep != "---" {
            return Err(err(no, "expected `---`".into()));
        }

        let reserved = reserved_tokens(max_instructions);
        let mut tokens = Vec::with_capacity(size.min(1 << 16));
        for (no, line) in lines {
            let t: String = serde_json::from_str(line)
                .map_err(|e| err(no, format!("bad token literal: {e}")))?;
            if let Some(expected) = reserved.get(tokens.len()) {
                if &t != expected {
                    return Err(err(no, format!("reserved slot holds {t:?}")));
                }
            }
            tokens.push(t);
            if tokens.len() > size {
                return Err(err(no, "more tokens than declared".into()));
            }
        }
        if tokens.len() != size {
            return Err(err(0, format!("declared {size} tokens, found {}", tokens.len())));
        }
        Self::assemble(max_instructions, tokens, learned_end).map_err(|r| err(0, r))
    }
}
