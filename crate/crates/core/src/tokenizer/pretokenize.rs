/// A pre-token: either a whitespace-delimited word or a jump symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece<'a> {
    Word(&'a str),
    Jump(usize),
}

/// `INSTR<k>`
pub fn jump_symbol(k: usize) -> String {
    format!("INSTR{k}")
}

pub fn parse_jump_symbol(s: &str) -> Option<usize> {
    let digits = s.strip_prefix("INSTR")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    digits.parse().ok()
}

/// Split text into words. A single space attaches to the word that follows
/// it; a space followed by another space (or the end) is a word on its own.
/// Concatenating the words restores the input exactly.
pub fn words(text: &str) -> Words<'_> {
    Words { text, pos: 0 }
}

pub struct Words<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Iterator for Words<'a> {
    type Item = &'a str;

    fn next(&mut self) -> Option<&'a str> {
        let rest = &self.text[self.pos..];
        if rest.is_empty() {
            return None;
        }
        let bytes = rest.as_bytes();
        let mut end = 0;
        if bytes[0] == b' ' {
            end = 1;
            if bytes.len() == 1 || bytes[1] == b' ' {
                self.pos += 1;
                return Some(&rest[..1]);
            }
        }
        while end < bytes.len() && bytes[end] != b' ' {
            end += 1;
        }
        self.pos += end;
        Some(&rest[..end])
    }
}

/// Words of one instruction line, with `INSTR<k>` words split into their
/// leading space (if any) and a jump piece.
pub fn pretokenize_line(line: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    for word in words(line) {
        let (space, body) = match word.strip_prefix(' ') {
            Some(body) => (&word[..1], body),
            None => ("", word),
        };
        match parse_jump_symbol(body) {
            Some(k) => {
                if !space.is_empty() {
                    out.push(Piece::Word(space));
                }
                out.push(Piece::Jump(k));
            }
            None => out.push(Piece::Word(word)),
        }
    }
    out
}
