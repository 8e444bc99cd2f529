use std::collections::HashMap;

use super::{AsmError, AssemblyFunction, Instruction, JumpMnemonics, EXTERNAL_JUMPS_KEY};

const PREFIXES: &[&str] = &[
    "rep", "repe", "repz", "repne", "repnz", "lock", "notrack", "bnd",
];

/// Parse a listing with the default jump mnemonic set.
pub fn parse_disassembly(text: &str) -> Result<AssemblyFunction, AsmError> {
    parse_disassembly_with(text, &JumpMnemonics::default())
}

pub fn parse_disassembly_with(
    text: &str,
    jumps: &JumpMnemonics,
) -> Result<AssemblyFunction, AsmError> {
    let mut name = String::new();
    let mut instructions = Vec::new();
    let mut pending_labels: Vec<String> = Vec::new();
    let mut labels: HashMap<String, u64> = HashMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: &str| AsmError::MalformedLine {
            line: line_no,
            reason: reason.to_string(),
        };
        let Some((head, rest)) = line.split_once(':') else {
            return Err(malformed("expected `<address>: <mnemonic>` or `<label>:`"));
        };
        let head = head.trim();
        let rest = rest.trim();

        if rest.is_empty() {
            if !is_identifier(head) {
                return Err(malformed("label is not an identifier"));
            }
            if instructions.is_empty() && name.is_empty() {
                name = head.to_string();
            }
            pending_labels.push(head.to_string());
            continue;
        }

        let address = parse_hex(head).ok_or_else(|| malformed("bad hexadecimal address"))?;
        if let Some(prev) = instructions.last().map(|i: &Instruction| i.address) {
            if address <= prev {
                return Err(AsmError::NonIncreasingAddress {
                    index: instructions.len(),
                    address,
                });
            }
        }
        let (mnemonic, operands) = split_instruction(rest).map_err(|r| malformed(r))?;
        for label in pending_labels.drain(..) {
            labels.entry(label).or_insert(address);
        }
        instructions.push(Instruction::new(address, mnemonic, operands));
    }

    if instructions.is_empty() {
        return Err(AsmError::EmptyFunction);
    }

    let addresses: Vec<u64> = instructions.iter().map(|i| i.address).collect();
    let mut external = Vec::new();
    for (index, ins) in instructions.iter_mut().enumerate() {
        if !jumps.contains(&ins.mnemonic) {
            continue;
        }
        let Some(op_idx) = ins.jump_operand_index() else {
            continue;
        };
        let operand = strip_distance(&ins.operands[op_idx]);
        let target = match parse_literal_address(operand) {
            Some(addr) => Some(addr),
            None => labels.get(operand).copied(),
        };
        let Some(target) = target else {
            continue;
        };
        if addresses.binary_search(&target).is_ok() {
            ins.operands[op_idx] = format!("{target:#x}");
            ins.jump_target = Some(target);
        } else {
            external.push(format!("{index}:{}", ins.operands[op_idx]));
        }
    }

    let mut f = AssemblyFunction {
        name,
        base_address: addresses[0],
        instructions,
        metadata: Default::default(),
    };
    if !external.is_empty() {
        f.metadata
            .insert(EXTERNAL_JUMPS_KEY.to_string(), external.join(","));
    }
    Ok(f)
}

fn strip_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    for (i, c) in line.char_indices() {
        match (quote, c) {
            (Some(q), c) if c == q => quote = None,
            (None, '"' | '\'') => quote = Some(c),
            (None, ';') => return &line[..i],
            _ => {}
        }
    }
    line
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || "_.$@?".contains(c) => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || "_.$@?".contains(c))
}

fn parse_hex(s: &str) -> Option<u64> {
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

/// Jump operands must carry an explicit `0x` to count as addresses, so that
/// a label such as `abc` is never read as hex.
fn parse_literal_address(s: &str) -> Option<u64> {
    if s.starts_with("0x") || s.starts_with("0X") {
        parse_hex(s)
    } else {
        None
    }
}

fn strip_distance(operand: &str) -> &str {
    for prefix in ["short ", "near ptr ", "near ", "far "] {
        if let Some(rest) = operand.strip_prefix(prefix) {
            return rest.trim();
        }
    }
    operand
}

fn split_instruction(text: &str) -> Result<(String, Vec<String>), &'static str> {
    let mut words = text.splitn(2, char::is_whitespace);
    let mut mnemonic = words.next().unwrap_or_default().to_string();
    let mut rest = words.next().unwrap_or_default().trim_start();
    // Fold instruction prefixes into the mnemonic.
    while PREFIXES.contains(&mnemonic.rsplit(' ').next().unwrap_or_default()) && !rest.is_empty()
    {
        let mut next = rest.splitn(2, char::is_whitespace);
        let word = next.next().unwrap_or_default();
        mnemonic.push(' ');
        mnemonic.push_str(word);
        rest = next.next().unwrap_or_default().trim_start();
    }
    if mnemonic.is_empty() {
        return Err("missing mnemonic");
    }
    let rest = rest.trim();
    if rest.is_empty() {
        return Ok((mnemonic, Vec::new()));
    }
    let operands = split_operands(rest)?;
    Ok((mnemonic, operands))
}

fn split_operands(text: &str) -> Result<Vec<String>, &'static str> {
    let mut operands = Vec::new();
    let mut current = String::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut pending_space = false;
    for c in text.chars() {
        if let Some(q) = quote {
            current.push(c);
            if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => {
                flush_space(&mut current, &mut pending_space);
                quote = Some(c);
                current.push(c);
            }
            '[' | '(' | '{' => {
                flush_space(&mut current, &mut pending_space);
                depth += 1;
                current.push(c);
            }
            ']' | ')' | '}' => {
                flush_space(&mut current, &mut pending_space);
                depth -= 1;
                current.push(c);
            }
            ',' if depth <= 0 => {
                if current.is_empty() {
                    return Err("empty operand");
                }
                operands.push(std::mem::take(&mut current));
                pending_space = false;
            }
            c if c.is_whitespace() => pending_space = !current.is_empty(),
            c => {
                flush_space(&mut current, &mut pending_space);
                current.push(c);
            }
        }
    }
    if quote.is_some() {
        return Err("unterminated quote");
    }
    if current.is_empty() {
        return Err("empty operand");
    }
    operands.push(current);
    Ok(operands)
}

fn flush_space(current: &mut String, pending: &mut bool) {
    if *pending {
        current.push(' ');
        *pending = false;
    }
}
