use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asm::{
    count_basic_blocks, parse_disassembly, AssemblyFunction, JumpMnemonics, EXTERNAL_JUMPS_KEY,
};

/// Registers the templates treat as free scratch space.
const SCRATCH_FAMILIES: &[[&str; 4]] = &[
    ["rbx", "ebx", "bx", "bl"],
    ["r10", "r10d", "r10w", "r10b"],
    ["r11", "r11d", "r11w", "r11b"],
    ["r12", "r12d", "r12w", "r12b"],
    ["r13", "r13d", "r13w", "r13b"],
    ["r14", "r14d", "r14w", "r14b"],
    ["r15", "r15d", "r15w", "r15b"],
];

const MOVE_LIKE: &[&str] = &["mov", "movzx", "movsx", "movsxd", "lea"];

const SHUFFLE_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub register_rename: bool,
    pub nop_insertion_rate: f64,
    pub independent_reorder: bool,
    pub block_shuffle: bool,
    /// Mixed into the seed of every perturbation drawn with this config.
    pub variant_seed: u64,
}

impl PerturbationConfig {
    pub fn none() -> Self {
        Self {
            register_rename: false,
            nop_insertion_rate: 0.0,
            independent_reorder: false,
            block_shuffle: false,
            variant_seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.register_rename
            && self.nop_insertion_rate <= 0.0
            && !self.independent_reorder
            && !self.block_shuffle
    }
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            register_rename: true,
            nop_insertion_rate: 0.05,
            independent_reorder: true,
            block_shuffle: true,
            variant_seed: 0,
        }
    }
}

/// An instruction with its jump target held as a line index.
#[derive(Debug, Clone, PartialEq)]
struct Line {
    mnemonic: String,
    operands: Vec<String>,
    target: Option<usize>,
}

fn to_lines(f: &AssemblyFunction) -> Vec<Line> {
    f.instructions
        .iter()
        .map(|ins| Line {
            mnemonic: ins.mnemonic.clone(),
            operands: ins.operands.clone(),
            target: ins.jump_target.and_then(|t| f.index_of(t)),
        })
        .collect()
}

/// Rough x86-64 encoding length, so re-addressed listings look plausible.
fn encoded_len(line: &Line) -> u64 {
    if line.operands.is_empty() {
        return 1;
    }
    if line.target.is_some() {
        return 2;
    }
    let mut n = 2;
    for op in &line.operands {
        if op.contains('[') {
            n += if op.contains('+') || op.contains('-') { 3 } else { 2 };
        } else if op.starts_with(|c: char| c.is_ascii_digit() || c == '-') {
            n += if op.len() > 3 { 4 } else { 1 };
        } else if op.starts_with('r') && op[1..].starts_with(|c: char| c.is_ascii_digit()) {
            n += 1;
        }
    }
    n.min(15)
}

/// Assign addresses from `base` and rebuild a validated function.
fn from_lines(lines: &[Line], base: u64, template: &AssemblyFunction) -> AssemblyFunction {
    let mut addresses = Vec::with_capacity(lines.len());
    let mut at = base;
    for line in lines {
        addresses.push(at);
        at += encoded_len(line);
    }
    let mut listing = String::new();
    if !template.name.is_empty() {
        let _ = writeln!(listing, "{}:", template.name);
    }
    for (line, addr) in lines.iter().zip(&addresses) {
        let mut operands = line.operands.clone();
        if let (Some(t), Some(last)) = (line.target, operands.last_mut()) {
            *last = format!("{:#x}", addresses[t]);
        }
        let _ = write!(listing, "{addr:#x}: {}", line.mnemonic);
        if !operands.is_empty() {
            let _ = write!(listing, " {}", operands.join(", "));
        }
        listing.push('\n');
    }
    let mut f = parse_disassembly(&listing).expect("re-addressed listing parses");
    f.name = template.name.clone();
    for (k, v) in &template.metadata {
        if k != EXTERNAL_JUMPS_KEY {
            f.metadata.insert(k.clone(), v.clone());
        }
    }
    f
}

/// Same instructions, addresses recomputed from the function's base.
pub(crate) fn readdress(f: &AssemblyFunction) -> AssemblyFunction {
    readdress_at(f, f.base_address)
}

pub(crate) fn readdress_at(f: &AssemblyFunction, base: u64) -> AssemblyFunction {
    from_lines(&to_lines(f), base, f)
}

/// Apply the enabled perturbations to a valid function.
///
/// Order: register rename, independent reorder, block shuffle, nop
/// insertion. Every step keeps jumps pointing at the same logical
/// instruction and leaves the basic-block count unchanged.
pub fn perturb(f: &AssemblyFunction, config: &PerturbationConfig, seed: u64) -> AssemblyFunction {
    if config.is_identity() || f.is_empty() {
        return f.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ config.variant_seed.rotate_left(32));
    let mut lines = to_lines(f);
    if config.register_rename {
        rename_registers(&mut lines, &mut rng);
    }
    if config.independent_reorder {
        reorder_independent(&mut lines, &mut rng);
    }
    if config.block_shuffle {
        let blocks = count_basic_blocks(f);
        for _ in 0..SHUFFLE_ATTEMPTS {
            let candidate = shuffle_blocks(&lines, &mut rng);
            if count_basic_blocks(&from_lines(&candidate, f.base_address, f)) == blocks {
                lines = candidate;
                break;
            }
        }
    }
    if config.nop_insertion_rate > 0.0 {
        lines = insert_nops(&lines, config.nop_insertion_rate.min(1.0), &mut rng);
    }
    from_lines(&lines, f.base_address, f)
}

fn rename_registers(lines: &mut [Line], rng: &mut ChaCha8Rng) {
    let mut perm: Vec<usize> = (0..SCRATCH_FAMILIES.len()).collect();
    perm.shuffle(rng);
    let mut map = HashMap::new();
    for (from, &to) in perm.iter().enumerate() {
        for size in 0..4 {
            map.insert(SCRATCH_FAMILIES[from][size], SCRATCH_FAMILIES[to][size]);
        }
    }
    for line in lines {
        for op in &mut line.operands {
            *op = replace_words(op, |w| map.get(w).copied());
        }
    }
}

fn replace_words<'a>(s: &str, mut f: impl FnMut(&str) -> Option<&'a str>) -> String {
    let mut out = String::with_capacity(s.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String, f: &mut dyn FnMut(&str) -> Option<&'a str>| {
        if !word.is_empty() {
            let w = word.as_str();
            out.push_str(f(w).unwrap_or(w));
            word.clear();
        }
    };
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || c == '_' {
            word.push(c);
        } else {
            flush(&mut word, &mut out, &mut f);
            out.push(c);
        }
    }
    flush(&mut word, &mut out, &mut f);
    out
}

/// Architectural register behind a register name, if it is one.
fn register_family(word: &str) -> Option<String> {
    let legacy = [
        ("a", ["rax", "eax", "ax", "al"]),
        ("b", ["rbx", "ebx", "bx", "bl"]),
        ("c", ["rcx", "ecx", "cx", "cl"]),
        ("d", ["rdx", "edx", "dx", "dl"]),
        ("si", ["rsi", "esi", "si", "sil"]),
        ("di", ["rdi", "edi", "di", "dil"]),
        ("bp", ["rbp", "ebp", "bp", "bpl"]),
        ("sp", ["rsp", "esp", "sp", "spl"]),
    ];
    for (fam, names) in legacy {
        if names.contains(&word) {
            return Some(fam.to_string());
        }
    }
    if matches!(word, "ah" | "bh" | "ch" | "dh") {
        return Some(word[..1].to_string());
    }
    let rest = word.strip_prefix('r')?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    let n: u32 = digits.parse().ok()?;
    let suffix = &rest[digits.len()..];
    ((8..=15).contains(&n) && matches!(suffix, "" | "d" | "w" | "b")).then(|| format!("r{n}"))
}

fn registers_of(line: &Line) -> BTreeSet<String> {
    let mut regs = BTreeSet::new();
    for op in &line.operands {
        replace_words(op, |w| {
            if let Some(f) = register_family(w) {
                regs.insert(f);
            }
            None
        });
    }
    regs
}

fn is_movable(line: &Line) -> bool {
    MOVE_LIKE.contains(&line.mnemonic.as_str())
        && line.target.is_none()
        && line.operands.first().is_some_and(|d| !d.contains('['))
}

/// Swap adjacent data moves that share no register, never moving an
/// instruction that a jump lands on.
fn reorder_independent(lines: &mut [Line], rng: &mut ChaCha8Rng) {
    let targets: BTreeSet<usize> = lines.iter().filter_map(|l| l.target).collect();
    let mut i = 0;
    while i + 1 < lines.len() {
        let (a, b) = (&lines[i], &lines[i + 1]);
        let eligible = is_movable(a)
            && is_movable(b)
            && !targets.contains(&(i + 1))
            && !targets.contains(&i)
            && registers_of(a).is_disjoint(&registers_of(b));
        if eligible && rng.random_bool(0.5) {
            lines.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
}

/// Permute every block but the entry one, adding `jmp` where a
/// fall-through successor is no longer adjacent.
fn shuffle_blocks(lines: &[Line], rng: &mut ChaCha8Rng) -> Vec<Line> {
    let jumps = JumpMnemonics::default();
    let mut leaders = BTreeSet::from([0]);
    for (i, line) in lines.iter().enumerate() {
        if let Some(t) = line.target {
            leaders.insert(t);
        }
        if jumps.contains(&line.mnemonic) && i + 1 < lines.len() {
            leaders.insert(i + 1);
        }
    }
    let starts: Vec<usize> = leaders.into_iter().collect();
    if starts.len() < 3 {
        return lines.to_vec();
    }
    let ranges: Vec<(usize, usize)> = starts
        .iter()
        .enumerate()
        .map(|(b, &s)| (s, starts.get(b + 1).copied().unwrap_or(lines.len())))
        .collect();
    let mut order: Vec<usize> = (1..ranges.len()).collect();
    // Prefer an order that differs from the original one.
    for _ in 0..4 {
        order.shuffle(rng);
        if order.windows(2).any(|w| w[0] > w[1]) {
            break;
        }
    }
    order.insert(0, 0);

    // Old line index -> new line index, plus appended jumps naming old indices.
    let mut out: Vec<Line> = Vec::with_capacity(lines.len() + ranges.len());
    let mut remap = vec![0usize; lines.len()];
    let mut pending: Vec<(usize, usize)> = Vec::new();
    for (pos, &b) in order.iter().enumerate() {
        let (s, e) = ranges[b];
        for (old, line) in lines.iter().enumerate().take(e).skip(s) {
            remap[old] = out.len();
            out.push(line.clone());
        }
        let last = &lines[e - 1];
        let falls_through = !JumpMnemonics::is_unconditional(&last.mnemonic)
            && !is_terminator(&last.mnemonic)
            && b + 1 < ranges.len();
        let next = order.get(pos + 1).copied();
        if falls_through && next != Some(b + 1) {
            pending.push((out.len(), ranges[b + 1].0));
            out.push(Line {
                mnemonic: "jmp".into(),
                operands: vec![String::new()],
                target: None,
            });
        }
    }
    let appended: BTreeSet<usize> = pending.iter().map(|p| p.0).collect();
    for (i, line) in out.iter_mut().enumerate() {
        if !appended.contains(&i) {
            line.target = line.target.map(|t| remap[t]);
        }
    }
    for (at, old_target) in pending {
        out[at].target = Some(remap[old_target]);
    }
    out
}

fn is_terminator(mnemonic: &str) -> bool {
    matches!(mnemonic, "ret" | "retn" | "hlt" | "ud2")
}

/// Insert `nop`s before instructions; a jump to an instruction lands on the
/// first nop in front of it so no new block appears.
fn insert_nops(lines: &[Line], rate: f64, rng: &mut ChaCha8Rng) -> Vec<Line> {
    let mut out = Vec::with_capacity(lines.len());
    let mut remap = Vec::with_capacity(lines.len());
    for line in lines {
        remap.push(out.len());
        if rng.random_bool(rate) {
            out.push(Line {
                mnemonic: "nop".into(),
                operands: Vec::new(),
                target: None,
            });
        }
        out.push(line.clone());
    }
    for line in &mut out {
        line.target = line.target.map(|t| remap[t]);
    }
    out
}

#[cfg(test)]
pub(crate) fn registers_in(f: &AssemblyFunction) -> BTreeSet<String> {
    to_lines(f).iter().flat_map(registers_of).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families() {
        assert_eq!(register_family("r10d").as_deref(), Some("r10"));
        assert_eq!(register_family("sil").as_deref(), Some("si"));
        assert_eq!(register_family("ah").as_deref(), Some("a"));
        assert_eq!(register_family("r16"), None);
        assert_eq!(register_family("dword"), None);
        assert_eq!(register_family("ptr"), None);
    }

    #[test]
    fn whole_word_replacement() {
        let s = replace_words("dword ptr [rdi+r10*4+0x10]", |w| (w == "r10").then_some("r13"));
        assert_eq!(s, "dword ptr [rdi+r13*4+0x10]");
        let s = replace_words("r10d", |w| (w == "r10").then_some("r13"));
        assert_eq!(s, "r10d");
    }
}
