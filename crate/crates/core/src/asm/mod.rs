//! Disassembled functions and the canonical text listing they are read from.
//!
//! The listing format is one instruction per line:
//!
//! ```text
//! bubble_sort:
//! 0x401000: mov ecx, esi
//! 0x401002: jmp 0x401010
//! ```
//!
//! Addresses are hexadecimal (an optional `0x` prefix is accepted on input,
//! output always uses lowercase `0x`). Operands are comma separated. A line
//! holding only `identifier:` is a label; the first label before any
//! instruction names the function, and any label may be used as a jump
//! operand. Text after `;` (outside quotes) is a comment.

mod blocks;
mod corpus;
mod parse;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blocks::{basic_block_leaders, count_basic_blocks, count_basic_blocks_with, filter_corpus};
pub use corpus::{read_corpus, write_corpus, CorpusError, CorpusRecord};
pub use parse::{parse_disassembly, parse_disassembly_with};

/// Metadata key listing jumps whose numeric target lies outside the function.
pub const EXTERNAL_JUMPS_KEY: &str = "external_jumps";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("function has no instructions")]
    EmptyFunction,
    #[error("instruction {index}: address {address:#x} does not increase")]
    NonIncreasingAddress { index: usize, address: u64 },
    #[error("instruction {index}: empty mnemonic")]
    EmptyMnemonic { index: usize },
    #[error("instruction {index}: jump target {target:#x} is not an instruction address")]
    DanglingJumpTarget { index: usize, target: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: u64,
    pub mnemonic: String,
    pub operands: Vec<String>,
    /// Resolved address of an internal jump target.
    pub jump_target: Option<u64>,
}

impl Instruction {
    pub fn new(address: u64, mnemonic: impl Into<String>, operands: Vec<String>) -> Self {
        Self {
            address,
            mnemonic: mnemonic.into(),
            operands,
            jump_target: None,
        }
    }

    /// `mnemonic op1, op2` with canonical spacing.
    pub fn text(&self) -> String {
        let mut out = self.mnemonic.clone();
        if !self.operands.is_empty() {
            out.push(' ');
            out.push_str(&self.operands.join(", "));
        }
        out
    }

    /// Index of the operand holding the jump target: the last one.
    pub fn jump_operand_index(&self) -> Option<usize> {
        self.operands.len().checked_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AssemblyFunction {
    pub name: String,
    pub base_address: u64,
    pub instructions: Vec<Instruction>,
    pub metadata: BTreeMap<String, String>,
}

impl AssemblyFunction {
    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Index of the instruction at `address`, if any.
    pub fn index_of(&self, address: u64) -> Option<usize> {
        self.instructions
            .binary_search_by_key(&address, |ins| ins.address)
            .ok()
    }

    pub fn validate(&self) -> Result<(), AsmError> {
        if self.instructions.is_empty() {
            return Err(AsmError::EmptyFunction);
        }
        for (index, ins) in self.instructions.iter().enumerate() {
            if ins.mnemonic.is_empty() {
                return Err(AsmError::EmptyMnemonic { index });
            }
            if index > 0 && ins.address <= self.instructions[index - 1].address {
                return Err(AsmError::NonIncreasingAddress {
                    index,
                    address: ins.address,
                });
            }
        }
        for (index, ins) in self.instructions.iter().enumerate() {
            if let Some(target) = ins.jump_target {
                if self.index_of(target).is_none() {
                    return Err(AsmError::DanglingJumpTarget { index, target });
                }
            }
        }
        Ok(())
    }

    /// Canonical listing with addresses; parses back to an equal function.
    pub fn to_listing(&self) -> String {
        let mut out = String::new();
        // Only identifier names survive a re-parse.
        if parse::is_identifier(&self.name) {
            let _ = writeln!(out, "{}:", self.name);
        }
        for ins in &self.instructions {
            let _ = writeln!(out, "{:#x}: {}", ins.address, ins.text());
        }
        out
    }

    /// Instruction lines without addresses, joined by newlines.
    ///
    /// For a rebased function this is the text the tokenizer round-trips.
    pub fn body_text(&self) -> String {
        self.instructions
            .iter()
            .map(Instruction::text)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Mnemonics treated as control-flow jumps. Calls are deliberately absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JumpMnemonics {
    set: HashSet<String>,
}

impl JumpMnemonics {
    pub fn new<I, S>(mnemonics: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            set: mnemonics
                .into_iter()
                .map(|m| m.as_ref().to_ascii_lowercase())
                .collect(),
        }
    }

    /// Whether `mnemonic` is a jump. Prefixes such as `bnd jmp` are looked
    /// through by checking the last word.
    pub fn contains(&self, mnemonic: &str) -> bool {
        let last = mnemonic.rsplit(' ').next().unwrap_or(mnemonic);
        self.set.contains(&last.to_ascii_lowercase())
    }

    pub fn is_unconditional(mnemonic: &str) -> bool {
        mnemonic
            .rsplit(' ')
            .next()
            .is_some_and(|m| m.eq_ignore_ascii_case("jmp"))
    }
}

impl Default for JumpMnemonics {
    fn default() -> Self {
        Self::new([
            "jmp", "je", "jne", "jz", "jnz", "jl", "jle", "jg", "jge", "ja", "jae", "jb", "jbe",
            "js", "jns", "jo", "jno", "jp", "jnp", "jc", "jnc",
        ])
    }
}
