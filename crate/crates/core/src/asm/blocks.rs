use std::collections::BTreeSet;

use super::{AssemblyFunction, JumpMnemonics};

/// Leader indices: the first instruction, every internal jump target, and
/// every instruction that follows a jump.
pub fn basic_block_leaders(f: &AssemblyFunction, jumps: &JumpMnemonics) -> BTreeSet<usize> {
    let mut leaders = BTreeSet::new();
    if f.instructions.is_empty() {
        return leaders;
    }
    leaders.insert(0);
    for (i, ins) in f.instructions.iter().enumerate() {
        if let Some(target) = ins.jump_target.and_then(|t| f.index_of(t)) {
            leaders.insert(target);
        }
        if jumps.contains(&ins.mnemonic) && i + 1 < f.instructions.len() {
            leaders.insert(i + 1);
        }
    }
    leaders
}

pub fn count_basic_blocks(f: &AssemblyFunction) -> usize {
    count_basic_blocks_with(f, &JumpMnemonics::default())
}

pub fn count_basic_blocks_with(f: &AssemblyFunction, jumps: &JumpMnemonics) -> usize {
    basic_block_leaders(f, jumps).len()
}

/// Keep functions with at least `min_blocks` basic blocks, preserving order.
pub fn filter_corpus(funcs: Vec<AssemblyFunction>, min_blocks: usize) -> Vec<AssemblyFunction> {
    funcs
        .into_iter()
        .filter(|f| count_basic_blocks(f) >= min_blocks)
        .collect()
}
