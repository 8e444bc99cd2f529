use super::jump_symbol;
use crate::asm::AssemblyFunction;

/// Replace addresses with instruction indices and internal jump operands
/// with `INSTR<k>`, where `k` is the target's index. External jump
/// operands keep their literal text. Idempotent.
pub fn rebase(f: &AssemblyFunction) -> AssemblyFunction {
    let mut out = f.clone();
    out.base_address = 0;
    for (index, ins) in out.instructions.iter_mut().enumerate() {
        ins.address = index as u64;
        let Some(target) = ins.jump_target else {
            continue;
        };
        match f.index_of(target) {
            Some(k) => {
                ins.jump_target = Some(k as u64);
                if let Some(op) = ins.operands.last_mut() {
                    *op = jump_symbol(k);
                }
            }
            None => ins.jump_target = None,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_disassembly;

    const BODY: &[(&str, &str)] = &[
        ("push", "rbx"),
        ("xor", "eax, eax"),
        ("cmp", "eax, edi"),
        ("jge", "@2"),
        ("jmp", "@0"),
    ];

    fn at_base(base: u64) -> AssemblyFunction {
        let addrs: Vec<u64> = (0..BODY.len() as u64).map(|i| base + i * 3).collect();
        let text: String = BODY
            .iter()
            .zip(&addrs)
            .map(|((m, ops), a)| {
                let ops = match ops.strip_prefix('@') {
                    Some(idx) => format!("{:#x}", addrs[idx.parse::<usize>().unwrap()]),
                    None => ops.to_string(),
                };
                format!("{a:#x}: {m} {ops}\n")
            })
            .collect();
        parse_disassembly(&text).unwrap()
    }

    #[test]
    fn translation_invariant() {
        assert_eq!(rebase(&at_base(0x401000)), rebase(&at_base(0x500000)));
    }

    #[test]
    fn jump_to_entry_and_third() {
        let r = rebase(&at_base(0x401000));
        assert_eq!(r.instructions[4].operands, vec!["INSTR0"]);
        assert_eq!(r.instructions[3].operands, vec!["INSTR2"]);
        assert_eq!(r.instructions[3].jump_target, Some(2));
        assert_eq!(r.instructions[4].address, 4);
        assert_eq!(r.base_address, 0);
    }

    #[test]
    fn idempotent() {
        let once = rebase(&at_base(0x1234));
        assert_eq!(rebase(&once), once);
    }

    #[test]
    fn external_operand_kept() {
        let f = parse_disassembly("0x10: je 0x9999\n0x12: ret").unwrap();
        let r = rebase(&f);
        assert_eq!(r.instructions[0].operands, vec!["0x9999"]);
        assert_eq!(r.instructions[0].jump_target, None);
    }
}
