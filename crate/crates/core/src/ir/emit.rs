use std::fmt::Write;

use super::{Inst, KernelDef, Operand};

fn operand(k: &KernelDef, o: &Operand) -> String {
    match o {
        Operand::Reg(r) => r.to_string(),
        Operand::Imm(v) => v.to_string(),
        Operand::Param(i) => format!("${}", k.params[*i]),
    }
}

fn operands(k: &KernelDef, inst: &Inst) -> Vec<String> {
    match inst {
        Inst::Const { dst, imm } => vec![dst.to_string(), imm.to_string()],
        Inst::Mov { dst, src } => vec![dst.to_string(), operand(k, src)],
        Inst::Bin { dst, a, b, .. } => vec![dst.to_string(), operand(k, a), operand(k, b)],
        Inst::ReadSpecial { dst, reg } => vec![dst.to_string(), reg.to_string()],
        Inst::LoadGlobal { dst, addr } | Inst::LoadShared { dst, addr } => {
            vec![dst.to_string(), operand(k, addr)]
        }
        Inst::StoreGlobal { addr, value } | Inst::StoreShared { addr, value } => {
            vec![operand(k, addr), operand(k, value)]
        }
        Inst::AtomicAddGlobal { dst, addr, value } => {
            vec![dst.to_string(), operand(k, addr), operand(k, value)]
        }
        Inst::BarSync | Inst::Ret => vec![],
        Inst::Branch { cond, target } => vec![cond.to_string(), target.clone()],
        Inst::Jump { target } => vec![target.clone()],
    }
}

/// Renders `k` in the text format accepted by [`super::parse_kernel`].
/// Output is canonical: every header is written, in a fixed order.
pub fn emit_kernel(k: &KernelDef) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "kernel {}", k.name);
    let _ = writeln!(out, "grid {} {} {}", k.grid.x, k.grid.y, k.grid.z);
    let _ = writeln!(out, "block {} {} {}", k.block.x, k.block.y, k.block.z);
    let _ = writeln!(out, "regs {}", k.register_count);
    let _ = writeln!(out, "shared {}", k.shared_words);
    for p in &k.params {
        let _ = writeln!(out, "param {p}");
    }
    if k.inter_block_dependent {
        out.push_str("flag inter_block_dependent\n");
    }
    for stmt in &k.body {
        match &stmt.label {
            Some(l) => {
                let _ = write!(out, "{l}: ");
            }
            None => out.push_str("    "),
        }
        out.push_str(stmt.inst.mnemonic());
        for o in operands(k, &stmt.inst) {
            out.push(' ');
            out.push_str(&o);
        }
        out.push('\n');
    }
    out
}
