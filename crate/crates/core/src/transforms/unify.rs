use super::LabelPool;
use crate::ir::{Axis, BinOp, Inst, KernelDef, Operand, Reg, SpecialKind, SpecialReg, Stmt, Word};

/// Label stem of the unified synchronization block.
pub const USYNC_ENTRY: &str = "usync_entry";

/// Rewrites `k` so that every barrier and every return goes through one
/// synchronization block `U`:
///
/// * `BAR_SYNC` at site s becomes `CONST resume s; JUMP U`;
/// * `RET` becomes "mark returned in shared memory; JUMP U".
///
/// `U` waits on a block barrier, counts returned threads, and waits again so
/// every thread sees the same count. When all threads have returned they all
/// `RET` together; otherwise returned threads go back to `U` and the others
/// resume after their barrier.
pub fn unify_synchronization(k: &KernelDef) -> KernelDef {
    let nthreads = k.block.total() as Word;
    let rc = k.register_count;
    let resume = Reg(rc);
    let returned = Reg(rc + 1);
    let tid = Reg(rc + 2);
    let idx = Reg(rc + 3);
    let acc = Reg(rc + 4);
    let t = Reg(rc + 5);
    let flags_base = k.shared_words as Word;

    let mut labels = LabelPool::new(k);
    let entry = labels.fresh(USYNC_ENTRY);
    let scan = labels.fresh("usync_scan");
    let scan_body = labels.fresh("usync_scan_body");
    let done = labels.fresh("usync_done");
    let exit = labels.fresh("usync_exit");

    // resume targets: the statement after each barrier
    let mut body = k.body.clone();
    let mut sites: Vec<String> = Vec::new();
    for i in 0..body.len() {
        if body[i].inst == Inst::BarSync {
            let next = &mut body[i + 1];
            let label = match &next.label {
                Some(l) => l.clone(),
                None => {
                    let l = labels.fresh(&format!("usync_resume{}", sites.len() + 1));
                    next.label = Some(l.clone());
                    l
                }
            };
            sites.push(label);
        }
    }

    let mut out: Vec<Stmt> = Vec::with_capacity(body.len() * 2 + 24);
    // prologue: linear thread id
    let b = k.block;
    let special = |dst, axis| Inst::ReadSpecial {
        dst,
        reg: SpecialReg {
            kind: SpecialKind::ThreadIdx,
            axis,
        },
    };
    out.push(special(tid, Axis::Z).into());
    out.push(
        Inst::Bin {
            op: BinOp::Mul,
            dst: tid,
            a: Operand::Reg(tid),
            b: Operand::Imm(b.y as Word),
        }
        .into(),
    );
    out.push(special(t, Axis::Y).into());
    out.push(add(tid, Operand::Reg(tid), Operand::Reg(t)));
    out.push(
        Inst::Bin {
            op: BinOp::Mul,
            dst: tid,
            a: Operand::Reg(tid),
            b: Operand::Imm(b.x as Word),
        }
        .into(),
    );
    out.push(special(t, Axis::X).into());
    out.push(add(tid, Operand::Reg(tid), Operand::Reg(t)));

    let mut site = 0;
    for stmt in body {
        match stmt.inst {
            Inst::BarSync => {
                site += 1;
                out.push(Stmt {
                    label: stmt.label,
                    inst: Inst::Const {
                        dst: resume,
                        imm: site,
                    },
                });
                out.push(Inst::Jump { target: entry.clone() }.into());
            }
            Inst::Ret => {
                out.push(Stmt {
                    label: stmt.label,
                    inst: Inst::Const {
                        dst: returned,
                        imm: 1,
                    },
                });
                out.push(add(t, Operand::Reg(tid), Operand::Imm(flags_base)));
                out.push(
                    Inst::StoreShared {
                        addr: Operand::Reg(t),
                        value: Operand::Imm(1),
                    }
                    .into(),
                );
                out.push(Inst::Jump { target: entry.clone() }.into());
            }
            _ => out.push(stmt),
        }
    }

    out.push(Stmt::labeled(entry.clone(), Inst::BarSync));
    out.push(Inst::Const { dst: idx, imm: 0 }.into());
    out.push(Inst::Const { dst: acc, imm: 0 }.into());
    out.push(Stmt::labeled(
        scan.clone(),
        Inst::Bin {
            op: BinOp::CmpLt,
            dst: t,
            a: Operand::Reg(idx),
            b: Operand::Imm(nthreads),
        },
    ));
    out.push(
        Inst::Branch {
            cond: t,
            target: scan_body.clone(),
        }
        .into(),
    );
    out.push(Inst::Jump { target: done.clone() }.into());
    out.push(Stmt {
        label: Some(scan_body),
        ..add(t, Operand::Reg(idx), Operand::Imm(flags_base))
    });
    out.push(
        Inst::LoadShared {
            dst: t,
            addr: Operand::Reg(t),
        }
        .into(),
    );
    out.push(add(acc, Operand::Reg(acc), Operand::Reg(t)));
    out.push(add(idx, Operand::Reg(idx), Operand::Imm(1)));
    out.push(Inst::Jump { target: scan }.into());
    out.push(Stmt::labeled(done, Inst::BarSync));
    out.push(
        Inst::Bin {
            op: BinOp::CmpEq,
            dst: t,
            a: Operand::Reg(acc),
            b: Operand::Imm(nthreads),
        }
        .into(),
    );
    out.push(
        Inst::Branch {
            cond: t,
            target: exit.clone(),
        }
        .into(),
    );
    out.push(
        Inst::Branch {
            cond: returned,
            target: entry.clone(),
        }
        .into(),
    );
    for (i, target) in sites.into_iter().enumerate() {
        out.push(
            Inst::Bin {
                op: BinOp::CmpEq,
                dst: t,
                a: Operand::Reg(resume),
                b: Operand::Imm(i as Word + 1),
            }
            .into(),
        );
        out.push(Inst::Branch { cond: t, target }.into());
    }
    out.push(Inst::Jump { target: entry }.into());
    out.push(Stmt::labeled(exit, Inst::Ret));

    let result = KernelDef {
        register_count: rc + 6,
        shared_words: k.shared_words + nthreads as u32,
        body: out,
        ..k.clone()
    };
    debug_assert_eq!(result.validate(), Ok(()));
    result
}

fn add(dst: Reg, a: Operand, b: Operand) -> Stmt {
    Inst::Bin {
        op: BinOp::Add,
        dst,
        a,
        b,
    }
    .into()
}

/// Structural check used by the preemption pass: the kernel contains a
/// unified synchronization block and no `RET` precedes it.
pub fn is_unified(k: &KernelDef) -> bool {
    let Some(entry) = k
        .body
        .iter()
        .position(|s| s.label.as_deref().is_some_and(|l| l.starts_with(USYNC_ENTRY)))
    else {
        return false;
    };
    !k.body[..entry].iter().any(|s| s.inst == Inst::Ret)
}
