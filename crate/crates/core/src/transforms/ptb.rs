use serde::{Deserialize, Serialize};

use super::{append_params, is_unified, refuse_dependent, LabelPool, TransformError};
use crate::ir::{
    Axis, BinOp, Dim3, Inst, KernelDef, Operand, Reg, SpecialKind, SpecialReg, Stmt, Word,
};

const PTB_PARAMS: [&str; 6] = [
    "ptb_counter",
    "ptb_flag",
    "ptb_total",
    "ptb_grid_x",
    "ptb_grid_y",
    "ptb_grid_z",
];

/// Launch-time control block of a persistent-thread-block kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtbControl {
    /// Global word holding the next task index. Zero for a fresh start, the
    /// saved value on resume.
    pub task_counter_addr: usize,
    /// Global word checked by workers at the start of every iteration.
    pub preempt_flag_addr: usize,
    pub total_blocks: u64,
    pub original_grid: Dim3,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PtbKernelDef {
    /// Worker-loop kernel; its grid is `worker_grid`.
    pub kernel: KernelDef,
    pub worker_grid: Dim3,
    pub original_grid: Dim3,
}

impl PtbKernelDef {
    pub fn control(&self, task_counter_addr: usize, preempt_flag_addr: usize) -> PtbControl {
        PtbControl {
            task_counter_addr,
            preempt_flag_addr,
            total_blocks: self.original_grid.total(),
            original_grid: self.original_grid,
        }
    }

    /// Original arguments followed by the control-block parameters.
    pub fn args(&self, original_args: &[Word], control: &PtbControl) -> Vec<Word> {
        let g = control.original_grid;
        let mut args = original_args.to_vec();
        args.extend([
            control.task_counter_addr as Word,
            control.preempt_flag_addr as Word,
            control.total_blocks as Word,
            g.x as Word,
            g.y as Word,
            g.z as Word,
        ]);
        args
    }
}

/// Converts a kernel that has already been through
/// [`super::unify_synchronization`] into its preemptible worker-loop form.
pub fn make_preemptible(k: &KernelDef, worker_grid: Dim3) -> Result<PtbKernelDef, TransformError> {
    refuse_dependent(k)?;
    if !is_unified(k) {
        return Err(TransformError::Precondition(format!(
            "kernel `{}` contains a RET outside a unified synchronization block; \
             apply unify-sync first",
            k.name
        )));
    }
    make_preemptible_unchecked(k, worker_grid)
}

/// Same rewrite as [`make_preemptible`] without the unified-synchronization
/// check. Applied to a kernel with early returns and barriers, the result can
/// deadlock; it exists to demonstrate exactly that.
pub fn make_preemptible_unchecked(
    k: &KernelDef,
    worker_grid: Dim3,
) -> Result<PtbKernelDef, TransformError> {
    refuse_dependent(k)?;
    if !worker_grid.is_valid_extent() {
        return Err(TransformError::Precondition("worker grid must be non-empty".into()));
    }
    let mut out = k.clone();
    append_params(&mut out, &PTB_PARAMS)?;
    let p = k.params.len();
    let (counter, flag, total) = (Operand::Param(p), Operand::Param(p + 1), Operand::Param(p + 2));
    let grid_param = |a: Axis| Operand::Param(p + 3 + Axis::ALL.iter().position(|x| *x == a).unwrap());

    let rc = k.register_count;
    let task = Reg(rc);
    let t = Reg(rc + 1);
    let i = Reg(rc + 2);
    let bidx = [Reg(rc + 3), Reg(rc + 4), Reg(rc + 5)];
    let slot = k.shared_words as Word;

    let mut labels = LabelPool::new(k);
    let top = labels.fresh("ptb_loop");
    let zero = labels.fresh("ptb_zero");
    let zero_body = labels.fresh("ptb_zero_body");
    let fetch = labels.fresh("ptb_fetch");
    let publish = labels.fresh("ptb_publish");
    let wait = labels.fresh("ptb_wait");
    let run = labels.fresh("ptb_run");
    let end = labels.fresh("ptb_iter_end");
    let exit = labels.fresh("ptb_exit");

    let bin = |op, dst, a, b| Stmt::new(Inst::Bin { op, dst, a, b });
    let special = |dst, kind, axis| {
        Stmt::new(Inst::ReadSpecial {
            dst,
            reg: SpecialReg { kind, axis },
        })
    };
    let jump = |target: &String| Stmt::new(Inst::Jump { target: target.clone() });
    let branch = |cond, target: &String| {
        Stmt::new(Inst::Branch {
            cond,
            target: target.clone(),
        })
    };

    let mut body = Vec::with_capacity(k.body.len() + 40 + rc as usize);
    // Iteration start: only thread (0,0,0) touches the control block.
    body.push(Stmt {
        label: Some(top.clone()),
        ..special(t, SpecialKind::ThreadIdx, Axis::X)
    });
    body.push(special(task, SpecialKind::ThreadIdx, Axis::Y));
    body.push(bin(BinOp::Add, t, Operand::Reg(t), Operand::Reg(task)));
    body.push(special(task, SpecialKind::ThreadIdx, Axis::Z));
    body.push(bin(BinOp::Add, t, Operand::Reg(t), Operand::Reg(task)));
    body.push(branch(t, &wait));
    // fresh shared memory for the next original block
    body.push(Stmt::new(Inst::Const { dst: i, imm: 0 }));
    body.push(Stmt {
        label: Some(zero.clone()),
        ..bin(BinOp::CmpLt, t, Operand::Reg(i), Operand::Imm(slot))
    });
    body.push(branch(t, &zero_body));
    body.push(jump(&fetch));
    body.push(Stmt::labeled(
        zero_body,
        Inst::StoreShared {
            addr: Operand::Reg(i),
            value: Operand::Imm(0),
        },
    ));
    body.push(bin(BinOp::Add, i, Operand::Reg(i), Operand::Imm(1)));
    body.push(jump(&zero));
    // flag first, then fetch: a raised flag never consumes a task index
    body.push(Stmt::labeled(fetch, Inst::LoadGlobal { dst: t, addr: flag }));
    body.push(Stmt::new(Inst::Const { dst: task, imm: -1 }));
    body.push(branch(t, &publish));
    body.push(Stmt::new(Inst::AtomicAddGlobal {
        dst: task,
        addr: counter,
        value: Operand::Imm(1),
    }));
    body.push(Stmt::labeled(
        publish,
        Inst::StoreShared {
            addr: Operand::Imm(slot),
            value: Operand::Reg(task),
        },
    ));
    body.push(Stmt::labeled(wait, Inst::BarSync));
    body.push(Stmt::new(Inst::LoadShared {
        dst: task,
        addr: Operand::Imm(slot),
    }));
    body.push(bin(BinOp::CmpLt, t, Operand::Reg(task), Operand::Imm(0)));
    body.push(branch(t, &exit));
    body.push(bin(BinOp::CmpLt, t, Operand::Reg(task), total));
    body.push(branch(t, &run));
    body.push(jump(&exit));
    // fresh registers, then blockIdx = delinearize(task, original grid)
    let mut first = true;
    for r in 0..rc {
        let mut s = Stmt::new(Inst::Const { dst: Reg(r), imm: 0 });
        if first {
            s.label = Some(run.clone());
            first = false;
        }
        body.push(s);
    }
    let gx = grid_param(Axis::X);
    let gy = grid_param(Axis::Y);
    let mut s = bin(BinOp::Mod, bidx[0], Operand::Reg(task), gx);
    if first {
        s.label = Some(run.clone());
    }
    body.push(s);
    body.push(bin(BinOp::Div, bidx[1], Operand::Reg(task), gx));
    body.push(bin(BinOp::Div, bidx[2], Operand::Reg(bidx[1]), gy));
    body.push(bin(BinOp::Mod, bidx[1], Operand::Reg(bidx[1]), gy));

    for stmt in &k.body {
        let inst = match &stmt.inst {
            Inst::ReadSpecial { dst, reg } if reg.kind == SpecialKind::BlockIdx => Inst::Mov {
                dst: *dst,
                src: Operand::Reg(bidx[Axis::ALL.iter().position(|a| *a == reg.axis).unwrap()]),
            },
            Inst::ReadSpecial { dst, reg } if reg.kind == SpecialKind::GridDim => Inst::Mov {
                dst: *dst,
                src: grid_param(reg.axis),
            },
            Inst::Ret => Inst::Jump { target: end.clone() },
            other => other.clone(),
        };
        body.push(Stmt {
            label: stmt.label.clone(),
            inst,
        });
    }
    body.push(Stmt::labeled(end, Inst::BarSync));
    body.push(jump(&top));
    body.push(Stmt::labeled(exit, Inst::Ret));

    out.grid = worker_grid;
    out.register_count = rc + 6;
    out.shared_words = k.shared_words + 1;
    out.body = body;
    out.validate()?;
    Ok(PtbKernelDef {
        kernel: out,
        worker_grid,
        original_grid: k.grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{interpret, interpret_with, parse_kernel, ExecStatus, InterpOptions, LaunchSpec, StoreTrigger};
    use crate::transforms::unify_synchronization;

    fn sixteen() -> KernelDef {
        parse_kernel(
            "kernel k\ngrid 16 1 1\nblock 2 1 1\nregs 3\nparam out\n    READ_SPECIAL r0 blockIdx.x\n    READ_SPECIAL r1 threadIdx.x\n    MUL r2 r0 2\n    ADD r2 r2 r1\n    ADD r2 r2 $out\n    ADD r0 r0 100\n    STORE_GLOBAL r2 r0\n    RET\n",
        )
        .unwrap()
    }

    #[test]
    fn rejects_non_unified() {
        assert!(matches!(
            make_preemptible(&sixteen(), Dim3::linear(2)),
            Err(TransformError::Precondition(_))
        ));
    }

    #[test]
    fn two_workers_drain_all_tasks() {
        let k = sixteen();
        let ptb = make_preemptible(&unify_synchronization(&k), Dim3::linear(2)).unwrap();
        let ctl = ptb.control(32, 33);
        let launch = LaunchSpec {
            kernel: &ptb.kernel,
            args: ptb.args(&[0], &ctl),
            global_memory: vec![0; 34],
        };
        let res = interpret(&launch, 5, 1_000_000);
        assert_eq!(res.status, ExecStatus::Completed);
        let mem = res.final_memory.unwrap();
        let want: Vec<Word> = (0..32).map(|i| 100 + i / 2).collect();
        assert_eq!(&mem[..32], &want[..]);
        // each worker over-fetches once after the last task
        assert_eq!(mem[32], 18);
    }

    #[test]
    fn flag_before_launch_leaves_memory_untouched() {
        let ptb = make_preemptible(&unify_synchronization(&sixteen()), Dim3::linear(2)).unwrap();
        let ctl = ptb.control(32, 33);
        let mut mem = vec![0; 34];
        mem[33] = 1;
        let launch = LaunchSpec {
            kernel: &ptb.kernel,
            args: ptb.args(&[0], &ctl),
            global_memory: mem.clone(),
        };
        let res = interpret(&launch, 0, 1_000_000);
        assert_eq!(res.final_memory.unwrap(), mem);
    }

    #[test]
    fn preempt_then_resume_matches_uninterrupted() {
        let k = sixteen();
        let ptb = make_preemptible(&unify_synchronization(&k), Dim3::linear(2)).unwrap();
        let ctl = ptb.control(32, 33);
        let args = ptb.args(&[0], &ctl);
        let reference = interpret(
            &LaunchSpec {
                kernel: &k,
                args: vec![0],
                global_memory: vec![0; 34],
            },
            0,
            1_000_000,
        )
        .final_memory
        .unwrap();
        for c in 0..=16 {
            let first = interpret_with(
                &LaunchSpec {
                    kernel: &ptb.kernel,
                    args: args.clone(),
                    global_memory: vec![0; 34],
                },
                &InterpOptions {
                    trigger: Some(StoreTrigger {
                        watch_addr: 32,
                        threshold: c,
                        store_addr: 33,
                        value: 1,
                    }),
                    ..Default::default()
                },
            )
            .final_memory
            .unwrap();
            assert_eq!(first[32], c, "counter after preemption at {c}");
            let mut resumed = first.clone();
            resumed[33] = 0;
            let done = interpret(
                &LaunchSpec {
                    kernel: &ptb.kernel,
                    args: args.clone(),
                    global_memory: resumed,
                },
                c as u64,
                1_000_000,
            )
            .final_memory
            .unwrap();
            assert_eq!(&done[..32], &reference[..32], "preempted at {c}");
        }
    }
}
