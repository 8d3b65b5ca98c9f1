use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{delinearize, Axis, BinOp, Inst, KernelDef, Operand, SpecialKind, Word};

pub const DEFAULT_STEP_LIMIT: u64 = 10_000_000;

/// A kernel bound to concrete arguments and an initial global memory image.
#[derive(Debug, Clone)]
pub struct LaunchSpec<'a> {
    pub kernel: &'a KernelDef,
    pub args: Vec<Word>,
    pub global_memory: Vec<Word>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecStatus {
    Completed,
    /// Some thread of `block` waits at a barrier that can never release:
    /// another thread has returned, or the waiting threads sit at different
    /// barrier instructions.
    DivergentBarrier { block: u64 },
    StepLimitExceeded,
    MemoryFault { block: u64, addr: Word },
    /// The launch itself is malformed (argument count mismatch).
    BadLaunch,
}

impl ExecStatus {
    pub fn name(&self) -> &'static str {
        match self {
            ExecStatus::Completed => "Completed",
            ExecStatus::DivergentBarrier { .. } => "DivergentBarrier",
            ExecStatus::StepLimitExceeded => "StepLimitExceeded",
            ExecStatus::MemoryFault { .. } => "MemoryFault",
            ExecStatus::BadLaunch => "BadLaunch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub status: ExecStatus,
    /// Present only when `status` is `Completed`.
    pub final_memory: Option<Vec<Word>>,
    pub steps_executed: u64,
}

/// Models the host writing `value` to `store_addr` as soon as the word at
/// `watch_addr` reaches `threshold` (checked before the launch and after every
/// global write). Used to raise a preemption flag at an exact counter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreTrigger {
    pub watch_addr: usize,
    pub threshold: Word,
    pub store_addr: usize,
    pub value: Word,
}

#[derive(Debug, Clone, Copy)]
pub struct InterpOptions {
    pub schedule_seed: u64,
    pub step_limit: u64,
    pub trigger: Option<StoreTrigger>,
}

impl Default for InterpOptions {
    fn default() -> Self {
        Self {
            schedule_seed: 0,
            step_limit: DEFAULT_STEP_LIMIT,
            trigger: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Src {
    Reg(u16),
    Imm(Word),
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Mov { dst: u16, src: Src },
    Bin { op: BinOp, dst: u16, a: Src, b: Src },
    Special { dst: u16, kind: SpecialKind, axis: Axis },
    LoadGlobal { dst: u16, addr: Src },
    StoreGlobal { addr: Src, value: Src },
    AtomicAdd { dst: u16, addr: Src, value: Src },
    LoadShared { dst: u16, addr: Src },
    StoreShared { addr: Src, value: Src },
    Bar,
    Branch { cond: u16, target: u32 },
    Jump { target: u32 },
    Ret,
}

/// Lowers the kernel to a resolved op list with parameters folded to
/// immediates.
fn lower(k: &KernelDef, args: &[Word]) -> Vec<Op> {
    let labels: HashMap<&str, u32> = k
        .body
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.label.as_deref().map(|l| (l, i as u32)))
        .collect();
    let src = |o: &Operand| match *o {
        Operand::Reg(r) => Src::Reg(r.0),
        Operand::Imm(v) => Src::Imm(v),
        Operand::Param(p) => Src::Imm(args[p]),
    };
    k.body
        .iter()
        .map(|s| match &s.inst {
            Inst::Const { dst, imm } => Op::Mov {
                dst: dst.0,
                src: Src::Imm(*imm),
            },
            Inst::Mov { dst, src: o } => Op::Mov {
                dst: dst.0,
                src: src(o),
            },
            Inst::Bin { op, dst, a, b } => Op::Bin {
                op: *op,
                dst: dst.0,
                a: src(a),
                b: src(b),
            },
            Inst::ReadSpecial { dst, reg } => Op::Special {
                dst: dst.0,
                kind: reg.kind,
                axis: reg.axis,
            },
            Inst::LoadGlobal { dst, addr } => Op::LoadGlobal {
                dst: dst.0,
                addr: src(addr),
            },
            Inst::StoreGlobal { addr, value } => Op::StoreGlobal {
                addr: src(addr),
                value: src(value),
            },
            Inst::AtomicAddGlobal { dst, addr, value } => Op::AtomicAdd {
                dst: dst.0,
                addr: src(addr),
                value: src(value),
            },
            Inst::LoadShared { dst, addr } => Op::LoadShared {
                dst: dst.0,
                addr: src(addr),
            },
            Inst::StoreShared { addr, value } => Op::StoreShared {
                addr: src(addr),
                value: src(value),
            },
            Inst::BarSync => Op::Bar,
            Inst::Branch { cond, target } => Op::Branch {
                cond: cond.0,
                target: labels[target.as_str()],
            },
            Inst::Jump { target } => Op::Jump {
                target: labels[target.as_str()],
            },
            Inst::Ret => Op::Ret,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ThreadState {
    Runnable,
    AtBarrier,
    Returned,
}

enum Fault {
    Memory(Word),
    StepLimit,
}

struct Machine<'a> {
    ops: &'a [Op],
    kernel: &'a KernelDef,
    memory: Vec<Word>,
    steps: u64,
    step_limit: u64,
    trigger: Option<StoreTrigger>,
}

impl Machine<'_> {
    fn fire_trigger(&mut self) {
        if let Some(t) = self.trigger {
            if self.memory.get(t.watch_addr).is_some_and(|&v| v >= t.threshold) {
                if let Some(slot) = self.memory.get_mut(t.store_addr) {
                    *slot = t.value;
                }
                self.trigger = None;
            }
        }
    }

    fn after_global_write(&mut self, addr: usize) {
        if matches!(self.trigger, Some(t) if t.watch_addr == addr) {
            self.fire_trigger();
        }
    }

    fn run_block(&mut self, block_linear: u64) -> Result<Option<u64>, Fault> {
        let k = self.kernel;
        let nthreads = k.block.total() as usize;
        let nregs = k.register_count as usize;
        let block_idx = delinearize(block_linear, k.grid).expect("block index within grid");
        let tids: Vec<_> = (0..nthreads as u64)
            .map(|t| delinearize(t, k.block).expect("thread index within block"))
            .collect();
        let mut regs = vec![0 as Word; nthreads * nregs];
        let mut pcs = vec![0u32; nthreads];
        let mut state = vec![ThreadState::Runnable; nthreads];
        let mut shared = vec![0 as Word; k.shared_words as usize];

        loop {
            let mut runnable = 0usize;
            for t in 0..nthreads {
                if state[t] != ThreadState::Runnable {
                    continue;
                }
                runnable += 1;
                if self.steps >= self.step_limit {
                    return Err(Fault::StepLimit);
                }
                self.steps += 1;
                let r = &mut regs[t * nregs..(t + 1) * nregs];
                let read = |r: &[Word], s: Src| match s {
                    Src::Reg(i) => r[i as usize],
                    Src::Imm(v) => v,
                };
                let pc = pcs[t] as usize;
                let mut next = pc as u32 + 1;
                match self.ops[pc] {
                    Op::Mov { dst, src } => r[dst as usize] = read(r, src),
                    Op::Bin { op, dst, a, b } => r[dst as usize] = op.eval(read(r, a), read(r, b)),
                    Op::Special { dst, kind, axis } => {
                        let d = match kind {
                            SpecialKind::BlockIdx => block_idx,
                            SpecialKind::ThreadIdx => tids[t],
                            SpecialKind::GridDim => k.grid,
                            SpecialKind::BlockDim => k.block,
                        };
                        r[dst as usize] = d.get(axis) as Word;
                    }
                    Op::LoadGlobal { dst, addr } => {
                        let a = read(r, addr);
                        r[dst as usize] = *index(&self.memory, a).ok_or(Fault::Memory(a))?;
                    }
                    Op::StoreGlobal { addr, value } => {
                        let a = read(r, addr);
                        let v = read(r, value);
                        *index_mut(&mut self.memory, a).ok_or(Fault::Memory(a))? = v;
                        self.after_global_write(a as usize);
                    }
                    Op::AtomicAdd { dst, addr, value } => {
                        let a = read(r, addr);
                        let v = read(r, value);
                        let slot = index_mut(&mut self.memory, a).ok_or(Fault::Memory(a))?;
                        let prior = *slot;
                        *slot = prior.wrapping_add(v);
                        r[dst as usize] = prior;
                        self.after_global_write(a as usize);
                    }
                    Op::LoadShared { dst, addr } => {
                        let a = read(r, addr);
                        r[dst as usize] = *index(&shared, a).ok_or(Fault::Memory(a))?;
                    }
                    Op::StoreShared { addr, value } => {
                        let a = read(r, addr);
                        let v = read(r, value);
                        *index_mut(&mut shared, a).ok_or(Fault::Memory(a))? = v;
                    }
                    Op::Bar => {
                        state[t] = ThreadState::AtBarrier;
                        next = pc as u32;
                    }
                    Op::Branch { cond, target } => {
                        if r[cond as usize] != 0 {
                            next = target;
                        }
                    }
                    Op::Jump { target } => next = target,
                    Op::Ret => {
                        state[t] = ThreadState::Returned;
                        next = pc as u32;
                    }
                }
                pcs[t] = next;
            }
            if runnable > 0 {
                continue;
            }
            // Nobody can run: the block either finished or every live
            // thread is parked at a barrier.
            let waiting: Vec<usize> = (0..nthreads)
                .filter(|&t| state[t] == ThreadState::AtBarrier)
                .collect();
            if waiting.is_empty() {
                return Ok(None);
            }
            let any_returned = state.iter().any(|s| *s == ThreadState::Returned);
            let site = pcs[waiting[0]];
            if any_returned || waiting.iter().any(|&t| pcs[t] != site) {
                return Ok(Some(block_linear));
            }
            for &t in &waiting {
                state[t] = ThreadState::Runnable;
                pcs[t] += 1;
            }
        }
    }
}

fn index(mem: &[Word], addr: Word) -> Option<&Word> {
    usize::try_from(addr).ok().and_then(|a| mem.get(a))
}

fn index_mut(mem: &mut [Word], addr: Word) -> Option<&mut Word> {
    usize::try_from(addr).ok().and_then(|a| mem.get_mut(a))
}

/// Runs every block of the launch.
///
/// Blocks execute one after another in a permutation derived from
/// `schedule_seed`; threads within a block advance one instruction at a time
/// in round-robin order until all of them are parked at a barrier or have
/// returned.
pub fn interpret(launch: &LaunchSpec<'_>, schedule_seed: u64, step_limit: u64) -> ExecResult {
    interpret_with(
        launch,
        &InterpOptions {
            schedule_seed,
            step_limit,
            trigger: None,
        },
    )
}

pub fn interpret_with(launch: &LaunchSpec<'_>, opts: &InterpOptions) -> ExecResult {
    let k = launch.kernel;
    if launch.args.len() != k.params.len() {
        return ExecResult {
            status: ExecStatus::BadLaunch,
            final_memory: None,
            steps_executed: 0,
        };
    }
    let ops = lower(k, &launch.args);
    let mut order: Vec<u64> = (0..k.grid.total()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.schedule_seed));

    let mut m = Machine {
        ops: &ops,
        kernel: k,
        memory: launch.global_memory.clone(),
        steps: 0,
        step_limit: opts.step_limit,
        trigger: opts.trigger,
    };
    m.fire_trigger();
    for block in order {
        let status = match m.run_block(block) {
            Ok(None) => continue,
            Ok(Some(b)) => ExecStatus::DivergentBarrier { block: b },
            Err(Fault::StepLimit) => ExecStatus::StepLimitExceeded,
            Err(Fault::Memory(addr)) => ExecStatus::MemoryFault { block, addr },
        };
        return ExecResult {
            status,
            final_memory: None,
            steps_executed: m.steps,
        };
    }
    ExecResult {
        status: ExecStatus::Completed,
        final_memory: Some(m.memory),
        steps_executed: m.steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_kernel;

    const VADD: &str = "\
kernel vadd
grid 4 1 1
block 2 1 1
regs 6
param a
param b
param out
    READ_SPECIAL r0 blockIdx.x
    READ_SPECIAL r1 blockDim.x
    MUL r0 r0 r1
    READ_SPECIAL r1 threadIdx.x
    ADD r0 r0 r1
    ADD r2 $a r0
    LOAD_GLOBAL r3 r2
    ADD r2 $b r0
    LOAD_GLOBAL r4 r2
    ADD r5 r3 r4
    ADD r2 $out r0
    STORE_GLOBAL r2 r5
    RET
";

    fn vadd_memory() -> Vec<Word> {
        let mut mem: Vec<Word> = (0..8).collect();
        mem.extend([1; 8]);
        mem.extend([0; 8]);
        mem
    }

    #[test]
    fn vector_add() {
        let k = parse_kernel(VADD).unwrap();
        let launch = LaunchSpec {
            kernel: &k,
            args: vec![0, 8, 16],
            global_memory: vadd_memory(),
        };
        let res = interpret(&launch, 0, DEFAULT_STEP_LIMIT);
        assert_eq!(res.status, ExecStatus::Completed);
        let mem = res.final_memory.unwrap();
        assert_eq!(&mem[16..], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(res.steps_executed, 8 * 13);
    }

    #[test]
    fn early_return_before_barrier_is_divergent() {
        let k = parse_kernel(
            "kernel div\nblock 2 1 1\nregs 1\n    READ_SPECIAL r0 threadIdx.x\n    BRANCH r0 sync\n    RET\nsync: BAR_SYNC\n    RET\n",
        )
        .unwrap();
        let launch = LaunchSpec {
            kernel: &k,
            args: vec![],
            global_memory: vec![],
        };
        let res = interpret(&launch, 0, DEFAULT_STEP_LIMIT);
        assert_eq!(res.status, ExecStatus::DivergentBarrier { block: 0 });
        assert!(res.final_memory.is_none());
    }

    #[test]
    fn barrier_at_different_sites_is_divergent() {
        let k = parse_kernel(
            "kernel div\nblock 2 1 1\nregs 1\n    READ_SPECIAL r0 threadIdx.x\n    BRANCH r0 other\n    BAR_SYNC\n    RET\nother: BAR_SYNC\n    RET\n",
        )
        .unwrap();
        let launch = LaunchSpec {
            kernel: &k,
            args: vec![],
            global_memory: vec![],
        };
        assert!(matches!(
            interpret(&launch, 0, DEFAULT_STEP_LIMIT).status,
            ExecStatus::DivergentBarrier { .. }
        ));
    }

    #[test]
    fn shared_memory_exchange_through_barrier() {
        // each thread publishes tid, then reads its neighbour's slot
        let k = parse_kernel(
            "kernel x\nblock 4 1 1\nregs 3\nshared 4\n    READ_SPECIAL r0 threadIdx.x\n    STORE_SHARED r0 r0\n    BAR_SYNC\n    ADD r1 r0 1\n    MOD r1 r1 4\n    LOAD_SHARED r2 r1\n    STORE_GLOBAL r0 r2\n    RET\n",
        )
        .unwrap();
        let launch = LaunchSpec {
            kernel: &k,
            args: vec![],
            global_memory: vec![0; 4],
        };
        let res = interpret(&launch, 3, DEFAULT_STEP_LIMIT);
        assert_eq!(res.final_memory.unwrap(), vec![1, 2, 3, 0]);
    }

    #[test]
    fn faults_and_limits() {
        let k = parse_kernel("kernel f\nregs 1\n    LOAD_GLOBAL r0 5\n    RET\n").unwrap();
        let launch = LaunchSpec {
            kernel: &k,
            args: vec![],
            global_memory: vec![0; 2],
        };
        assert_eq!(
            interpret(&launch, 0, 100).status,
            ExecStatus::MemoryFault { block: 0, addr: 5 }
        );
        let spin = parse_kernel("kernel s\nl: JUMP l\n").unwrap();
        let launch = LaunchSpec {
            kernel: &spin,
            args: vec![],
            global_memory: vec![],
        };
        let res = interpret(&launch, 0, 1000);
        assert_eq!(res.status, ExecStatus::StepLimitExceeded);
        assert_eq!(res.steps_executed, 1000);
    }

    #[test]
    fn atomics_accumulate_and_return_prior() {
        let k = parse_kernel(
            "kernel at\ngrid 3 1 1\nblock 2 1 1\nregs 1\n    ATOMIC_ADD_GLOBAL r0 0 1\n    RET\n",
        )
        .unwrap();
        let launch = LaunchSpec {
            kernel: &k,
            args: vec![],
            global_memory: vec![10],
        };
        for seed in 0..5 {
            assert_eq!(interpret(&launch, seed, 1000).final_memory.unwrap(), vec![16]);
        }
    }

    #[test]
    fn trigger_fires_once_threshold_reached() {
        let k = parse_kernel(
            "kernel at\ngrid 4 1 1\nregs 1\n    ATOMIC_ADD_GLOBAL r0 0 1\n    RET\n",
        )
        .unwrap();
        let launch = LaunchSpec {
            kernel: &k,
            args: vec![],
            global_memory: vec![0, 0],
        };
        let opts = InterpOptions {
            trigger: Some(StoreTrigger {
                watch_addr: 0,
                threshold: 2,
                store_addr: 1,
                value: 7,
            }),
            ..Default::default()
        };
        assert_eq!(interpret_with(&launch, &opts).final_memory.unwrap(), vec![4, 7]);
    }

    #[test]
    fn wrong_arg_count_is_bad_launch() {
        let k = parse_kernel(VADD).unwrap();
        let launch = LaunchSpec {
            kernel: &k,
            args: vec![0],
            global_memory: vadd_memory(),
        };
        assert_eq!(interpret(&launch, 0, 100).status, ExecStatus::BadLaunch);
    }
}
