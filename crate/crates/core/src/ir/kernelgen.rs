//! Seeded random kernel generator for equivalence testing.
//!
//! Generated kernels only write global memory at addresses derived from the
//! global thread id (block-disjoint), accumulate into a few shared counters
//! with `ATOMIC_ADD_GLOBAL` (discarding the returned prior value), and keep
//! barriers block-uniform. Their final memory is therefore a function of the
//! launch alone, whatever order blocks run in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Axis, BinOp, Dim3, Inst, KernelDef, Operand, Reg, SpecialKind, SpecialReg, Stmt, Word};

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub max_blocks: u32,
    pub max_threads: u32,
    /// Emit a thread-dependent early return placed *before* a barrier. Such
    /// kernels deadlock under strict barrier semantics unless they are passed
    /// through the unified synchronization rewrite.
    pub divergent_early_return: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            max_blocks: 64,
            max_threads: 32,
            divergent_early_return: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedCase {
    pub kernel: KernelDef,
    pub args: Vec<Word>,
    pub memory: Vec<Word>,
}

const INPUT_WORDS: i64 = 16;

// fixed register roles
const BLK: Reg = Reg(0);
const TMP: Reg = Reg(1);
const TID: Reg = Reg(2);
const NTH: Reg = Reg(3);
const GID: Reg = Reg(4);
const SCRATCH: Reg = Reg(5);
const LOOP: Reg = Reg(6);
const ADDR: Reg = Reg(7);
const FIRST_VALUE: u16 = 8;
const VALUE_REGS: u16 = 6;

struct Builder {
    rng: ChaCha8Rng,
    body: Vec<Stmt>,
    pending_label: Option<String>,
    next_label: usize,
    defined: Vec<Reg>,
}

impl Builder {
    fn push(&mut self, inst: Inst) {
        let label = self.pending_label.take();
        self.body.push(Stmt { label, inst });
    }

    fn fresh_label(&mut self, stem: &str) -> String {
        self.next_label += 1;
        format!("{stem}{}", self.next_label)
    }

    /// Attaches `label` to the next emitted instruction.
    fn place(&mut self, label: String) {
        if let Some(prev) = self.pending_label.take() {
            // two labels on one spot: bridge with a jump
            self.body.push(Stmt::labeled(prev, Inst::Jump { target: label.clone() }));
        }
        self.pending_label = Some(label);
    }

    fn value_reg(&mut self) -> Reg {
        Reg(FIRST_VALUE + self.rng.random_range(0..VALUE_REGS))
    }

    fn source(&mut self) -> Operand {
        match self.rng.random_range(0..10) {
            0..=1 => Operand::Imm(self.rng.random_range(-9..=9)),
            2 => Operand::Reg(GID),
            3 => Operand::Reg(TID),
            4 => Operand::Reg(BLK),
            _ => {
                let i = self.rng.random_range(0..self.defined.len());
                Operand::Reg(self.defined[i])
            }
        }
    }

    fn define(&mut self, r: Reg) {
        if !self.defined.contains(&r) {
            self.defined.push(r);
        }
    }

    fn special(&mut self, dst: Reg, kind: SpecialKind, axis: Axis) {
        self.push(Inst::ReadSpecial {
            dst,
            reg: SpecialReg { kind, axis },
        });
    }

    fn bin(&mut self, op: BinOp, dst: Reg, a: Operand, b: Operand) {
        self.push(Inst::Bin { op, dst, a, b });
    }

    /// `dst = linear index of kind` over `dims_kind`, x fastest.
    fn linear_index(&mut self, dst: Reg, idx: SpecialKind, dims: SpecialKind) {
        self.special(dst, idx, Axis::Z);
        self.special(TMP, dims, Axis::Y);
        self.bin(BinOp::Mul, dst, Operand::Reg(dst), Operand::Reg(TMP));
        self.special(TMP, idx, Axis::Y);
        self.bin(BinOp::Add, dst, Operand::Reg(dst), Operand::Reg(TMP));
        self.special(TMP, dims, Axis::X);
        self.bin(BinOp::Mul, dst, Operand::Reg(dst), Operand::Reg(TMP));
        self.special(TMP, idx, Axis::X);
        self.bin(BinOp::Add, dst, Operand::Reg(dst), Operand::Reg(TMP));
    }

    fn arith(&mut self, count: usize) {
        for _ in 0..count {
            let dst = self.value_reg();
            match self.rng.random_range(0..8) {
                0 => {
                    let imm = self.rng.random_range(-50..=50);
                    self.push(Inst::Const { dst, imm });
                }
                1 => {
                    // load from the read-only input region
                    let s = self.source();
                    self.bin(BinOp::Mod, ADDR, s, Operand::Imm(INPUT_WORDS));
                    self.bin(BinOp::Add, ADDR, Operand::Reg(ADDR), Operand::Imm(INPUT_WORDS));
                    self.bin(BinOp::Mod, ADDR, Operand::Reg(ADDR), Operand::Imm(INPUT_WORDS));
                    self.bin(BinOp::Add, ADDR, Operand::Reg(ADDR), Operand::Param(0));
                    self.push(Inst::LoadGlobal {
                        dst,
                        addr: Operand::Reg(ADDR),
                    });
                }
                2 => {
                    let s = self.source();
                    let d = self.rng.random_range(1..=7);
                    let op = if self.rng.random_bool(0.5) { BinOp::Div } else { BinOp::Mod };
                    self.bin(op, dst, s, Operand::Imm(d));
                }
                _ => {
                    let op = [
                        BinOp::Add,
                        BinOp::Sub,
                        BinOp::Mul,
                        BinOp::CmpLt,
                        BinOp::CmpLe,
                        BinOp::CmpEq,
                        BinOp::CmpNe,
                    ][self.rng.random_range(0..7)];
                    let a = self.source();
                    let b = self.source();
                    self.bin(op, dst, a, b);
                }
            }
            self.define(dst);
        }
    }

    /// Publish a value through shared memory and read a neighbour's slot,
    /// fenced by block-uniform barriers on both sides.
    fn shared_exchange(&mut self) {
        let v = Operand::Reg(self.defined[self.rng.random_range(0..self.defined.len())]);
        self.push(Inst::StoreShared {
            addr: Operand::Reg(TID),
            value: v,
        });
        self.push(Inst::BarSync);
        let shift = self.rng.random_range(1..=5);
        self.bin(BinOp::Add, ADDR, Operand::Reg(TID), Operand::Imm(shift));
        self.bin(BinOp::Mod, ADDR, Operand::Reg(ADDR), Operand::Reg(NTH));
        let dst = self.value_reg();
        self.push(Inst::LoadShared {
            dst,
            addr: Operand::Reg(ADDR),
        });
        self.define(dst);
        self.push(Inst::BarSync);
    }

    fn atomic(&mut self, acc_words: i64) {
        let j = self.rng.random_range(0..acc_words);
        self.bin(BinOp::Add, ADDR, Operand::Param(2), Operand::Imm(j));
        let v = self.source();
        self.push(Inst::AtomicAddGlobal {
            dst: SCRATCH,
            addr: Operand::Reg(ADDR),
            value: v,
        });
    }

    fn store_output(&mut self, per_thread: i64, k: i64) {
        self.bin(BinOp::Mul, ADDR, Operand::Reg(GID), Operand::Imm(per_thread));
        self.bin(BinOp::Add, ADDR, Operand::Reg(ADDR), Operand::Imm(k));
        self.bin(BinOp::Add, ADDR, Operand::Reg(ADDR), Operand::Param(1));
        let v = Operand::Reg(self.defined[self.rng.random_range(0..self.defined.len())]);
        self.push(Inst::StoreGlobal {
            addr: Operand::Reg(ADDR),
            value: v,
        });
    }

    /// `if (TID % m == r) goto target`
    fn thread_guard(&mut self, target: &str) {
        let m = self.rng.random_range(2..=3);
        let r = self.rng.random_range(0..m);
        self.bin(BinOp::Mod, TMP, Operand::Reg(TID), Operand::Imm(m));
        self.bin(BinOp::CmpEq, TMP, Operand::Reg(TMP), Operand::Imm(r));
        self.push(Inst::Branch {
            cond: TMP,
            target: target.to_string(),
        });
    }
}

fn random_dims(rng: &mut ChaCha8Rng, max_total: u32) -> Dim3 {
    loop {
        let d = Dim3::new(
            rng.random_range(1..=max_total.min(16)),
            rng.random_range(1..=4),
            rng.random_range(1..=2),
        );
        if d.total() <= max_total as u64 {
            return d;
        }
    }
}

/// Generates one case from `seed`.
pub fn generate(seed: u64, cfg: &GenConfig) -> GeneratedCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = random_dims(&mut rng, cfg.max_blocks);
    let block = random_dims(&mut rng, cfg.max_threads);
    let per_thread: i64 = rng.random_range(1..=3);
    let acc_words: i64 = rng.random_range(1..=2);
    let mut b = Builder {
        rng,
        body: Vec::new(),
        pending_label: None,
        next_label: 0,
        defined: Vec::new(),
    };

    b.linear_index(BLK, SpecialKind::BlockIdx, SpecialKind::GridDim);
    b.linear_index(TID, SpecialKind::ThreadIdx, SpecialKind::BlockDim);
    b.special(NTH, SpecialKind::BlockDim, Axis::X);
    b.special(TMP, SpecialKind::BlockDim, Axis::Y);
    b.bin(BinOp::Mul, NTH, Operand::Reg(NTH), Operand::Reg(TMP));
    b.special(TMP, SpecialKind::BlockDim, Axis::Z);
    b.bin(BinOp::Mul, NTH, Operand::Reg(NTH), Operand::Reg(TMP));
    b.bin(BinOp::Mul, GID, Operand::Reg(BLK), Operand::Reg(NTH));
    b.bin(BinOp::Add, GID, Operand::Reg(GID), Operand::Reg(TID));
    b.define(GID);
    b.arith(3);

    let ret_label = "early_exit".to_string();
    let mut uses_ret_label = false;
    if cfg.divergent_early_return {
        // some threads leave before the barrier below
        b.thread_guard(&ret_label);
        uses_ret_label = true;
        b.arith(1);
        b.shared_exchange();
    }

    let sections = b.rng.random_range(1..=3);
    for _ in 0..sections {
        match b.rng.random_range(0..5) {
            0 => b.shared_exchange(),
            1 => {
                // block-uniform loop, possibly containing barriers
                let top = b.fresh_label("loop");
                b.bin(BinOp::Mod, LOOP, Operand::Reg(BLK), Operand::Imm(3));
                b.bin(BinOp::Add, LOOP, Operand::Reg(LOOP), Operand::Imm(1));
                b.place(top.clone());
                b.arith(2);
                if b.rng.random_bool(0.5) {
                    b.shared_exchange();
                }
                b.bin(BinOp::Sub, LOOP, Operand::Reg(LOOP), Operand::Imm(1));
                b.push(Inst::Branch {
                    cond: LOOP,
                    target: top,
                });
            }
            2 => {
                // thread-divergent if/else without barriers
                let other = b.fresh_label("else");
                let join = b.fresh_label("join");
                b.thread_guard(&other);
                b.arith(2);
                b.push(Inst::Jump {
                    target: join.clone(),
                });
                b.place(other);
                b.arith(2);
                b.place(join);
            }
            3 => b.atomic(acc_words),
            _ => b.arith(3),
        }
    }
    if b.rng.random_bool(0.5) {
        b.atomic(acc_words);
    }
    for k in 0..per_thread {
        if k + 1 == per_thread && !cfg.divergent_early_return && b.rng.random_bool(0.4) {
            // early return after the last barrier: harmless divergence
            b.thread_guard(&ret_label);
            uses_ret_label = true;
        }
        b.store_output(per_thread, k);
    }
    b.push(Inst::Ret);
    if uses_ret_label {
        b.place(ret_label);
        b.push(Inst::Ret);
    }

    let nthreads = block.total() as i64;
    let total_threads = grid.total() as i64 * nthreads;
    let out_base = INPUT_WORDS;
    let acc_base = out_base + total_threads * per_thread;
    let mut memory: Vec<Word> = (0..INPUT_WORDS).map(|_| b.rng.random_range(-100..=100)).collect();
    memory.resize((acc_base + acc_words) as usize, 0);

    let kernel = KernelDef {
        name: format!("gen{seed}"),
        params: vec!["inp".into(), "out".into(), "acc".into()],
        grid,
        block,
        register_count: FIRST_VALUE + VALUE_REGS,
        shared_words: nthreads as u32,
        body: b.body,
        inter_block_dependent: false,
    };
    debug_assert_eq!(kernel.validate(), Ok(()));
    GeneratedCase {
        kernel,
        args: vec![0, out_base, acc_base],
        memory,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{interpret, ExecStatus, LaunchSpec, DEFAULT_STEP_LIMIT};

    #[test]
    fn generated_kernels_are_valid_and_complete() {
        for seed in 0..50 {
            let case = generate(seed, &GenConfig::default());
            case.kernel.validate().unwrap();
            assert!(case.kernel.grid.total() <= 64);
            assert!(case.kernel.block.total() <= 32);
            let launch = LaunchSpec {
                kernel: &case.kernel,
                args: case.args.clone(),
                global_memory: case.memory.clone(),
            };
            let res = interpret(&launch, seed, DEFAULT_STEP_LIMIT);
            assert_eq!(res.status, ExecStatus::Completed, "seed {seed}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(7, &GenConfig::default());
        let b = generate(7, &GenConfig::default());
        assert_eq!(a.kernel, b.kernel);
        assert_eq!(a.memory, b.memory);
    }
}
