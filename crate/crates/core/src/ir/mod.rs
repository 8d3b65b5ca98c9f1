//! A minimal SIMT kernel IR.
//!
//! Kernels are written in a line-based assembly-like text format (see
//! [`parse_kernel`] / [`emit_kernel`]) and executed by a deterministic
//! block-serial interpreter ([`interpret`]). The instruction set is just large
//! enough to express block-index arithmetic, global/shared memory traffic,
//! block barriers and structured control flow.

mod emit;
mod interp;
pub mod kernelgen;
mod parse;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use emit::emit_kernel;
pub use interp::{
    interpret, interpret_with, ExecResult, ExecStatus, InterpOptions, LaunchSpec, StoreTrigger,
    DEFAULT_STEP_LIMIT,
};
pub use parse::{parse_kernel, ParseError, ParseErrorKind};

/// Machine word of the IR.
pub type Word = i64;

/// Extent or index along the three grid/block axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Dim3 {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl Dim3 {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        Self { x, y, z }
    }

    pub const fn linear(n: u32) -> Self {
        Self { x: n, y: 1, z: 1 }
    }

    pub fn total(&self) -> u64 {
        self.x as u64 * self.y as u64 * self.z as u64
    }

    pub fn get(&self, axis: Axis) -> u32 {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
        }
    }

    pub fn set(&mut self, axis: Axis, v: u32) {
        match axis {
            Axis::X => self.x = v,
            Axis::Y => self.y = v,
            Axis::Z => self.z = v,
        }
    }

    /// True when every axis is at least one.
    pub fn is_valid_extent(&self) -> bool {
        self.x >= 1 && self.y >= 1 && self.z >= 1
    }
}

impl fmt::Display for Dim3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.x, self.y, self.z)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IndexError {
    #[error("index {idx} out of range for dims {dims}")]
    OutOfRange { idx: Dim3, dims: Dim3 },
    #[error("task index {task} out of range for dims {dims}")]
    TaskOutOfRange { task: u64, dims: Dim3 },
}

/// Row-major (x fastest) linear index of `idx` within `dims`.
pub fn linearize(idx: Dim3, dims: Dim3) -> Result<u64, IndexError> {
    if idx.x >= dims.x || idx.y >= dims.y || idx.z >= dims.z {
        return Err(IndexError::OutOfRange { idx, dims });
    }
    let (dx, dy) = (dims.x as u64, dims.y as u64);
    Ok(idx.x as u64 + idx.y as u64 * dx + idx.z as u64 * dx * dy)
}

/// Inverse of [`linearize`].
pub fn delinearize(task_index: u64, dims: Dim3) -> Result<Dim3, IndexError> {
    if task_index >= dims.total() {
        return Err(IndexError::TaskOutOfRange {
            task: task_index,
            dims,
        });
    }
    let (dx, dy) = (dims.x as u64, dims.y as u64);
    Ok(Dim3 {
        x: (task_index % dx) as u32,
        y: ((task_index / dx) % dy) as u32,
        z: (task_index / (dx * dy)) as u32,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn suffix(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialKind {
    BlockIdx,
    ThreadIdx,
    GridDim,
    BlockDim,
}

impl SpecialKind {
    pub const ALL: [SpecialKind; 4] = [
        SpecialKind::BlockIdx,
        SpecialKind::ThreadIdx,
        SpecialKind::GridDim,
        SpecialKind::BlockDim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpecialKind::BlockIdx => "blockIdx",
            SpecialKind::ThreadIdx => "threadIdx",
            SpecialKind::GridDim => "gridDim",
            SpecialKind::BlockDim => "blockDim",
        }
    }
}

/// A built-in index register such as `blockIdx.x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpecialReg {
    pub kind: SpecialKind,
    pub axis: Axis,
}

impl fmt::Display for SpecialReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.kind.name(), self.axis.suffix())
    }
}

/// Per-thread register index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(pub u16);

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Source operand: a register, an immediate, or a kernel parameter (by
/// position in [`KernelDef::params`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(Word),
    Param(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    CmpLt,
    CmpLe,
    CmpEq,
    CmpNe,
}

impl BinOp {
    pub const ALL: [BinOp; 9] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Div,
        BinOp::Mod,
        BinOp::CmpLt,
        BinOp::CmpLe,
        BinOp::CmpEq,
        BinOp::CmpNe,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "ADD",
            BinOp::Sub => "SUB",
            BinOp::Mul => "MUL",
            BinOp::Div => "DIV",
            BinOp::Mod => "MOD",
            BinOp::CmpLt => "CMP_LT",
            BinOp::CmpLe => "CMP_LE",
            BinOp::CmpEq => "CMP_EQ",
            BinOp::CmpNe => "CMP_NE",
        }
    }

    /// Total semantics: division by zero yields 0 and `x MOD 0` yields `x`.
    pub fn eval(self, a: Word, b: Word) -> Word {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Div => {
                if b == 0 {
                    0
                } else {
                    a.wrapping_div(b)
                }
            }
            BinOp::Mod => {
                if b == 0 {
                    a
                } else {
                    a.wrapping_rem(b)
                }
            }
            BinOp::CmpLt => (a < b) as Word,
            BinOp::CmpLe => (a <= b) as Word,
            BinOp::CmpEq => (a == b) as Word,
            BinOp::CmpNe => (a != b) as Word,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Inst {
    Const { dst: Reg, imm: Word },
    Mov { dst: Reg, src: Operand },
    Bin { op: BinOp, dst: Reg, a: Operand, b: Operand },
    ReadSpecial { dst: Reg, reg: SpecialReg },
    LoadGlobal { dst: Reg, addr: Operand },
    StoreGlobal { addr: Operand, value: Operand },
    /// Writes the prior value of the word to `dst`.
    AtomicAddGlobal { dst: Reg, addr: Operand, value: Operand },
    LoadShared { dst: Reg, addr: Operand },
    StoreShared { addr: Operand, value: Operand },
    BarSync,
    /// Jumps to `target` when `cond` is non-zero.
    Branch { cond: Reg, target: String },
    Jump { target: String },
    Ret,
}

impl Inst {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Inst::Const { .. } => "CONST",
            Inst::Mov { .. } => "MOV",
            Inst::Bin { op, .. } => op.mnemonic(),
            Inst::ReadSpecial { .. } => "READ_SPECIAL",
            Inst::LoadGlobal { .. } => "LOAD_GLOBAL",
            Inst::StoreGlobal { .. } => "STORE_GLOBAL",
            Inst::AtomicAddGlobal { .. } => "ATOMIC_ADD_GLOBAL",
            Inst::LoadShared { .. } => "LOAD_SHARED",
            Inst::StoreShared { .. } => "STORE_SHARED",
            Inst::BarSync => "BAR_SYNC",
            Inst::Branch { .. } => "BRANCH",
            Inst::Jump { .. } => "JUMP",
            Inst::Ret => "RET",
        }
    }

    pub fn target(&self) -> Option<&str> {
        match self {
            Inst::Branch { target, .. } | Inst::Jump { target } => Some(target),
            _ => None,
        }
    }

    /// Destination register, if the instruction writes one.
    pub fn dst(&self) -> Option<Reg> {
        match *self {
            Inst::Const { dst, .. }
            | Inst::Mov { dst, .. }
            | Inst::Bin { dst, .. }
            | Inst::ReadSpecial { dst, .. }
            | Inst::LoadGlobal { dst, .. }
            | Inst::AtomicAddGlobal { dst, .. }
            | Inst::LoadShared { dst, .. } => Some(dst),
            _ => None,
        }
    }

    /// All operands read by the instruction.
    pub fn sources(&self) -> Vec<Operand> {
        match self {
            Inst::Const { .. } | Inst::ReadSpecial { .. } | Inst::BarSync | Inst::Jump { .. } | Inst::Ret => {
                vec![]
            }
            Inst::Mov { src, .. } => vec![*src],
            Inst::Bin { a, b, .. } => vec![*a, *b],
            Inst::LoadGlobal { addr, .. } | Inst::LoadShared { addr, .. } => vec![*addr],
            Inst::StoreGlobal { addr, value }
            | Inst::StoreShared { addr, value }
            | Inst::AtomicAddGlobal { addr, value, .. } => vec![*addr, *value],
            Inst::Branch { cond, .. } => vec![Operand::Reg(*cond)],
        }
    }

    /// Whether control can fall through to the next instruction.
    pub fn falls_through(&self) -> bool {
        !matches!(self, Inst::Jump { .. } | Inst::Ret)
    }
}

/// One body line: an optional label followed by an instruction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Stmt {
    pub label: Option<String>,
    pub inst: Inst,
}

impl Stmt {
    pub fn new(inst: Inst) -> Self {
        Self { label: None, inst }
    }

    pub fn labeled(label: impl Into<String>, inst: Inst) -> Self {
        Self {
            label: Some(label.into()),
            inst,
        }
    }
}

impl From<Inst> for Stmt {
    fn from(inst: Inst) -> Self {
        Stmt::new(inst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KernelDef {
    pub name: String,
    pub params: Vec<String>,
    pub grid: Dim3,
    pub block: Dim3,
    pub register_count: u16,
    /// Shared-memory words per block.
    pub shared_words: u32,
    pub body: Vec<Stmt>,
    /// Kernels whose blocks communicate (cooperative launches) must not be
    /// sliced or made preemptible.
    pub inter_block_dependent: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("kernel body is empty")]
    EmptyBody,
    #[error("kernel `{0}`: invalid identifier")]
    BadName(String),
    #[error("grid and block extents must be >= 1 on every axis")]
    BadExtent,
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("instruction {index}: register {reg} out of range (regs {count})")]
    RegisterOutOfRange { index: usize, reg: Reg, count: u16 },
    #[error("instruction {index}: parameter index {param} out of range")]
    ParamOutOfRange { index: usize, param: usize },
    #[error("control can fall off the end of the body (last instruction must be RET or JUMP)")]
    FallsOffEnd,
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl KernelDef {
    /// Structural validation; every kernel handed out by the parser or the
    /// transformation passes satisfies it.
    pub fn validate(&self) -> Result<(), IrError> {
        if !is_identifier(&self.name) {
            return Err(IrError::BadName(self.name.clone()));
        }
        if !self.grid.is_valid_extent() || !self.block.is_valid_extent() {
            return Err(IrError::BadExtent);
        }
        let mut seen = HashSet::new();
        for p in &self.params {
            if !is_identifier(p) {
                return Err(IrError::BadName(p.clone()));
            }
            if !seen.insert(p.as_str()) {
                return Err(IrError::DuplicateParam(p.clone()));
            }
        }
        let last = self.body.last().ok_or(IrError::EmptyBody)?;
        if last.inst.falls_through() {
            return Err(IrError::FallsOffEnd);
        }
        let mut labels = HashSet::new();
        for stmt in &self.body {
            if let Some(l) = &stmt.label {
                if !is_identifier(l) {
                    return Err(IrError::BadName(l.clone()));
                }
                if !labels.insert(l.as_str()) {
                    return Err(IrError::DuplicateLabel(l.clone()));
                }
            }
        }
        for (index, stmt) in self.body.iter().enumerate() {
            if let Some(t) = stmt.inst.target() {
                if !labels.contains(t) {
                    return Err(IrError::UnresolvedLabel(t.to_string()));
                }
            }
            let regs = stmt.inst.dst().into_iter().chain(
                stmt.inst
                    .sources()
                    .into_iter()
                    .filter_map(|o| if let Operand::Reg(r) = o { Some(r) } else { None }),
            );
            for reg in regs {
                if reg.0 >= self.register_count {
                    return Err(IrError::RegisterOutOfRange {
                        index,
                        reg,
                        count: self.register_count,
                    });
                }
            }
            for o in stmt.inst.sources() {
                if let Operand::Param(param) = o {
                    if param >= self.params.len() {
                        return Err(IrError::ParamOutOfRange { index, param });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p == name)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.body
            .iter()
            .position(|s| s.label.as_deref() == Some(label))
    }

    pub fn threads_per_block(&self) -> u64 {
        self.block.total()
    }
}
