use serde::{Deserialize, Serialize};

use super::{append_params, refuse_dependent, SliceFraction, TransformError};
use crate::ir::{Axis, Dim3, Inst, KernelDef, Operand, SpecialKind, Stmt, Word};

/// Names of the offset parameters appended by [`add_block_offset`].
pub const OFFSET_PARAMS: [&str; 3] = ["tally_offset_x", "tally_offset_y", "tally_offset_z"];

/// Appends `tally_offset_{x,y,z}` parameters and rewrites every
/// `READ_SPECIAL rd blockIdx.a` into the raw read followed by
/// `ADD rd rd $tally_offset_a`.
///
/// `gridDim` reads are folded to the kernel's declared grid so that a
/// sub-launch over a smaller grid still observes the original extents.
pub fn add_block_offset(k: &KernelDef) -> Result<KernelDef, TransformError> {
    refuse_dependent(k)?;
    let mut out = k.clone();
    append_params(&mut out, &OFFSET_PARAMS)?;
    let base = k.params.len();
    out.body = Vec::with_capacity(k.body.len() + 4);
    for stmt in &k.body {
        match &stmt.inst {
            Inst::ReadSpecial { dst, reg } if reg.kind == SpecialKind::BlockIdx => {
                let axis = Axis::ALL.iter().position(|a| *a == reg.axis).unwrap();
                out.body.push(stmt.clone());
                out.body.push(Stmt::new(Inst::Bin {
                    op: crate::ir::BinOp::Add,
                    dst: *dst,
                    a: Operand::Reg(*dst),
                    b: Operand::Param(base + axis),
                }));
            }
            Inst::ReadSpecial { dst, reg } if reg.kind == SpecialKind::GridDim => {
                out.body.push(Stmt {
                    label: stmt.label.clone(),
                    inst: Inst::Const {
                        dst: *dst,
                        imm: k.grid.get(reg.axis) as Word,
                    },
                });
            }
            _ => out.body.push(stmt.clone()),
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubLaunch {
    pub block_offset: Dim3,
    pub sub_grid: Dim3,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlicedPlan {
    /// Offset-augmented kernel; its `grid` is the original grid.
    pub base_kernel: KernelDef,
    pub sub_launches: Vec<SubLaunch>,
}

impl SlicedPlan {
    /// The kernel to launch for sub-launch `i` (grid replaced by the sub-grid).
    pub fn kernel_for(&self, i: usize) -> KernelDef {
        let mut k = self.base_kernel.clone();
        k.grid = self.sub_launches[i].sub_grid;
        k
    }

    /// Original arguments followed by the sub-launch's block offset.
    pub fn args_for(&self, original_args: &[Word], i: usize) -> Vec<Word> {
        let o = self.sub_launches[i].block_offset;
        let mut args = original_args.to_vec();
        args.extend([o.x as Word, o.y as Word, o.z as Word]);
        args
    }

    /// Sub-launch table as CSV (`index,offset_x,offset_y,offset_z,grid_x,grid_y,grid_z`).
    pub fn table_csv(&self) -> String {
        let mut s = String::from("index,offset_x,offset_y,offset_z,grid_x,grid_y,grid_z\n");
        for (i, l) in self.sub_launches.iter().enumerate() {
            s.push_str(&format!(
                "{i},{},{},{},{},{},{}\n",
                l.block_offset.x,
                l.block_offset.y,
                l.block_offset.z,
                l.sub_grid.x,
                l.sub_grid.y,
                l.sub_grid.z
            ));
        }
        s
    }
}

/// Extents of consecutive slices of an axis of length `len`; every slice has
/// the same extent except the last, which takes what is left.
pub fn slice_extents(len: u32, fraction: SliceFraction) -> Vec<u32> {
    let e = fraction.extent_of(len);
    let mut out = Vec::with_capacity(len.div_ceil(e) as usize);
    let mut left = len;
    while left > 0 {
        let take = e.min(left);
        out.push(take);
        left -= take;
    }
    out
}

/// Axis with the most blocks; ties go to x, then y.
pub(crate) fn slicing_axis(grid: Dim3) -> Axis {
    let mut best = Axis::X;
    for a in [Axis::Y, Axis::Z] {
        if grid.get(a) > grid.get(best) {
            best = a;
        }
    }
    best
}

pub fn slice_kernel(k: &KernelDef, fraction: SliceFraction) -> Result<SlicedPlan, TransformError> {
    refuse_dependent(k)?;
    let base_kernel = add_block_offset(k)?;
    let axis = slicing_axis(k.grid);
    let mut offset = 0;
    let sub_launches = slice_extents(k.grid.get(axis), fraction)
        .into_iter()
        .map(|extent| {
            let mut block_offset = Dim3::new(0, 0, 0);
            block_offset.set(axis, offset);
            let mut sub_grid = k.grid;
            sub_grid.set(axis, extent);
            offset += extent;
            SubLaunch {
                block_offset,
                sub_grid,
            }
        })
        .collect();
    Ok(SlicedPlan {
        base_kernel,
        sub_launches,
    })
}
