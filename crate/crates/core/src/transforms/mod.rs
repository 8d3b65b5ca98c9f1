//! Device-code rewrites that make kernels schedulable at block granularity.
//!
//! * [`add_block_offset`] / [`slice_kernel`]: launch a grid as a sequence of
//!   smaller sub-grids whose threads still observe their original block index.
//! * [`unify_synchronization`]: funnel every barrier and return through one
//!   synchronization block so a block's threads leave together.
//! * [`make_preemptible`]: persistent-thread-block form in which a few worker
//!   blocks claim original block indices from a global counter and stop when
//!   a preemption flag is raised.

mod ptb;
mod slice;
mod unify;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{IrError, KernelDef};

pub use ptb::{make_preemptible, make_preemptible_unchecked, PtbControl, PtbKernelDef};
pub use slice::{add_block_offset, slice_extents, slice_kernel, SlicedPlan, SubLaunch, OFFSET_PARAMS};
pub use unify::{is_unified, unify_synchronization, USYNC_ENTRY};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransformError {
    #[error("kernel `{0}` is inter-block dependent; block-level transformations refused")]
    InterBlockDependent(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("kernel already declares parameter `{0}`")]
    ParamClash(String),
    #[error("invalid slice fraction {0}")]
    BadFraction(String),
    #[error(transparent)]
    Invalid(#[from] IrError),
}

pub(crate) fn refuse_dependent(k: &KernelDef) -> Result<(), TransformError> {
    if k.inter_block_dependent {
        Err(TransformError::InterBlockDependent(k.name.clone()))
    } else {
        Ok(())
    }
}

pub(crate) fn append_params(k: &mut KernelDef, names: &[&str]) -> Result<(), TransformError> {
    for n in names {
        if k.params.iter().any(|p| p == n) {
            return Err(TransformError::ParamClash(n.to_string()));
        }
    }
    k.params.extend(names.iter().map(|n| n.to_string()));
    Ok(())
}

/// Hands out label names that do not collide with the kernel's own.
pub(crate) struct LabelPool {
    taken: HashSet<String>,
}

impl LabelPool {
    pub(crate) fn new(k: &KernelDef) -> Self {
        Self {
            taken: k.body.iter().filter_map(|s| s.label.clone()).collect(),
        }
    }

    pub(crate) fn fresh(&mut self, stem: &str) -> String {
        let mut name = stem.to_string();
        let mut n = 1;
        while self.taken.contains(&name) {
            name = format!("{stem}_{n}");
            n += 1;
        }
        self.taken.insert(name.clone());
        name
    }
}

/// A slice size expressed as a fraction of the grid, in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SliceFraction {
    num: u32,
    den: u32,
}

impl SliceFraction {
    pub const ONE: SliceFraction = SliceFraction { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self, TransformError> {
        if num == 0 || den == 0 || num > den {
            return Err(TransformError::BadFraction(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn reciprocal(den: u32) -> Result<Self, TransformError> {
        Self::new(1, den)
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `max(1, round(fraction * len))`, rounding halves up, capped at `len`.
    pub fn extent_of(&self, len: u32) -> u32 {
        let scaled = (2 * self.num as u64 * len as u64 + self.den as u64) / (2 * self.den as u64);
        scaled.clamp(1, len.max(1) as u64) as u32
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl fmt::Display for SliceFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for SliceFraction {
    type Err = TransformError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TransformError::BadFraction(s.to_string());
        let (n, d) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        Self::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

impl TryFrom<String> for SliceFraction {
    type Error = TransformError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SliceFraction> for String {
    fn from(f: SliceFraction) -> Self {
        f.to_string()
    }
}
