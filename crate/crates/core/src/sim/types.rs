use std::fmt;

use serde::{Deserialize, Serialize};

use super::SimError;

pub type Nanos = u64;

pub const NS_PER_US: Nanos = 1_000;
pub const NS_PER_MS: Nanos = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    pub num_sms: u32,
    pub max_threads_per_sm: u32,
    pub max_blocks_per_sm: u32,
}

impl GpuSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.num_sms == 0 || self.max_threads_per_sm == 0 || self.max_blocks_per_sm == 0 {
            return Err(SimError::InvalidGpu(format!(
                "all fields must be at least 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Resident blocks per SM for a kernel with `threads_per_block` threads.
    pub fn blocks_per_sm_for(&self, threads_per_block: u32) -> u32 {
        if threads_per_block == 0 {
            return 0;
        }
        self.max_blocks_per_sm
            .min(self.max_threads_per_sm / threads_per_block)
    }

    /// Resident blocks across the whole GPU.
    pub fn total_slots_for(&self, threads_per_block: u32) -> u64 {
        self.blocks_per_sm_for(threads_per_block) as u64 * self.num_sms as u64
    }
}

/// Timing of one kernel. All durations are nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelCostModel {
    pub block_duration: Nanos,
    pub launch_overhead: Nanos,
    pub ptb_iteration_overhead: Nanos,
    pub threads_per_block: u32,
    pub total_blocks: u64,
}

impl KernelCostModel {
    pub const DEFAULT_LAUNCH_OVERHEAD: Nanos = 5 * NS_PER_US;

    /// 2% of the block duration plus 1 µs.
    pub fn default_iteration_overhead(block_duration: Nanos) -> Nanos {
        block_duration / 50 + NS_PER_US
    }

    /// Cost model with the default launch and iteration overheads.
    pub fn with_defaults(block_duration: Nanos, threads_per_block: u32, total_blocks: u64) -> Self {
        Self {
            block_duration,
            launch_overhead: Self::DEFAULT_LAUNCH_OVERHEAD,
            ptb_iteration_overhead: Self::default_iteration_overhead(block_duration),
            threads_per_block,
            total_blocks,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.total_blocks == 0 {
            return Err(SimError::InvalidLaunch("total_blocks must be at least 1".into()));
        }
        if self.threads_per_block == 0 {
            return Err(SimError::InvalidLaunch("threads_per_block must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Priority {
    High,
    BestEffort,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LaunchShape {
    Original,
    /// Block counts of consecutive slices, issued one at a time.
    Sliced(Vec<u64>),
    /// `workers` persistent blocks claiming tasks from a counter that starts
    /// at `start_counter`.
    Ptb { workers: u32, start_counter: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimLaunch {
    pub task: u32,
    /// Caller-chosen kernel instance id, echoed in events.
    pub kernel: u64,
    pub priority: Priority,
    pub shape: LaunchShape,
    pub cost: KernelCostModel,
}

impl SimLaunch {
    pub fn validate(&self) -> Result<(), SimError> {
        self.cost.validate()?;
        match &self.shape {
            LaunchShape::Original => Ok(()),
            LaunchShape::Sliced(slices) => {
                if slices.is_empty() || slices.contains(&0) {
                    return Err(SimError::InvalidLaunch("slices must be non-empty".into()));
                }
                let sum: u64 = slices.iter().sum();
                if sum != self.cost.total_blocks {
                    return Err(SimError::InvalidLaunch(format!(
                        "slices cover {sum} blocks, kernel has {}",
                        self.cost.total_blocks
                    )));
                }
                Ok(())
            }
            LaunchShape::Ptb {
                workers,
                start_counter,
            } => {
                if *workers == 0 {
                    return Err(SimError::InvalidLaunch("ptb needs at least one worker".into()));
                }
                if *start_counter >= self.cost.total_blocks {
                    return Err(SimError::InvalidLaunch(format!(
                        "start counter {start_counter} leaves no work"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    LaunchIssued,
    BlockStarted,
    BlockFinished,
    KernelFinished,
    PreemptSignaled,
    WorkerParked,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::LaunchIssued => "LaunchIssued",
            EventKind::BlockStarted => "BlockStarted",
            EventKind::BlockFinished => "BlockFinished",
            EventKind::KernelFinished => "KernelFinished",
            EventKind::PreemptSignaled => "PreemptSignaled",
            EventKind::WorkerParked => "WorkerParked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: Nanos,
    /// Emission order; breaks ties between equal times.
    pub seq: u64,
    pub kind: EventKind,
    pub task: u32,
    pub kernel: u64,
    pub block: Option<u64>,
}

impl SimEvent {
    pub const CSV_HEADER: &'static str = "time_ns,kind,task,kernel,block";
}

/// One CSV row, without the trailing newline.
impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},", self.time, self.kind.name(), self.task, self.kernel)?;
        if let Some(b) = self.block {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}
