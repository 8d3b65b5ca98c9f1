//! Inference and training workloads, request arrivals and run metrics.

pub mod suite;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{GpuSpec, KernelCostModel, LaunchShape, Nanos, Priority, SimLaunch, Simulator, NS_PER_MS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("load must be in (0, 1), got {0}")]
    InvalidLoad(f64),
    #[error("request latency must be positive")]
    ZeroLatency,
    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error("reading trace {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("workload `{0}` has no kernels")]
    Empty(String),
    #[error("no completed requests for `{0}`")]
    NoCompletedRequests(String),
    #[error("invalid rescale factor {0}")]
    BadFactor(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    /// Serves requests; each request runs the kernel sequence once.
    Inference,
    /// Runs the kernel sequence back to back forever.
    Training,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelSpec {
    pub name: String,
    pub cost: KernelCostModel,
    /// Kernels that synchronize across blocks; never sliced or preempted.
    #[serde(default)]
    pub inter_block_dependent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    pub kind: WorkloadKind,
    pub priority: Priority,
    pub kernels: Vec<KernelSpec>,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.kernels.is_empty() {
            return Err(WorkloadError::Empty(self.name.clone()));
        }
        Ok(())
    }

    /// Completion time of one unit (request or iteration) on an idle GPU:
    /// the sum of the isolated kernel completion times.
    pub fn isolated_unit_latency(&self, gpu: &GpuSpec) -> Nanos {
        self.kernels
            .iter()
            .map(|k| isolated_kernel_latency(gpu, &k.cost))
            .sum()
    }
}

pub fn isolated_kernel_latency(gpu: &GpuSpec, cost: &KernelCostModel) -> Nanos {
    let mut sim = Simulator::new(*gpu, 0).expect("valid gpu");
    let h = sim
        .submit(
            SimLaunch {
                task: 0,
                kernel: 0,
                priority: Priority::High,
                shape: LaunchShape::Original,
                cost: *cost,
            },
            0,
        )
        .expect("kernel fits");
    sim.run_to_idle();
    sim.finished_at(h).expect("completes")
}

/// Poisson arrivals with rate `load / request_latency` over `[0, duration)`.
pub fn generate_arrivals(
    load: f64,
    request_latency: Nanos,
    duration: Nanos,
    seed: u64,
) -> Result<Vec<Nanos>, WorkloadError> {
    if !(load > 0.0 && load < 1.0) {
        return Err(WorkloadError::InvalidLoad(load));
    }
    if request_latency == 0 {
        return Err(WorkloadError::ZeroLatency);
    }
    let exp = Exp::new(load / request_latency as f64).expect("positive rate");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0f64;
    let mut out = Vec::new();
    loop {
        t += exp.sample(&mut rng);
        if t >= duration as f64 {
            return Ok(out);
        }
        out.push(t.round() as Nanos);
    }
}

/// Parses one non-negative millisecond timestamp per line.
pub fn parse_trace(text: &str) -> Result<Vec<Nanos>, WorkloadError> {
    let mut out: Vec<Nanos> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| WorkloadError::Trace { line: i + 1, msg };
        let ms: f64 = line
            .parse()
            .map_err(|_| err(format!("not a number: `{line}`")))?;
        if !ms.is_finite() || ms < 0.0 {
            return Err(err(format!("timestamp must be non-negative, got {line}")));
        }
        let t = (ms * NS_PER_MS as f64).round() as Nanos;
        if out.last().is_some_and(|&prev| t < prev) {
            return Err(err("timestamps must be non-decreasing".into()));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Vec<Nanos>, WorkloadError> {
    let text = std::fs::read_to_string(path).map_err(|e| WorkloadError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_trace(&text)
}

/// Stretches (`factor > 1`) or compresses a trace in time.
pub fn rescale(trace: &[Nanos], factor: f64) -> Result<Vec<Nanos>, WorkloadError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(WorkloadError::BadFactor(factor));
    }
    Ok(trace
        .iter()
        .map(|&t| (t as f64 * factor).round() as Nanos)
        .collect())
}

/// Fraction of `[0, span)` a FIFO server with fixed service time is busy.
pub fn busy_fraction(arrivals: &[Nanos], service: Nanos, span: Nanos) -> f64 {
    let mut free_at = 0;
    let mut busy = 0u128;
    for &a in arrivals {
        let start = a.max(free_at);
        let end = start + service;
        busy += end.min(span).saturating_sub(start.min(span)) as u128;
        free_at = end;
    }
    busy as f64 / span as f64
}

/// Time factor that makes `trace` reach `target_load` when each request
/// takes `request_latency`, measured over the trace's own span.
pub fn rescale_factor_for_load(
    trace: &[Nanos],
    request_latency: Nanos,
    target_load: f64,
) -> Result<f64, WorkloadError> {
    if !(target_load > 0.0 && target_load < 1.0) {
        return Err(WorkloadError::InvalidLoad(target_load));
    }
    let span = match (trace.first(), trace.last()) {
        (Some(a), Some(b)) if b > a => (b - a) as f64,
        _ => return Err(WorkloadError::BadFactor(0.0)),
    };
    let load = trace.len() as f64 * request_latency as f64 / span;
    Ok(load / target_load)
}

/// Nearest-rank percentile of an ascending list.
pub fn percentile_nearest_rank(sorted: &[Nanos], p: f64) -> Option<Nanos> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// One request or training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub arrival: Nanos,
    pub completion: Option<Nanos>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task: u32,
    pub name: String,
    pub kind: WorkloadKind,
    pub priority: Priority,
    pub units: Vec<UnitRecord>,
}

/// Everything the metrics need from one simulated run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub tasks: Vec<TaskOutcome>,
    /// Measurement window `[window_start, window_end)`.
    pub window_start: Nanos,
    pub window_end: Nanos,
    /// Time the run stopped; unfinished requests are censored here.
    pub stop_time: Nanos,
    pub event_count: u64,
    pub event_digest: String,
}

impl RunOutcome {
    pub fn window_secs(&self) -> f64 {
        (self.window_end - self.window_start) as f64 / 1e9
    }

    /// Units of `task` completed inside the window, per second.
    pub fn throughput(&self, task: usize) -> f64 {
        let t = &self.tasks[task];
        let done = t
            .units
            .iter()
            .filter(|u| {
                u.completion
                    .is_some_and(|c| c >= self.window_start && c < self.window_end)
            })
            .count();
        done as f64 / self.window_secs()
    }

    /// Latencies of requests arriving inside the window, ascending.
    /// Requests unfinished at `stop_time` count as finishing then.
    pub fn latencies(&self, task: usize) -> (Vec<Nanos>, usize) {
        let mut censored = 0;
        let mut out: Vec<Nanos> = self.tasks[task]
            .units
            .iter()
            .filter(|u| u.arrival >= self.window_start && u.arrival < self.window_end)
            .map(|u| match u.completion {
                Some(c) => c - u.arrival,
                None => {
                    censored += 1;
                    self.stop_time - u.arrival
                }
            })
            .collect();
        out.sort_unstable();
        (out, censored)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: u32,
    pub name: String,
    pub priority: Priority,
    pub kind: WorkloadKind,
    pub requests: usize,
    /// Requests unfinished when the run stopped (latency is a lower bound).
    pub censored: usize,
    pub p99_ms: Option<f64>,
    pub mean_ms: Option<f64>,
    pub throughput: f64,
    pub normalized_throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tasks: Vec<TaskMetrics>,
    pub system_throughput: f64,
}

/// `standalone[i]` is task i's throughput when running alone.
pub fn compute_metrics(run: &RunOutcome, standalone: &[f64]) -> Result<Metrics, WorkloadError> {
    let mut tasks = Vec::with_capacity(run.tasks.len());
    for (i, t) in run.tasks.iter().enumerate() {
        let throughput = run.throughput(i);
        let normalized = if standalone[i] > 0.0 {
            throughput / standalone[i]
        } else {
            0.0
        };
        let (p99_ms, mean_ms, requests, censored) = match t.kind {
            WorkloadKind::Inference => {
                let (lat, censored) = run.latencies(i);
                if lat.is_empty() {
                    return Err(WorkloadError::NoCompletedRequests(t.name.clone()));
                }
                let p99 = percentile_nearest_rank(&lat, 99.0).unwrap();
                let mean = lat.iter().map(|&l| l as f64).sum::<f64>() / lat.len() as f64;
                (
                    Some(p99 as f64 / NS_PER_MS as f64),
                    Some(mean / NS_PER_MS as f64),
                    lat.len(),
                    censored,
                )
            }
            WorkloadKind::Training => (None, None, 0, 0),
        };
        tasks.push(TaskMetrics {
            task: t.task,
            name: t.name.clone(),
            priority: t.priority,
            kind: t.kind,
            requests,
            censored,
            p99_ms,
            mean_ms,
            throughput,
            normalized_throughput: normalized,
        });
    }
    let system_throughput = tasks.iter().map(|t| t.normalized_throughput).sum();
    Ok(Metrics {
        tasks,
        system_throughput,
    })
}
