//! Co-location policies driving one simulated GPU.
//!
//! One high-priority task shares the GPU with best-effort tasks. Each task
//! issues its kernels in order, one in flight at a time. The driver advances
//! the simulator to the next interesting instant (simulator event, request
//! arrival or policy timer), records completions and arrivals, and lets the
//! policy submit, preempt or resume launches.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::profiler::{ConfigCandidate, ProfileError, ProfileKey, Profiler, DEFAULT_THRESHOLD};
use crate::sim::{
    GpuSpec, KernelHandle, LaunchShape, Nanos, Priority, SimError, SimEvent, SimLaunch, Simulator,
    NS_PER_MS,
};
use crate::workloads::{RunOutcome, TaskOutcome, UnitRecord, WorkloadKind, WorkloadSpec};

#[derive(Debug, Error)]
pub enum SchedError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("task {0} has arrivals but is a training task")]
    ArrivalsForTraining(usize),
    #[error("event sink: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Block-level preemption of best-effort work using transformed kernels.
    Tally,
    /// High-priority kernels go first, best-effort kernels run whole.
    KernelPriority,
    /// Everything is submitted as soon as it is ready, no priorities.
    Eager,
    /// Tasks take turns holding the GPU for a fixed quantum.
    TimeSliced,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Tally,
        Policy::KernelPriority,
        Policy::Eager,
        Policy::TimeSliced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Tally => "tally",
            Policy::KernelPriority => "kernel-priority",
            Policy::Eager => "eager",
            Policy::TimeSliced => "time-sliced",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (expected tally, kernel-priority, eager or time-sliced)"))
    }
}

pub const DEFAULT_QUANTUM: Nanos = 2 * NS_PER_MS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub policy: Policy,
    /// Turnaround budget handed to the profiler (Tally).
    pub threshold: Nanos,
    /// Slice length (TimeSliced).
    pub quantum: Nanos,
}

impl SchedulerConfig {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            threshold: DEFAULT_THRESHOLD,
            quantum: DEFAULT_QUANTUM,
        }
    }
}

/// A task and, for inference, its request arrival times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskScript {
    pub spec: WorkloadSpec,
    pub arrivals: Vec<Nanos>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub gpu: GpuSpec,
    pub tasks: Vec<TaskScript>,
    /// Arrivals stop here; throughput is measured up to here.
    pub duration: Nanos,
    /// Start of the measurement window.
    pub warmup: Nanos,
    /// How long past `duration` to wait for outstanding requests.
    pub drain_limit: Nanos,
    pub placement_seed: u64,
}

impl Scenario {
    /// Warm-up of 10% of `duration` and a drain limit of one more `duration`.
    pub fn new(gpu: GpuSpec, tasks: Vec<TaskScript>, duration: Nanos, placement_seed: u64) -> Self {
        Self {
            gpu,
            tasks,
            duration,
            warmup: duration / 10,
            drain_limit: duration,
            placement_seed,
        }
    }
}

/// Receives every simulator event in order.
pub trait EventSink {
    fn record(&mut self, event: &SimEvent) -> Result<(), SchedError>;
}

pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _: &SimEvent) -> Result<(), SchedError> {
        Ok(())
    }
}

impl EventSink for Vec<SimEvent> {
    fn record(&mut self, event: &SimEvent) -> Result<(), SchedError> {
        self.push(*event);
        Ok(())
    }
}

/// Writes the event log as CSV.
pub struct CsvSink<W: Write> {
    out: W,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W) -> Result<Self, SchedError> {
        writeln!(out, "{}", SimEvent::CSV_HEADER).map_err(|e| SchedError::Sink(e.to_string()))?;
        Ok(Self { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> EventSink for CsvSink<W> {
    fn record(&mut self, event: &SimEvent) -> Result<(), SchedError> {
        writeln!(self.out, "{event}").map_err(|e| SchedError::Sink(e.to_string()))
    }
}

/// SHA-256 over the CSV rendering of the log (header included).
pub struct LogDigest {
    hasher: Sha256,
    buf: String,
    count: u64,
}

impl Default for LogDigest {
    fn default() -> Self {
        let mut hasher = Sha256::new();
        hasher.update(SimEvent::CSV_HEADER.as_bytes());
        hasher.update(b"\n");
        Self {
            hasher,
            buf: String::with_capacity(64),
            count: 0,
        }
    }
}

impl LogDigest {
    pub fn add(&mut self, e: &SimEvent) {
        use std::fmt::Write as _;
        self.buf.clear();
        let _ = writeln!(self.buf, "{e}");
        self.hasher.update(self.buf.as_bytes());
        self.count += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

/// Kernel instance id shared by the event log and the driver.
pub fn kernel_id(unit: u64, position: usize) -> u64 {
    (unit << 16) | position as u64
}

pub fn kernel_position(id: u64) -> usize {
    (id & 0xffff) as usize
}

/// Launch configuration chosen for a best-effort kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub candidate: ConfigCandidate,
    pub turnaround_estimate: Nanos,
}

/// One preemption of a best-effort launch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreemptRecord {
    pub task: u32,
    pub kernel: u64,
    pub signaled: Nanos,
    pub drained: Option<Nanos>,
    pub choice: Choice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRun {
    pub outcome: RunOutcome,
    /// `(submit time, kernel id)` of every high-priority kernel.
    pub hp_submissions: Vec<(Nanos, u64)>,
    pub preemptions: Vec<PreemptRecord>,
    /// Per task, per kernel position (Tally best-effort tasks only).
    pub choices: Vec<Vec<Option<Choice>>>,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    handle: KernelHandle,
    signaled: bool,
}

#[derive(Debug)]
struct TaskState {
    priority: Priority,
    kind: WorkloadKind,
    next_arrival: usize,
    units: Vec<UnitRecord>,
    backlog: VecDeque<usize>,
    /// Unit in progress and the position of its next or running kernel.
    current: Option<(usize, usize)>,
    running: Option<InFlight>,
    choices: Vec<Option<Choice>>,
}

impl TaskState {
    fn ready(&self) -> bool {
        self.current.is_some() && self.running.is_none()
    }

    fn active(&self) -> bool {
        self.current.is_some() || !self.backlog.is_empty()
    }
}

struct Driver<'a> {
    cfg: SchedulerConfig,
    sc: &'a Scenario,
    sim: Simulator,
    tasks: Vec<TaskState>,
    now: Nanos,
    rr: usize,
    slice_owner: Option<usize>,
    slice_end: Nanos,
    hp_submissions: Vec<(Nanos, u64)>,
    /// Signaled launches whose preemptions are not yet harvested.
    signaled: Vec<(u32, KernelHandle, u64, Choice)>,
    preemptions: Vec<PreemptRecord>,
    /// High-priority requests arrived before `duration` and not completed.
    hp_outstanding: usize,
}

/// Runs one policy over a scenario. Events go to `sink` in order.
pub fn run_policy(
    cfg: &SchedulerConfig,
    sc: &Scenario,
    profiler: &mut Profiler,
    sink: &mut dyn EventSink,
) -> Result<PolicyRun, SchedError> {
    let mut tasks = Vec::with_capacity(sc.tasks.len());
    for (i, t) in sc.tasks.iter().enumerate() {
        if t.spec.kind == WorkloadKind::Training && !t.arrivals.is_empty() {
            return Err(SchedError::ArrivalsForTraining(i));
        }
        let mut choices = vec![None; t.spec.kernels.len()];
        if cfg.policy == Policy::Tally && t.spec.priority == Priority::BestEffort {
            for (pos, k) in t.spec.kernels.iter().enumerate() {
                choices[pos] = Some(if k.inter_block_dependent {
                    Choice {
                        candidate: ConfigCandidate::Original,
                        turnaround_estimate: Nanos::MAX,
                    }
                } else {
                    let key = ProfileKey::linear(k.name.clone(), &k.cost);
                    let candidate = profiler.select(&key, &k.cost, cfg.threshold)?;
                    let est = profiler
                        .cached(&key)
                        .and_then(|r| r.iter().find(|r| r.candidate == candidate))
                        .map_or(Nanos::MAX, |r| r.turnaround_estimate);
                    log::debug!("{} {}: {candidate} (estimate {est} ns)", t.spec.name, k.name);
                    Choice {
                        candidate,
                        turnaround_estimate: est,
                    }
                });
            }
        }
        let mut st = TaskState {
            priority: t.spec.priority,
            kind: t.spec.kind,
            next_arrival: 0,
            units: Vec::new(),
            backlog: VecDeque::new(),
            current: None,
            running: None,
            choices,
        };
        if st.kind == WorkloadKind::Training {
            st.units.push(UnitRecord {
                arrival: 0,
                completion: None,
            });
            st.current = Some((0, 0));
        }
        tasks.push(st);
    }
    let mut d = Driver {
        cfg: *cfg,
        sc,
        sim: Simulator::new(sc.gpu, sc.placement_seed)?,
        tasks,
        now: 0,
        rr: 0,
        slice_owner: None,
        slice_end: 0,
        hp_submissions: Vec::new(),
        signaled: Vec::new(),
        preemptions: Vec::new(),
        hp_outstanding: 0,
    };
    let mut digest = LogDigest::default();
    d.run(sink, &mut digest)?;
    Ok(d.finish(digest))
}

impl Driver<'_> {
    fn run(&mut self, sink: &mut dyn EventSink, digest: &mut LogDigest) -> Result<(), SchedError> {
        let end = self.sc.duration;
        let hard_stop = end.saturating_add(self.sc.drain_limit);
        // arrivals at time zero
        self.arrivals();
        self.tick()?;
        self.flush(sink, digest)?;
        loop {
            let mut next = self.sim.next_event_time();
            let mut consider = |t: Option<Nanos>| {
                if let Some(t) = t {
                    next = Some(next.map_or(t, |n| n.min(t)));
                }
            };
            consider(self.next_arrival());
            if self.slice_owner.is_some() {
                consider(Some(self.slice_end.max(self.now)));
            }
            let Some(t) = next else { break };
            let limit = if self.hp_outstanding > 0 { hard_stop } else { end };
            if t > limit {
                self.now = self.now.max(limit);
                break;
            }
            for e in self.sim.run_until(t) {
                digest.add(&e);
                sink.record(&e)?;
            }
            self.now = t;
            self.completions();
            self.arrivals();
            self.tick()?;
            self.flush(sink, digest)?;
            if self.now >= end && self.hp_outstanding == 0 {
                break;
            }
        }
        if self.hp_outstanding > 0 {
            log::info!(
                "stopping with {} high-priority requests unfinished; their latency is censored at {} ns",
                self.hp_outstanding,
                self.now
            );
        }
        Ok(())
    }

    /// Events emitted by submissions made outside `run_until`.
    fn flush(&mut self, sink: &mut dyn EventSink, digest: &mut LogDigest) -> Result<(), SchedError> {
        for e in self.sim.take_events() {
            digest.add(&e);
            sink.record(&e)?;
        }
        Ok(())
    }

    fn next_arrival(&self) -> Option<Nanos> {
        self.sc
            .tasks
            .iter()
            .zip(&self.tasks)
            .filter_map(|(s, t)| s.arrivals.get(t.next_arrival).copied())
            .filter(|&a| a < self.sc.duration)
            .min()
    }

    fn arrivals(&mut self) {
        for (i, t) in self.tasks.iter_mut().enumerate() {
            let arrivals = &self.sc.tasks[i].arrivals;
            while let Some(&a) = arrivals.get(t.next_arrival) {
                if a > self.now || a >= self.sc.duration {
                    break;
                }
                t.next_arrival += 1;
                t.units.push(UnitRecord {
                    arrival: a,
                    completion: None,
                });
                if t.priority == Priority::High {
                    self.hp_outstanding += 1;
                }
                let unit = t.units.len() - 1;
                if t.current.is_none() {
                    t.current = Some((unit, 0));
                } else {
                    t.backlog.push_back(unit);
                }
            }
        }
    }

    fn completions(&mut self) {
        for (i, t) in self.tasks.iter_mut().enumerate() {
            let Some(run) = t.running else { continue };
            if !self.sim.is_finished(run.handle) {
                continue;
            }
            t.running = None;
            if run.signaled || self.signaled.iter().any(|s| s.1 == run.handle) {
                harvest(&self.sim, &mut self.signaled, &mut self.preemptions, run.handle);
            }
            self.sim.release(run.handle);
            let (unit, pos) = t.current.expect("running kernel has a unit");
            if pos + 1 < self.sc.tasks[i].spec.kernels.len() {
                t.current = Some((unit, pos + 1));
                continue;
            }
            t.units[unit].completion = Some(self.now);
            if t.priority == Priority::High && t.kind == WorkloadKind::Inference {
                self.hp_outstanding -= 1;
            }
            t.current = match t.kind {
                WorkloadKind::Inference => t.backlog.pop_front().map(|u| (u, 0)),
                WorkloadKind::Training => {
                    t.units.push(UnitRecord {
                        arrival: self.now,
                        completion: None,
                    });
                    Some((t.units.len() - 1, 0))
                }
            };
        }
    }

    fn hp_active(&self) -> bool {
        self.tasks
            .iter()
            .any(|t| t.priority == Priority::High && t.active())
    }

    fn submit(&mut self, task: usize, priority: Priority, candidate: ConfigCandidate) -> Result<(), SchedError> {
        let (unit, pos) = self.tasks[task].current.expect("ready task");
        let k = &self.sc.tasks[task].spec.kernels[pos];
        let id = kernel_id(unit as u64, pos);
        let handle = self.sim.submit(
            SimLaunch {
                task: task as u32,
                kernel: id,
                priority,
                shape: candidate.shape(k.cost.total_blocks),
                cost: k.cost,
            },
            self.now,
        )?;
        if self.tasks[task].priority == Priority::High {
            self.hp_submissions.push((self.now, id));
        }
        self.tasks[task].running = Some(InFlight {
            handle,
            signaled: false,
        });
        Ok(())
    }

    /// Best-effort task indices starting from the round-robin cursor.
    fn be_order(&self) -> Vec<usize> {
        let n = self.tasks.len();
        (0..n)
            .map(|i| (self.rr + i) % n)
            .filter(|&i| self.tasks[i].priority == Priority::BestEffort)
            .collect()
    }

    fn tick(&mut self) -> Result<(), SchedError> {
        match self.cfg.policy {
            Policy::Tally => self.tick_tally(),
            Policy::KernelPriority => self.tick_kernel_priority(),
            Policy::Eager => self.tick_eager(),
            Policy::TimeSliced => self.tick_time_sliced(),
        }
    }

    fn tick_tally(&mut self) -> Result<(), SchedError> {
        for i in 0..self.tasks.len() {
            if self.tasks[i].priority == Priority::High && self.tasks[i].ready() {
                self.submit(i, Priority::High, ConfigCandidate::Original)?;
                self.preempt_best_effort()?;
            }
        }
        if self.hp_active() {
            return Ok(());
        }
        let mut any = false;
        for i in self.be_order() {
            match (self.tasks[i].running, self.tasks[i].current) {
                (Some(run), _) if run.signaled => {
                    self.sim.resume(run.handle, self.now)?;
                    self.tasks[i].running = Some(InFlight {
                        signaled: false,
                        ..run
                    });
                    any = true;
                }
                (None, Some((_, pos))) => {
                    let choice = self.tasks[i].choices[pos].expect("profiled");
                    self.submit(i, Priority::BestEffort, choice.candidate)?;
                    any = true;
                }
                _ => {}
            }
        }
        if any {
            self.rr = (self.rr + 1) % self.tasks.len();
        }
        Ok(())
    }

    fn preempt_best_effort(&mut self) -> Result<(), SchedError> {
        for i in 0..self.tasks.len() {
            let t = &mut self.tasks[i];
            if t.priority != Priority::BestEffort {
                continue;
            }
            let Some(run) = t.running else { continue };
            if run.signaled || self.sim.is_finished(run.handle) {
                continue;
            }
            let launch = self.sim.launch(run.handle)?;
            if matches!(launch.shape, LaunchShape::Original) {
                // exempt kernels run whole
                continue;
            }
            let kernel = launch.kernel;
            self.sim.signal_preempt(run.handle)?;
            t.running = Some(InFlight {
                signaled: true,
                ..run
            });
            let choice = t.choices[kernel_position(kernel)].expect("profiled");
            if !self.signaled.iter().any(|s| s.1 == run.handle) {
                self.signaled.push((i as u32, run.handle, kernel, choice));
            }
        }
        Ok(())
    }

    fn tick_kernel_priority(&mut self) -> Result<(), SchedError> {
        for i in 0..self.tasks.len() {
            if self.tasks[i].priority == Priority::High && self.tasks[i].ready() {
                // same dispatch class: queued behind launches already issued
                self.submit(i, Priority::BestEffort, ConfigCandidate::Original)?;
            }
        }
        if self.hp_active() {
            return Ok(());
        }
        let mut any = false;
        for i in self.be_order() {
            if self.tasks[i].ready() {
                self.submit(i, Priority::BestEffort, ConfigCandidate::Original)?;
                any = true;
            }
        }
        if any {
            self.rr = (self.rr + 1) % self.tasks.len();
        }
        Ok(())
    }

    fn tick_eager(&mut self) -> Result<(), SchedError> {
        for i in 0..self.tasks.len() {
            if self.tasks[i].ready() {
                self.submit(i, Priority::BestEffort, ConfigCandidate::Original)?;
            }
        }
        Ok(())
    }

    fn tick_time_sliced(&mut self) -> Result<(), SchedError> {
        let n = self.tasks.len();
        let has_work = |t: &TaskState| t.current.is_some();
        let owner_busy = self.slice_owner.is_some_and(|o| has_work(&self.tasks[o]));
        if !owner_busy || self.now >= self.slice_end {
            let start = self.slice_owner.map_or(0, |o| o + 1);
            let next = (0..n)
                .map(|i| (start + i) % n)
                .find(|&i| has_work(&self.tasks[i]));
            if next != self.slice_owner || self.now >= self.slice_end {
                self.slice_end = self.now + self.cfg.quantum;
            }
            if next != self.slice_owner {
                self.slice_owner = next;
                self.sim.set_dispatch_gate(next.map(|o| o as u32));
            }
        }
        for i in 0..n {
            if self.tasks[i].ready() {
                self.submit(i, Priority::BestEffort, ConfigCandidate::Original)?;
            }
        }
        Ok(())
    }

    fn finish(mut self, digest: LogDigest) -> PolicyRun {
        while let Some(&(_, h, _, _)) = self.signaled.first() {
            harvest(&self.sim, &mut self.signaled, &mut self.preemptions, h);
        }
        let choices = self.tasks.iter().map(|t| t.choices.clone()).collect();
        let tasks = self
            .sc
            .tasks
            .iter()
            .zip(self.tasks)
            .enumerate()
            .map(|(i, (s, t))| TaskOutcome {
                task: i as u32,
                name: s.spec.name.clone(),
                kind: s.spec.kind,
                priority: s.spec.priority,
                units: t.units,
            })
            .collect();
        PolicyRun {
            outcome: RunOutcome {
                tasks,
                window_start: self.sc.warmup,
                window_end: self.sc.duration,
                stop_time: self.now.max(self.sc.duration),
                event_count: digest.count(),
                event_digest: digest.finish(),
            },
            hp_submissions: self.hp_submissions,
            preemptions: self.preemptions,
            choices,
        }
    }
}

fn harvest(
    sim: &Simulator,
    pending: &mut Vec<(u32, KernelHandle, u64, Choice)>,
    out: &mut Vec<PreemptRecord>,
    h: KernelHandle,
) {
    let Some(i) = pending.iter().position(|s| s.1 == h) else {
        return;
    };
    let (task, _, kernel, choice) = pending.remove(i);
    for (signaled, drained) in sim.preemptions(h).unwrap_or_default() {
        out.push(PreemptRecord {
            task,
            kernel,
            signaled,
            drained,
            choice,
        });
    }
}
