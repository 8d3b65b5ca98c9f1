//! Discrete-event model of a single GPU.
//!
//! Time is integer nanoseconds. Internal events are ordered by
//! `(time, sequence number)`; all events sharing a timestamp are applied
//! before any block is dispatched, so a high-priority launch that becomes
//! ready at the same instant a slot frees up gets that slot.

mod types;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use thiserror::Error;

pub use types::{
    EventKind, GpuSpec, KernelCostModel, LaunchShape, Nanos, Priority, SimEvent, SimLaunch,
    NS_PER_MS, NS_PER_US,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid gpu spec: {0}")]
    InvalidGpu(String),
    #[error("invalid launch: {0}")]
    InvalidLaunch(String),
    #[error("kernel needs {threads} threads per block but an SM holds {limit}")]
    ThreadsExceedSm { threads: u32, limit: u32 },
    #[error("time {at} ns is before simulator time {now} ns")]
    TimeInPast { at: Nanos, now: Nanos },
    #[error("unknown kernel handle {0}")]
    UnknownHandle(usize),
    #[error("kernel {0} has no completed preemption")]
    NotPreempted(usize),
    #[error("kernel {0} cannot be resumed in its current state")]
    NotResumable(usize),
}

/// Opaque reference to a submitted launch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KernelHandle(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Activate(usize),
    /// A block (or PTB iteration) on `sm` finished.
    BlockDone { h: usize, sm: usize, block: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaunchPhase {
    /// Waiting for its launch overhead to elapse.
    Issuing,
    Running,
    /// Preempted and drained; can be resumed.
    Parked,
    Finished,
}

#[derive(Debug, Clone)]
struct LaunchState {
    launch: SimLaunch,
    phase: LaunchPhase,
    blocks_finished: u64,
    /// Next original block index to hand out (Original / Sliced).
    next_block: u64,
    /// Index of the slice currently issued (Sliced).
    slice: usize,
    /// Blocks, or PTB workers, activated but not yet placed.
    unplaced: u64,
    /// Resident blocks or workers.
    resident: u64,
    /// PTB task counter, persisted across preemptions.
    counter: u64,
    flag: bool,
    signals: Vec<(Nanos, Option<Nanos>)>,
    finished_at: Option<Nanos>,
    resume_deferred: Option<Nanos>,
    /// The owner no longer needs to query this launch.
    released: bool,
}

/// Launch states indexed by handle; released finished launches at the
/// front are dropped.
#[derive(Debug, Clone, Default)]
struct LaunchTable {
    base: usize,
    items: VecDeque<LaunchState>,
}

impl LaunchTable {
    fn len(&self) -> usize {
        self.base + self.items.len()
    }

    fn push(&mut self, st: LaunchState) {
        self.items.push_back(st);
    }

    fn get(&self, h: usize) -> Option<&LaunchState> {
        h.checked_sub(self.base).and_then(|i| self.items.get(i))
    }

    fn get_mut(&mut self, h: usize) -> Option<&mut LaunchState> {
        h.checked_sub(self.base).and_then(|i| self.items.get_mut(i))
    }

    fn retire(&mut self) {
        while self
            .items
            .front()
            .is_some_and(|s| s.released && s.phase == LaunchPhase::Finished)
        {
            self.items.pop_front();
            self.base += 1;
        }
    }
}

impl std::ops::Index<usize> for LaunchTable {
    type Output = LaunchState;
    fn index(&self, h: usize) -> &LaunchState {
        &self.items[h - self.base]
    }
}

impl std::ops::IndexMut<usize> for LaunchTable {
    fn index_mut(&mut self, h: usize) -> &mut LaunchState {
        &mut self.items[h - self.base]
    }
}

impl LaunchState {
    fn open_signal(&self) -> bool {
        matches!(self.signals.last(), Some((_, None)))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SmState {
    threads: u32,
    blocks: u32,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    gpu: GpuSpec,
    now: Nanos,
    seq: u64,
    queue: BinaryHeap<Reverse<(Nanos, u64, Action)>>,
    launches: LaunchTable,
    sms: Vec<SmState>,
    rr: usize,
    /// Handles awaiting placement, in activation order.
    ready: VecDeque<usize>,
    gate: Option<u32>,
    out: Vec<SimEvent>,
    event_seq: u64,
}

impl Simulator {
    /// `placement_seed` picks the SM where round-robin placement starts.
    pub fn new(gpu: GpuSpec, placement_seed: u64) -> Result<Self, SimError> {
        gpu.validate()?;
        Ok(Self {
            gpu,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            launches: LaunchTable::default(),
            sms: vec![SmState::default(); gpu.num_sms as usize],
            rr: (placement_seed % gpu.num_sms as u64) as usize,
            ready: VecDeque::new(),
            gate: None,
            out: Vec::new(),
            event_seq: 0,
        })
    }

    pub fn gpu(&self) -> &GpuSpec {
        &self.gpu
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn submit(&mut self, launch: SimLaunch, at: Nanos) -> Result<KernelHandle, SimError> {
        self.check_time(at)?;
        launch.validate()?;
        let tpb = launch.cost.threads_per_block;
        if self.gpu.blocks_per_sm_for(tpb) == 0 {
            return Err(SimError::ThreadsExceedSm {
                threads: tpb,
                limit: self.gpu.max_threads_per_sm,
            });
        }
        let h = self.launches.len();
        let overhead = launch.cost.launch_overhead;
        let counter = match launch.shape {
            LaunchShape::Ptb { start_counter, .. } => start_counter,
            _ => 0,
        };
        self.launches.push(LaunchState {
            launch,
            phase: LaunchPhase::Issuing,
            blocks_finished: 0,
            next_block: 0,
            slice: 0,
            unplaced: 0,
            resident: 0,
            counter,
            flag: false,
            signals: Vec::new(),
            finished_at: None,
            resume_deferred: None,
            released: false,
        });
        self.schedule(at + overhead, Action::Activate(h));
        Ok(KernelHandle(h))
    }

    /// Raises the preemption signal of `h` at the current time.
    ///
    /// PTB workers park at their next iteration boundary; a sliced launch
    /// issues no further slices once the in-flight one completes; an
    /// original launch runs to completion. The launch is drained once it
    /// holds no more GPU resources.
    pub fn signal_preempt(&mut self, h: KernelHandle) -> Result<(), SimError> {
        let now = self.now;
        let st = self.state_mut(h)?;
        if st.flag {
            // still draining: a pending resume is called off
            st.resume_deferred = None;
            return Ok(());
        }
        if matches!(st.phase, LaunchPhase::Finished | LaunchPhase::Parked) {
            return Ok(());
        }
        st.flag = true;
        st.signals.push((now, None));
        let (task, kernel) = (st.launch.task, st.launch.kernel);
        self.emit(EventKind::PreemptSignaled, task, kernel, None);
        let st = &mut self.launches[h.0];
        if matches!(st.launch.shape, LaunchShape::Ptb { .. }) && st.phase == LaunchPhase::Running {
            // unplaced workers never start
            let parked = st.unplaced;
            st.unplaced = 0;
            self.ready.retain(|&r| r != h.0);
            for _ in 0..parked {
                self.emit(EventKind::WorkerParked, task, kernel, None);
            }
            self.maybe_settle(h.0);
        }
        Ok(())
    }

    /// Clears the preemption signal and relaunches a drained launch at `at`.
    /// A launch that is still draining resumes as soon as it has drained; a
    /// finished one is left alone.
    pub fn resume(&mut self, h: KernelHandle, at: Nanos) -> Result<(), SimError> {
        self.check_time(at)?;
        let st = self.state_mut(h)?;
        match st.phase {
            LaunchPhase::Parked => {
                st.flag = false;
                st.phase = LaunchPhase::Issuing;
                let overhead = st.launch.cost.launch_overhead;
                self.schedule(at + overhead, Action::Activate(h.0));
                Ok(())
            }
            LaunchPhase::Issuing | LaunchPhase::Running if st.flag => {
                st.resume_deferred = Some(at);
                Ok(())
            }
            LaunchPhase::Finished => Ok(()),
            _ => Err(SimError::NotResumable(h.0)),
        }
    }

    /// Restricts new block placement to launches of `task`; `None` lifts the
    /// restriction. Resident blocks are unaffected.
    pub fn set_dispatch_gate(&mut self, task: Option<u32>) {
        self.gate = task;
        self.dispatch();
    }

    pub fn phase(&self, h: KernelHandle) -> Result<LaunchPhase, SimError> {
        Ok(self.state(h)?.phase)
    }

    pub fn is_finished(&self, h: KernelHandle) -> bool {
        h.0 < self.launches.base
            || self
                .launches
                .get(h.0)
                .is_some_and(|s| s.phase == LaunchPhase::Finished)
    }

    /// Declares that `h` will not be queried again; once finished its state
    /// may be dropped. Later queries on `h` report `UnknownHandle`.
    pub fn release(&mut self, h: KernelHandle) {
        if let Some(st) = self.launches.get_mut(h.0) {
            st.released = true;
        }
        self.launches.retire();
    }

    pub fn finished_at(&self, h: KernelHandle) -> Option<Nanos> {
        self.launches.get(h.0).and_then(|s| s.finished_at)
    }

    pub fn blocks_finished(&self, h: KernelHandle) -> Result<u64, SimError> {
        Ok(self.state(h)?.blocks_finished)
    }

    /// PTB task counter (number of task indices claimed so far).
    pub fn task_counter(&self, h: KernelHandle) -> Result<u64, SimError> {
        Ok(self.state(h)?.counter)
    }

    pub fn launch(&self, h: KernelHandle) -> Result<&SimLaunch, SimError> {
        Ok(&self.state(h)?.launch)
    }

    /// Drain time of the most recent completed preemption of `h`.
    pub fn measured_turnaround(&self, h: KernelHandle) -> Result<Nanos, SimError> {
        self.state(h)?
            .signals
            .iter()
            .rev()
            .find_map(|(s, d)| d.map(|d| d - s))
            .ok_or(SimError::NotPreempted(h.0))
    }

    /// Every `(signal, drained)` pair recorded for `h`.
    pub fn preemptions(&self, h: KernelHandle) -> Result<Vec<(Nanos, Option<Nanos>)>, SimError> {
        Ok(self.state(h)?.signals.clone())
    }

    pub fn next_event_time(&self) -> Option<Nanos> {
        self.queue.peek().map(|Reverse((t, _, _))| *t)
    }

    /// Resident blocks per SM (for occupancy checks).
    pub fn resident_blocks(&self) -> Vec<u32> {
        self.sms.iter().map(|s| s.blocks).collect()
    }

    /// Processes every event with time ≤ `t`, then sets the clock to `t`.
    /// Returns the events emitted since the previous call.
    pub fn run_until(&mut self, t: Nanos) -> Vec<SimEvent> {
        self.launches.retire();
        while let Some(next) = self.next_event_time() {
            if next > t {
                break;
            }
            self.now = next;
            while self.next_event_time() == Some(next) {
                let Reverse((_, _, action)) = self.queue.pop().unwrap();
                self.apply(action);
            }
            self.dispatch();
        }
        self.now = self.now.max(t);
        std::mem::take(&mut self.out)
    }

    /// Events emitted since the last call without advancing time.
    pub fn take_events(&mut self) -> Vec<SimEvent> {
        std::mem::take(&mut self.out)
    }

    /// Runs until the event queue is empty.
    pub fn run_to_idle(&mut self) -> Vec<SimEvent> {
        let mut events = Vec::new();
        while let Some(t) = self.next_event_time() {
            events.extend(self.run_until(t));
        }
        events.extend(std::mem::take(&mut self.out));
        events
    }

    fn check_time(&self, at: Nanos) -> Result<(), SimError> {
        if at < self.now {
            Err(SimError::TimeInPast { at, now: self.now })
        } else {
            Ok(())
        }
    }

    fn state(&self, h: KernelHandle) -> Result<&LaunchState, SimError> {
        self.launches.get(h.0).ok_or(SimError::UnknownHandle(h.0))
    }

    fn state_mut(&mut self, h: KernelHandle) -> Result<&mut LaunchState, SimError> {
        self.launches.get_mut(h.0).ok_or(SimError::UnknownHandle(h.0))
    }

    fn schedule(&mut self, at: Nanos, action: Action) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq, action)));
    }

    fn emit(&mut self, kind: EventKind, task: u32, kernel: u64, block: Option<u64>) {
        self.event_seq += 1;
        self.out.push(SimEvent {
            time: self.now,
            seq: self.event_seq,
            kind,
            task,
            kernel,
            block,
        });
    }

    fn apply(&mut self, action: Action) {
        match action {
            Action::Activate(h) => self.activate(h),
            Action::BlockDone { h, sm, block } => self.block_done(h, sm, block),
        }
    }

    fn activate(&mut self, h: usize) {
        let st = &mut self.launches[h];
        let (task, kernel) = (st.launch.task, st.launch.kernel);
        st.phase = LaunchPhase::Running;
        let count = match &st.launch.shape {
            LaunchShape::Original => st.launch.cost.total_blocks,
            LaunchShape::Sliced(slices) => slices[st.slice],
            LaunchShape::Ptb { workers, .. } => *workers as u64,
        };
        self.emit(EventKind::LaunchIssued, task, kernel, None);
        let st = &mut self.launches[h];
        if st.flag && matches!(st.launch.shape, LaunchShape::Ptb { .. }) {
            for _ in 0..count {
                self.emit(EventKind::WorkerParked, task, kernel, None);
            }
            self.maybe_settle(h);
            return;
        }
        st.unplaced = count;
        self.ready.push_back(h);
    }

    fn block_done(&mut self, h: usize, sm: usize, block: u64) {
        let st = &mut self.launches[h];
        let (task, kernel) = (st.launch.task, st.launch.kernel);
        st.blocks_finished += 1;
        self.emit(EventKind::BlockFinished, task, kernel, Some(block));
        let st = &mut self.launches[h];
        if let LaunchShape::Ptb { .. } = st.launch.shape {
            // iteration boundary: the worker checks the flag, then the counter
            if st.flag {
                self.free_slot(h, sm);
                self.emit(EventKind::WorkerParked, task, kernel, None);
            } else if st.counter < st.launch.cost.total_blocks {
                self.start_ptb_task(h, sm);
                return;
            } else {
                self.free_slot(h, sm);
            }
        } else {
            self.free_slot(h, sm);
        }
        self.maybe_settle(h);
    }

    fn free_slot(&mut self, h: usize, sm: usize) {
        let tpb = self.launches[h].launch.cost.threads_per_block;
        let s = &mut self.sms[sm];
        s.blocks -= 1;
        s.threads -= tpb;
        self.launches[h].resident -= 1;
    }

    /// Called whenever a launch might have run out of resident and pending
    /// work: finishes it, issues its next slice, or records it as drained.
    fn maybe_settle(&mut self, h: usize) {
        let now = self.now;
        let st = &mut self.launches[h];
        if st.resident > 0 || st.unplaced > 0 || st.phase != LaunchPhase::Running {
            return;
        }
        let (task, kernel) = (st.launch.task, st.launch.kernel);
        let done = match st.launch.shape {
            LaunchShape::Ptb { .. } => st.counter >= st.launch.cost.total_blocks,
            _ => st.blocks_finished == st.launch.cost.total_blocks,
        };
        if done {
            st.phase = LaunchPhase::Finished;
            st.finished_at = Some(now);
            if let Some(sig) = st.signals.last_mut() {
                sig.1.get_or_insert(now);
            }
            self.emit(EventKind::KernelFinished, task, kernel, None);
            return;
        }
        if let LaunchShape::Sliced(slices) = &st.launch.shape {
            if !st.flag {
                st.slice += 1;
                debug_assert!(st.slice < slices.len());
                st.phase = LaunchPhase::Issuing;
                let overhead = st.launch.cost.launch_overhead;
                self.schedule(now + overhead, Action::Activate(h));
                return;
            }
            // the in-flight slice is the unit of preemption
            st.slice += 1;
            self.emit(EventKind::WorkerParked, task, kernel, None);
        }
        let st = &mut self.launches[h];
        debug_assert!(st.flag);
        st.phase = LaunchPhase::Parked;
        if st.open_signal() {
            st.signals.last_mut().unwrap().1 = Some(now);
        }
        if let Some(at) = st.resume_deferred.take() {
            let _ = self.resume(KernelHandle(h), at.max(now));
        }
    }

    fn start_ptb_task(&mut self, h: usize, sm: usize) {
        let st = &mut self.launches[h];
        let index = st.counter;
        st.counter += 1;
        let dur = st.launch.cost.block_duration + st.launch.cost.ptb_iteration_overhead;
        let (task, kernel) = (st.launch.task, st.launch.kernel);
        self.emit(EventKind::BlockStarted, task, kernel, Some(index));
        self.schedule(self.now + dur, Action::BlockDone { h, sm, block: index });
    }

    fn dispatch(&mut self) {
        // High before BestEffort, activation order within a class; stop at
        // the first eligible launch that cannot be fully placed.
        let mut order: Vec<usize> = self.ready.iter().copied().collect();
        order.sort_by_key(|&h| self.launches[h].launch.priority == Priority::BestEffort);
        for h in order {
            if let Some(g) = self.gate {
                if self.launches[h].launch.task != g {
                    continue;
                }
            }
            while self.launches[h].unplaced > 0 {
                let tpb = self.launches[h].launch.cost.threads_per_block;
                let Some(sm) = self.find_slot(tpb) else {
                    self.ready.retain(|r| self.launches[*r].unplaced > 0);
                    return;
                };
                self.place(h, sm);
            }
        }
        self.ready.retain(|r| self.launches[*r].unplaced > 0);
    }

    fn find_slot(&mut self, tpb: u32) -> Option<usize> {
        let n = self.sms.len();
        let limit = self.gpu.blocks_per_sm_for(tpb);
        for i in 0..n {
            let sm = (self.rr + i) % n;
            let s = &self.sms[sm];
            if s.blocks < limit
                && s.blocks < self.gpu.max_blocks_per_sm
                && s.threads + tpb <= self.gpu.max_threads_per_sm
            {
                self.rr = (sm + 1) % n;
                return Some(sm);
            }
        }
        None
    }

    fn place(&mut self, h: usize, sm: usize) {
        let st = &mut self.launches[h];
        st.unplaced -= 1;
        st.resident += 1;
        let tpb = st.launch.cost.threads_per_block;
        let s = &mut self.sms[sm];
        s.blocks += 1;
        s.threads += tpb;
        let st = &mut self.launches[h];
        match st.launch.shape {
            LaunchShape::Ptb { .. } => {
                if st.counter < st.launch.cost.total_blocks {
                    self.start_ptb_task(h, sm);
                } else {
                    // nothing left to claim: the worker exits immediately
                    self.free_slot(h, sm);
                    self.maybe_settle(h);
                }
            }
            _ => {
                let block = st.next_block;
                st.next_block += 1;
                let dur = st.launch.cost.block_duration;
                let (task, kernel) = (st.launch.task, st.launch.kernel);
                self.emit(EventKind::BlockStarted, task, kernel, Some(block));
                self.schedule(self.now + dur, Action::BlockDone { h, sm, block });
            }
        }
    }
}
