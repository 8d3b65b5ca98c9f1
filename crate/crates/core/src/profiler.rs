//! Launch-configuration search for best-effort kernels.
//!
//! Each candidate is timed in isolated simulator runs on an idle GPU; the
//! turnaround estimate is the time the kernel needs to give its slots back
//! after a preemption request. Results are cached per work shape.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::Dim3;
use crate::sim::{
    GpuSpec, KernelCostModel, LaunchShape, Nanos, Priority, SimError, SimLaunch, Simulator,
    NS_PER_US,
};
use crate::transforms::{slice_extents, SliceFraction};

/// 0.0316 ms.
pub const DEFAULT_THRESHOLD: Nanos = 31_600;
pub const DEFAULT_RUNS: u32 = 10;
/// Slicing menu; `1/total_blocks` is added per kernel.
pub const SLICE_DENOMINATORS: [u32; 5] = [2, 4, 8, 16, 32];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProfileError {
    #[error("no feasible candidate for `{0}`")]
    NoCandidates(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("bad candidate `{0}`")]
    BadCandidate(String),
    #[error("profile cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ConfigCandidate {
    Original,
    Sliced(SliceFraction),
    Ptb(u32),
}

impl ConfigCandidate {
    fn rank(&self) -> (u8, u64, u64) {
        match self {
            ConfigCandidate::Ptb(w) => (0, *w as u64, 1),
            // smaller fraction first
            ConfigCandidate::Sliced(f) => (1, f.num() as u64, f.den() as u64),
            ConfigCandidate::Original => (2, 0, 1),
        }
    }

    fn tie_break(&self, other: &Self) -> Ordering {
        let (a, an, ad) = self.rank();
        let (b, bn, bd) = other.rank();
        a.cmp(&b).then((an * bd).cmp(&(bn * ad)))
    }

    /// Simulator shape of this configuration for a kernel of `total_blocks`.
    pub fn shape(&self, total_blocks: u64) -> LaunchShape {
        match self {
            ConfigCandidate::Original => LaunchShape::Original,
            ConfigCandidate::Sliced(f) => LaunchShape::Sliced(slice_counts(total_blocks, *f)),
            ConfigCandidate::Ptb(w) => LaunchShape::Ptb {
                workers: *w,
                start_counter: 0,
            },
        }
    }
}

impl fmt::Display for ConfigCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigCandidate::Original => write!(f, "original"),
            ConfigCandidate::Sliced(frac) => write!(f, "sliced({frac})"),
            ConfigCandidate::Ptb(w) => write!(f, "ptb({w})"),
        }
    }
}

impl FromStr for ConfigCandidate {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ProfileError::BadCandidate(s.to_string());
        let s = s.trim();
        if s == "original" {
            return Ok(ConfigCandidate::Original);
        }
        let inner = |p: &str| s.strip_prefix(p).and_then(|r| r.strip_suffix(')'));
        if let Some(f) = inner("sliced(") {
            return f.parse().map(ConfigCandidate::Sliced).map_err(|_| bad());
        }
        if let Some(w) = inner("ptb(") {
            return match w.parse() {
                Ok(w) if w > 0 => Ok(ConfigCandidate::Ptb(w)),
                _ => Err(bad()),
            };
        }
        Err(bad())
    }
}

impl TryFrom<String> for ConfigCandidate {
    type Error = ProfileError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ConfigCandidate> for String {
    fn from(c: ConfigCandidate) -> Self {
        c.to_string()
    }
}

/// Block counts of the slices of a linear grid.
pub fn slice_counts(total_blocks: u64, f: SliceFraction) -> Vec<u64> {
    let len = u32::try_from(total_blocks).unwrap_or(u32::MAX);
    slice_extents(len, f).into_iter().map(u64::from).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProfileKey {
    pub kernel: String,
    pub grid: Dim3,
    pub block: Dim3,
}

impl ProfileKey {
    /// Key for a linear-grid kernel described only by its cost model.
    pub fn linear(kernel: impl Into<String>, cost: &KernelCostModel) -> Self {
        Self {
            kernel: kernel.into(),
            grid: Dim3::linear(u32::try_from(cost.total_blocks).unwrap_or(u32::MAX)),
            block: Dim3::linear(cost.threads_per_block),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub candidate: ConfigCandidate,
    /// Mean isolated completion time.
    pub kernel_latency: Nanos,
    pub turnaround_estimate: Nanos,
    pub runs: u32,
}

/// Original, PTB worker counts that are multiples of the SM count and fit
/// on the GPU at once, and slicing fractions with distinct tilings.
pub fn candidate_configs(cost: &KernelCostModel, gpu: &GpuSpec) -> Vec<ConfigCandidate> {
    let mut out = vec![ConfigCandidate::Original];
    let slots = gpu.total_slots_for(cost.threads_per_block);
    let total = cost.total_blocks;
    let sms = gpu.num_sms as u64;
    let mut workers: Vec<u64> = (1..=gpu.blocks_per_sm_for(cost.threads_per_block) as u64)
        .map(|k| k * sms)
        .filter(|&w| w <= total)
        .collect();
    if workers.is_empty() && total <= slots {
        // fewer blocks than SMs
        workers.push(total);
    }
    out.extend(workers.into_iter().map(|w| ConfigCandidate::Ptb(w as u32)));

    let mut tilings = vec![vec![total]];
    let dens = SLICE_DENOMINATORS
        .iter()
        .copied()
        .chain(u32::try_from(total).ok());
    for den in dens {
        let Ok(f) = SliceFraction::reciprocal(den) else {
            continue;
        };
        let t = slice_counts(total, f);
        if !tilings.contains(&t) {
            tilings.push(t);
            out.push(ConfigCandidate::Sliced(f));
        }
    }
    out
}

/// PTB: `kernel_latency · workers / total_blocks`; sliced: the completion
/// time of one slice; original: the whole kernel.
pub fn estimate_turnaround(
    candidate: ConfigCandidate,
    kernel_latency: Nanos,
    total_blocks: u64,
    slice_latency: Nanos,
) -> Nanos {
    match candidate {
        ConfigCandidate::Original => kernel_latency,
        ConfigCandidate::Sliced(_) => slice_latency,
        ConfigCandidate::Ptb(w) => {
            let num = kernel_latency as u128 * w as u128;
            let den = total_blocks.max(1) as u128;
            ((num + den / 2) / den) as Nanos
        }
    }
}

fn isolated_latency(gpu: &GpuSpec, launch: SimLaunch, seed: u64) -> Result<Nanos, SimError> {
    let mut sim = Simulator::new(*gpu, seed)?;
    let h = sim.submit(launch, 0)?;
    sim.run_to_idle();
    Ok(sim.finished_at(h).expect("isolated run completes"))
}

/// Measures one candidate over `runs` placement seeds.
pub fn measure(
    gpu: &GpuSpec,
    cost: &KernelCostModel,
    candidate: ConfigCandidate,
    runs: u32,
) -> Result<ProfileRecord, ProfileError> {
    let runs = runs.max(1);
    let launch = |shape, cost| SimLaunch {
        task: 0,
        kernel: 0,
        priority: Priority::BestEffort,
        shape,
        cost,
    };
    let mut total = 0u128;
    let mut slice_total = 0u128;
    for seed in 0..runs as u64 {
        total += isolated_latency(gpu, launch(candidate.shape(cost.total_blocks), *cost), seed)? as u128;
        if let ConfigCandidate::Sliced(f) = candidate {
            let first = slice_counts(cost.total_blocks, f)[0];
            let slice_cost = KernelCostModel {
                total_blocks: first,
                ..*cost
            };
            slice_total += isolated_latency(gpu, launch(LaunchShape::Original, slice_cost), seed)? as u128;
        }
    }
    let kernel_latency = (total / runs as u128) as Nanos;
    let slice_latency = (slice_total / runs as u128) as Nanos;
    Ok(ProfileRecord {
        candidate,
        kernel_latency,
        turnaround_estimate: estimate_turnaround(candidate, kernel_latency, cost.total_blocks, slice_latency),
        runs,
    })
}

/// Among records within `threshold`, the lowest latency; otherwise the
/// lowest turnaround. Ties prefer PTB, then slicing, then the original
/// launch, then the smaller parameter.
pub fn select_config(records: &[ProfileRecord], threshold: Nanos) -> Option<ConfigCandidate> {
    let within: Vec<&ProfileRecord> = records
        .iter()
        .filter(|r| r.turnaround_estimate <= threshold)
        .collect();
    let best = if within.is_empty() {
        records.iter().min_by(|a, b| {
            a.turnaround_estimate
                .cmp(&b.turnaround_estimate)
                .then(a.candidate.tie_break(&b.candidate))
        })
    } else {
        within.into_iter().min_by(|a, b| {
            a.kernel_latency
                .cmp(&b.kernel_latency)
                .then(a.candidate.tie_break(&b.candidate))
        })
    };
    best.map(|r| r.candidate)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    key: ProfileKey,
    records: Vec<ProfileRecord>,
}

/// Profiles kernels on demand and keeps the results for the process
/// lifetime.
#[derive(Debug, Clone)]
pub struct Profiler {
    gpu: GpuSpec,
    runs: u32,
    cache: BTreeMap<ProfileKey, Vec<ProfileRecord>>,
    simulations: u64,
}

impl Profiler {
    pub fn new(gpu: GpuSpec, runs: u32) -> Self {
        Self {
            gpu,
            runs: runs.max(1),
            cache: BTreeMap::new(),
            simulations: 0,
        }
    }

    /// Number of isolated simulator runs performed so far.
    pub fn simulations(&self) -> u64 {
        self.simulations
    }

    pub fn cached(&self, key: &ProfileKey) -> Option<&[ProfileRecord]> {
        self.cache.get(key).map(Vec::as_slice)
    }

    pub fn profile(
        &mut self,
        key: &ProfileKey,
        cost: &KernelCostModel,
    ) -> Result<&[ProfileRecord], ProfileError> {
        if !self.cache.contains_key(key) {
            let candidates = candidate_configs(cost, &self.gpu);
            let records = self.profile_candidates(cost, &candidates)?;
            if records.is_empty() {
                return Err(ProfileError::NoCandidates(key.kernel.clone()));
            }
            self.cache.insert(key.clone(), records);
        }
        Ok(&self.cache[key])
    }

    /// Times every candidate; candidates the simulator rejects are skipped.
    pub fn profile_candidates(
        &mut self,
        cost: &KernelCostModel,
        candidates: &[ConfigCandidate],
    ) -> Result<Vec<ProfileRecord>, ProfileError> {
        let gpu = self.gpu;
        let runs = self.runs;
        let results: Vec<Result<ProfileRecord, ProfileError>> = candidates
            .par_iter()
            .map(|c| measure(&gpu, cost, *c, runs))
            .collect();
        let mut out = Vec::with_capacity(results.len());
        for (c, r) in candidates.iter().zip(results) {
            let sims = if matches!(c, ConfigCandidate::Sliced(_)) { 2 } else { 1 };
            self.simulations += sims * runs as u64;
            match r {
                Ok(rec) => out.push(rec),
                Err(e) => log::warn!("skipping infeasible candidate {c}: {e}"),
            }
        }
        Ok(out)
    }

    pub fn select(
        &mut self,
        key: &ProfileKey,
        cost: &KernelCostModel,
        threshold: Nanos,
    ) -> Result<ConfigCandidate, ProfileError> {
        let records = self.profile(key, cost)?;
        select_config(records, threshold).ok_or_else(|| ProfileError::NoCandidates(key.kernel.clone()))
    }

    pub fn dump(&self) -> String {
        let entries: Vec<CacheEntry> = self
            .cache
            .iter()
            .map(|(key, records)| CacheEntry {
                key: key.clone(),
                records: records.clone(),
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("cache serializes")
    }

    pub fn load(&mut self, text: &str) -> Result<(), ProfileError> {
        let entries: Vec<CacheEntry> =
            serde_json::from_str(text).map_err(|e| ProfileError::Cache(e.to_string()))?;
        for e in entries {
            self.cache.insert(e.key, e.records);
        }
        Ok(())
    }
}

/// Upper bound used to check PTB turnaround against its estimate.
pub fn ptb_turnaround_bound(estimate: Nanos, cost: &KernelCostModel) -> Nanos {
    let frac = cost.ptb_iteration_overhead as f64 / cost.block_duration.max(1) as f64;
    (estimate as f64 * (1.0 + frac)).ceil() as Nanos + NS_PER_US
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::NS_PER_MS;
    use proptest::prelude::*;

    const MS: Nanos = NS_PER_MS;

    fn gpu4x2() -> GpuSpec {
        GpuSpec {
            num_sms: 4,
            max_threads_per_sm: 512,
            max_blocks_per_sm: 2,
        }
    }

    #[test]
    fn ptb_candidates_are_sm_multiples() {
        let cost = KernelCostModel::with_defaults(MS, 256, 64);
        let c = candidate_configs(&cost, &gpu4x2());
        let ptb: Vec<u32> = c
            .iter()
            .filter_map(|c| match c {
                ConfigCandidate::Ptb(w) => Some(*w),
                _ => None,
            })
            .collect();
        assert_eq!(ptb, vec![4, 8]);
        assert_eq!(c[0], ConfigCandidate::Original);
        // 1/2 .. 1/32 and 1/64 all tile 64 blocks differently
        assert_eq!(c.len(), 1 + 2 + 6);
    }

    #[test]
    fn single_block_kernel_degenerates() {
        let cost = KernelCostModel::with_defaults(MS, 256, 1);
        assert_eq!(
            candidate_configs(&cost, &gpu4x2()),
            vec![ConfigCandidate::Original, ConfigCandidate::Ptb(1)]
        );
    }

    #[test]
    fn ptb_estimate_arithmetic() {
        assert_eq!(estimate_turnaround(ConfigCandidate::Ptb(2), 10 * MS, 16, 0), 1_250_000);
        assert_eq!(estimate_turnaround(ConfigCandidate::Original, 10 * MS, 16, 0), 10 * MS);
    }

    #[test]
    fn sliced_estimate_is_one_slice() {
        let cost = KernelCostModel::with_defaults(MS, 256, 16);
        let f = SliceFraction::new(1, 4).unwrap();
        let r = measure(&gpu4x2(), &cost, ConfigCandidate::Sliced(f), 3).unwrap();
        // a 4-block slice fits in one wave
        assert_eq!(r.turnaround_estimate, cost.launch_overhead + MS);
        assert_eq!(r.kernel_latency, 4 * (cost.launch_overhead + MS));
    }

    #[test]
    fn cache_serves_repeat_calls() {
        let mut p = Profiler::new(gpu4x2(), DEFAULT_RUNS);
        let cost = KernelCostModel::with_defaults(MS, 256, 16);
        let key = ProfileKey::linear("k", &cost);
        let first = p.profile(&key, &cost).unwrap().to_vec();
        let sims = p.simulations();
        assert!(sims > 0);
        let second = p.profile(&key, &cost).unwrap().to_vec();
        assert_eq!(p.simulations(), sims);
        assert_eq!(first, second);
        // deterministic model: mean equals a single run
        let single = measure(&gpu4x2(), &cost, first[1].candidate, 1).unwrap();
        assert_eq!(single.kernel_latency, first[1].kernel_latency);

        let mut fresh = Profiler::new(gpu4x2(), DEFAULT_RUNS);
        fresh.load(&p.dump()).unwrap();
        assert_eq!(fresh.cached(&key).unwrap(), &first[..]);
        assert_eq!(fresh.simulations(), 0);
    }

    #[test]
    fn selection_rules() {
        let rec = |candidate, kernel_latency, turnaround_estimate| ProfileRecord {
            candidate,
            kernel_latency,
            turnaround_estimate,
            runs: 1,
        };
        let half = ConfigCandidate::Sliced(SliceFraction::new(1, 2).unwrap());
        let records = vec![
            rec(ConfigCandidate::Original, 10, 10),
            rec(ConfigCandidate::Ptb(4), 12, 3),
            rec(ConfigCandidate::Ptb(8), 11, 3),
            rec(half, 11, 5),
        ];
        // nothing within 2: minimal turnaround, tie to fewer workers
        assert_eq!(select_config(&records, 2), Some(ConfigCandidate::Ptb(4)));
        assert_eq!(select_config(&records, 3), Some(ConfigCandidate::Ptb(8)));
        // latency tie between ptb(8) and sliced: ptb wins
        assert_eq!(select_config(&records, 5), Some(ConfigCandidate::Ptb(8)));
        assert_eq!(select_config(&records, Nanos::MAX), Some(ConfigCandidate::Original));
        assert_eq!(select_config(&[], 5), None);
    }

    #[test]
    fn default_threshold_on_ten_ms_kernel() {
        let cost = KernelCostModel::with_defaults(100 * NS_PER_US, 256, 100);
        let mut p = Profiler::new(gpu4x2(), 2);
        let key = ProfileKey::linear("long", &cost);
        let records = p.profile(&key, &cost).unwrap().to_vec();
        let chosen = select_config(&records, DEFAULT_THRESHOLD).unwrap();
        let rec = records.iter().find(|r| r.candidate == chosen).unwrap();
        let min = records.iter().map(|r| r.turnaround_estimate).min().unwrap();
        assert!(rec.turnaround_estimate <= DEFAULT_THRESHOLD || rec.turnaround_estimate == min);
        assert!(matches!(chosen, ConfigCandidate::Ptb(_) | ConfigCandidate::Sliced(_)));
    }

    #[test]
    fn candidate_text_roundtrip() {
        for c in [
            ConfigCandidate::Original,
            ConfigCandidate::Ptb(8),
            ConfigCandidate::Sliced(SliceFraction::new(1, 16).unwrap()),
        ] {
            assert_eq!(c.to_string().parse::<ConfigCandidate>().unwrap(), c);
        }
        assert!("ptb(0)".parse::<ConfigCandidate>().is_err());
        assert!("sliced(2)".parse::<ConfigCandidate>().is_err());
    }

    fn arb_cost() -> impl Strategy<Value = KernelCostModel> {
        (1u64..=3000, 1u64..=200, prop::sample::select(vec![64u32, 128, 256, 512]))
            .prop_map(|(us, blocks, tpb)| KernelCostModel::with_defaults(us * NS_PER_US, tpb, blocks))
    }

    fn arb_gpu() -> impl Strategy<Value = GpuSpec> {
        (1u32..=8, 1u32..=4).prop_map(|(sms, slots)| GpuSpec {
            num_sms: sms,
            max_threads_per_sm: 512 * slots,
            max_blocks_per_sm: slots * 2,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn candidates_deterministic_and_unique(cost in arb_cost(), gpu in arb_gpu()) {
            let a = candidate_configs(&cost, &gpu);
            prop_assert_eq!(&a, &candidate_configs(&cost, &gpu));
            for (i, x) in a.iter().enumerate() {
                prop_assert!(!a[i + 1..].contains(x));
                match x {
                    ConfigCandidate::Ptb(w) => {
                        prop_assert!(*w as u64 <= gpu.total_slots_for(cost.threads_per_block));
                        prop_assert!(*w as u64 <= cost.total_blocks);
                        prop_assert!(*w % gpu.num_sms == 0 || (*w as u64) == cost.total_blocks);
                    }
                    ConfigCandidate::Sliced(f) => {
                        let counts = slice_counts(cost.total_blocks, *f);
                        prop_assert_eq!(counts.iter().sum::<u64>(), cost.total_blocks);
                        prop_assert!(counts.len() > 1);
                    }
                    ConfigCandidate::Original => {}
                }
            }
        }

        #[test]
        fn ptb_latency_non_increasing_in_workers(cost in arb_cost(), gpu in arb_gpu()) {
            let mut last = Nanos::MAX;
            for c in candidate_configs(&cost, &gpu) {
                if let ConfigCandidate::Ptb(_) = c {
                    let r = measure(&gpu, &cost, c, 1).unwrap();
                    prop_assert!(r.kernel_latency <= last);
                    last = r.kernel_latency;
                }
            }
        }

        #[test]
        fn selection_meets_threshold_or_minimizes(cost in arb_cost(), threshold_us in 1u64..=5000) {
            let gpu = gpu4x2();
            let mut p = Profiler::new(gpu, 1);
            let key = ProfileKey::linear("k", &cost);
            let records = p.profile(&key, &cost).unwrap().to_vec();
            let t = threshold_us * NS_PER_US;
            let chosen = select_config(&records, t).unwrap();
            let rec = records.iter().find(|r| r.candidate == chosen).unwrap();
            let min = records.iter().map(|r| r.turnaround_estimate).min().unwrap();
            prop_assert!(rec.turnaround_estimate <= t || rec.turnaround_estimate == min);
            if rec.turnaround_estimate <= t {
                let best = records.iter().filter(|r| r.turnaround_estimate <= t).map(|r| r.kernel_latency).min().unwrap();
                prop_assert_eq!(rec.kernel_latency, best);
            }
        }

        #[test]
        fn ptb_turnaround_within_ptb_turnaround_bound(cost in arb_cost(), at_frac in 0.0f64..1.0) {
            let gpu = gpu4x2();
            for c in candidate_configs(&cost, &gpu) {
                let ConfigCandidate::Ptb(w) = c else { continue };
                let rec = measure(&gpu, &cost, c, 1).unwrap();
                let mut sim = Simulator::new(gpu, 0).unwrap();
                let h = sim.submit(SimLaunch { task: 0, kernel: 0, priority: Priority::BestEffort, shape: c.shape(cost.total_blocks), cost }, 0).unwrap();
                let at = cost.launch_overhead + ((rec.kernel_latency - cost.launch_overhead) as f64 * at_frac) as Nanos;
                sim.run_until(at);
                sim.signal_preempt(h).unwrap();
                sim.run_to_idle();
                if let Ok(t) = sim.measured_turnaround(h) {
                    prop_assert!(t <= ptb_turnaround_bound(rec.turnaround_estimate, &cost), "ptb({}) t={} est={}", w, t, rec.turnaround_estimate);
                }
            }
        }
    }
}
