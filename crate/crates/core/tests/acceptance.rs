//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tallysim_core::experiment::{
    run_experiment, run_sweep, CalibrationCache, ExperimentConfig, ExperimentReport, SweepAxis,
};
use tallysim_core::ir::kernelgen::{generate, GenConfig, GeneratedCase};
use tallysim_core::ir::{
    interpret, interpret_with, parse_kernel, Dim3, ExecStatus, InterpOptions, KernelDef, LaunchSpec,
    StoreTrigger, Word,
};
use tallysim_core::profiler::{estimate_turnaround, slice_counts, ProfileKey, Profiler, DEFAULT_RUNS, DEFAULT_THRESHOLD};
use tallysim_core::scheduler::Policy;
use tallysim_core::sim::{
    EventKind, GpuSpec, KernelCostModel, LaunchShape, Nanos, Priority, SimLaunch, Simulator, NS_PER_MS, NS_PER_US,
};
use tallysim_core::transforms::{
    make_preemptible, make_preemptible_unchecked, slice_kernel, unify_synchronization, SliceFraction,
};
use tallysim_core::workloads::suite;

const LIMIT: u64 = 50_000_000;
const US: Nanos = NS_PER_US;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn experiment(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs().join("experiments").join(name)).expect("sample config loads")
}

fn run_ir(k: &KernelDef, args: Vec<Word>, memory: Vec<Word>, seed: u64) -> (ExecStatus, Option<Vec<Word>>) {
    let r = interpret(
        &LaunchSpec {
            kernel: k,
            args,
            global_memory: memory,
        },
        seed,
        LIMIT,
    );
    (r.status, r.final_memory)
}

fn completed(k: &KernelDef, args: Vec<Word>, memory: Vec<Word>, seed: u64) -> Result<Vec<Word>, String> {
    match run_ir(k, args, memory, seed) {
        (ExecStatus::Completed, Some(m)) => Ok(m),
        (s, _) => Err(format!("`{}` ended with {}", k.name, s.name())),
    }
}

fn sliced(case: &GeneratedCase, f: SliceFraction, seed: u64) -> Result<Vec<Word>, String> {
    let plan = slice_kernel(&case.kernel, f).map_err(|e| e.to_string())?;
    let mut mem = case.memory.clone();
    for i in 0..plan.sub_launches.len() {
        mem = completed(&plan.kernel_for(i), plan.args_for(&case.args, i), mem, seed + i as u64)?;
    }
    Ok(mem)
}

/// PTB run with the control words after the data; optionally preempted once
/// `preempt_at` tasks have been claimed, then resumed to completion.
fn ptb(case: &GeneratedCase, workers: u32, preempt_at: Option<Word>, seed: u64) -> Result<Vec<Word>, String> {
    let unified = unify_synchronization(&case.kernel);
    let p = make_preemptible(&unified, Dim3::linear(workers)).map_err(|e| e.to_string())?;
    let n = case.memory.len();
    let args = p.args(&case.args, &p.control(n, n + 1));
    let mut mem = case.memory.clone();
    mem.extend([0, 0]);
    if let Some(c) = preempt_at {
        let r = interpret_with(
            &LaunchSpec {
                kernel: &p.kernel,
                args: args.clone(),
                global_memory: mem,
            },
            &InterpOptions {
                schedule_seed: seed,
                step_limit: LIMIT,
                trigger: Some(StoreTrigger {
                    watch_addr: n,
                    threshold: c,
                    store_addr: n + 1,
                    value: 1,
                }),
            },
        );
        mem = match (r.status, r.final_memory) {
            (ExecStatus::Completed, Some(m)) => m,
            (s, _) => return Err(format!("preempted run ended with {}", s.name())),
        };
        mem[n + 1] = 0;
    }
    let mut out = completed(&p.kernel, args, mem, seed ^ 0x9e37)?;
    out.truncate(n);
    Ok(out)
}

fn transformation_equivalence() -> Outcome {
    let cfg = GenConfig::default();
    let start = Instant::now();
    let mut runs = 0;
    for seed in 0..200u64 {
        let case = generate(seed, &cfg);
        let want = completed(&case.kernel, case.args.clone(), case.memory.clone(), 0)?;
        let total = case.kernel.grid.total() as u32;
        let mut fractions: Vec<SliceFraction> = [2, 3, 4, 8, 16, 32]
            .iter()
            .map(|&d| SliceFraction::reciprocal(d).unwrap())
            .collect();
        fractions.push(SliceFraction::new(3, 8).unwrap());
        fractions.push(SliceFraction::reciprocal(total.max(1)).unwrap());
        for f in fractions {
            check(sliced(&case, f, seed)? == want, format!("kernel {seed}: slice {f} differs"))?;
            runs += 1;
        }
        for w in [1, 2, 4, 8] {
            check(ptb(&case, w, None, seed)? == want, format!("kernel {seed}: ptb({w}) differs"))?;
            runs += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 120.0, format!("took {secs:.1} s"))?;
    Ok(format!("200 kernels, {runs} transformed runs identical in {secs:.1} s"))
}

fn unified_sync_witness() -> Outcome {
    let text = std::fs::read_to_string(configs().join("kernels/witness.ir")).map_err(|e| e.to_string())?;
    let k = parse_kernel(&text).map_err(|e| e.to_string())?;
    // even thread t of block b stores 10 + (t + 2) % 4 at b*4 + t
    let mut want = vec![0; 8];
    for b in 0..2 {
        for t in (0..4).step_by(2) {
            want[b * 4 + t] = 10 + (t as Word + 2) % 4;
        }
    }
    let mem = vec![0; 10];
    let launch = |p: &tallysim_core::transforms::PtbKernelDef| p.args(&[0], &p.control(8, 9));

    let raw = make_preemptible_unchecked(&k, Dim3::linear(2)).map_err(|e| e.to_string())?;
    let (status, _) = run_ir(&raw.kernel, launch(&raw), mem.clone(), 0);
    check(
        matches!(status, ExecStatus::DivergentBarrier { .. }),
        format!("without unification: {}", status.name()),
    )?;
    check(make_preemptible(&k, Dim3::linear(2)).is_err(), "checked rewrite accepted a non-unified kernel")?;

    let fixed = make_preemptible(&unify_synchronization(&k), Dim3::linear(2)).map_err(|e| e.to_string())?;
    let mut got = completed(&fixed.kernel, launch(&fixed), mem, 0)?;
    got.truncate(8);
    check(got == want, format!("unified memory {got:?}, expected {want:?}"))?;
    Ok("DivergentBarrier without unification, Completed with expected memory after".into())
}

fn preempt_resume_exactness() -> Outcome {
    let case = (0..)
        .map(|s| generate(s, &GenConfig::default()))
        .find(|c| c.kernel.grid.total() == 16)
        .unwrap();
    let want = completed(&case.kernel, case.args.clone(), case.memory.clone(), 0)?;
    for c in 0..=16 {
        for w in [1, 2, 4, 8] {
            check(ptb(&case, w, Some(c), c as u64)? == want, format!("counter {c}, {w} workers"))?;
        }
    }

    let gpu = GpuSpec {
        num_sms: 4,
        max_threads_per_sm: 2048,
        max_blocks_per_sm: 32,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let blocks = rng.random_range(1..=64u64);
        let cost = KernelCostModel::with_defaults(rng.random_range(10..=500) * US, 1024, blocks);
        let shape = match rng.random_range(0..3) {
            0 => LaunchShape::Original,
            1 => LaunchShape::Sliced(slice_counts(blocks, SliceFraction::reciprocal(rng.random_range(1..=8)).unwrap())),
            _ => LaunchShape::Ptb {
                workers: rng.random_range(1..=8),
                start_counter: 0,
            },
        };
        let mut sim = Simulator::new(gpu, i).map_err(|e| e.to_string())?;
        let launch = SimLaunch {
            task: 0,
            kernel: 0,
            priority: Priority::BestEffort,
            shape,
            cost,
        };
        let h = sim.submit(launch, 0).map_err(|e| e.to_string())?;
        let mut events = sim.run_until(rng.random_range(0..20 * NS_PER_MS));
        sim.signal_preempt(h).map_err(|e| e.to_string())?;
        events.extend(sim.run_to_idle());
        let resume_at = sim.now() + rng.random_range(0..NS_PER_MS);
        sim.resume(h, resume_at).map_err(|e| e.to_string())?;
        events.extend(sim.run_to_idle());
        let mut seen = vec![0u32; blocks as usize];
        for e in events.iter().filter(|e| e.kind == EventKind::BlockFinished) {
            seen[e.block.unwrap() as usize] += 1;
        }
        check(seen.iter().all(|&n| n == 1), format!("scenario {i}: block counts {seen:?}"))?;
        check(sim.is_finished(h), format!("scenario {i}: not finished"))?;
    }
    Ok("17 counter values x 4 worker counts exact; 1000 simulator preemptions conserve blocks".into())
}

fn isolated(gpu: &GpuSpec, shape: LaunchShape, cost: KernelCostModel) -> Nanos {
    let mut sim = Simulator::new(*gpu, 0).unwrap();
    let h = sim
        .submit(
            SimLaunch {
                task: 0,
                kernel: 0,
                priority: Priority::BestEffort,
                shape,
                cost,
            },
            0,
        )
        .unwrap();
    sim.run_to_idle();
    sim.finished_at(h).unwrap()
}

fn turnaround_after(gpu: &GpuSpec, shape: LaunchShape, cost: KernelCostModel, at: Nanos) -> Option<Nanos> {
    let mut sim = Simulator::new(*gpu, 1).unwrap();
    let launch = SimLaunch {
        task: 0,
        kernel: 0,
        priority: Priority::BestEffort,
        shape,
        cost,
    };
    let h = sim.submit(launch, 0).unwrap();
    sim.run_until(at);
    sim.signal_preempt(h).unwrap();
    sim.run_to_idle();
    sim.measured_turnaround(h).ok()
}

fn estimate_fidelity() -> Outcome {
    let gpu = suite::default_gpu();
    let slots = gpu.total_slots_for(suite::THREADS_PER_BLOCK) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let blocks = rng.random_range(1..=256u64);
        let workers = rng.random_range(1..=slots);
        let cost = KernelCostModel::with_defaults(rng.random_range(5..=2000) * US, suite::THREADS_PER_BLOCK, blocks);
        let shape = LaunchShape::Ptb {
            workers,
            start_counter: 0,
        };
        let latency = isolated(&gpu, shape.clone(), cost);
        let estimate = estimate_turnaround(tallysim_core::profiler::ConfigCandidate::Ptb(workers), latency, blocks, 0);
        let bound = (estimate as f64 * 1.05) as Nanos + 2 * US;
        for _ in 0..5 {
            let at = rng.random_range(cost.launch_overhead..latency);
            if let Some(t) = turnaround_after(&gpu, shape.clone(), cost, at) {
                check(t <= bound, format!("scenario {i}: turnaround {t} ns > bound {bound} ns (estimate {estimate})"))?;
                worst = worst.max(t as f64 / estimate as f64);
            }
        }
    }
    for i in 0..50 {
        let blocks = rng.random_range(2..=256u64);
        let cost = KernelCostModel::with_defaults(rng.random_range(5..=2000) * US, suite::THREADS_PER_BLOCK, blocks);
        let f = SliceFraction::reciprocal(rng.random_range(2..=16)).unwrap();
        let counts = slice_counts(blocks, f);
        let single = isolated(
            &gpu,
            LaunchShape::Original,
            KernelCostModel {
                total_blocks: counts[0],
                ..cost
            },
        );
        let t = turnaround_after(&gpu, LaunchShape::Sliced(counts), cost, 0).ok_or("sliced launch never drained")?;
        check(t.abs_diff(single) <= US, format!("slice scenario {i}: turnaround {t} vs single slice {single}"))?;
    }
    Ok(format!("50 PTB scenarios within bound (worst measured/estimate {worst:.3}); 50 sliced within 1 us"))
}

fn long_kernel_turnaround() -> Outcome {
    let gpu = suite::narrow_gpu();
    let k = &suite::long_kernel_10ms().kernels[0];
    let mut profiler = Profiler::new(gpu, DEFAULT_RUNS);
    let choice = profiler
        .select(&ProfileKey::linear(&k.name, &k.cost), &k.cost, DEFAULT_THRESHOLD)
        .map_err(|e| e.to_string())?;
    let at = k.cost.launch_overhead + 3 * NS_PER_MS + 17 * US;
    let kernel_level = turnaround_after(&gpu, LaunchShape::Original, k.cost, at).ok_or("no drain")?;
    let block_level = turnaround_after(&gpu, choice.shape(k.cost.total_blocks), k.cost, at).ok_or("no drain")?;
    let full = isolated(&gpu, LaunchShape::Original, k.cost);
    let ratio = full as f64 / block_level as f64;
    check(ratio >= 10.0, format!("ratio {ratio:.1}"))?;
    Ok(format!(
        "kernel {:.2} ms (signal mid-run {:.2} ms), {choice} {:.3} ms, ratio {ratio:.1}",
        full as f64 / 1e6,
        kernel_level as f64 / 1e6,
        block_level as f64 / 1e6
    ))
}

fn overhead(r: &ExperimentReport, p: Policy) -> f64 {
    r.policy(p).unwrap().high_priority().p99_overhead().unwrap()
}

fn end_to_end(colocate: &ExperimentReport, secs: f64) -> Outcome {
    let tally = overhead(colocate, Policy::Tally);
    let kp = overhead(colocate, Policy::KernelPriority);
    let eager = overhead(colocate, Policy::Eager);
    let be_tally = colocate.policy(Policy::Tally).unwrap().best_effort_throughput();
    let be_kp = colocate.policy(Policy::KernelPriority).unwrap().best_effort_throughput();
    let summary = format!(
        "p99 overhead tally {:.1}%, kernel-priority {:.1}%, eager {:.1}%; BE throughput ratio {:.2}; {secs:.0} s",
        tally * 100.0,
        kp * 100.0,
        eager * 100.0,
        be_tally / be_kp
    );
    check(tally <= 0.10, format!("tally overhead too high: {summary}"))?;
    check(kp >= 1.0, format!("kernel-priority overhead too low: {summary}"))?;
    check(eager >= kp, format!("eager below kernel-priority: {summary}"))?;
    check(be_tally >= 0.7 * be_kp, format!("tally BE throughput too low: {summary}"))?;
    check(secs < 300.0, format!("too slow: {summary}"))?;
    Ok(summary)
}

fn decomposition(colocate: &ExperimentReport, cache: &CalibrationCache) -> Outcome {
    let eager_ratio = overhead(colocate, Policy::Eager) + 1.0;
    let p99 = |r: &ExperimentReport, p| r.policy(p).unwrap().high_priority().p99_ms.unwrap();
    let long_gap = p99(colocate, Policy::KernelPriority) / p99(colocate, Policy::Tally);

    let mut short = experiment("short_mix.toml");
    short.scheduler.policies = vec![Policy::Tally, Policy::KernelPriority];
    let short = run_experiment(&short, None, cache).map_err(|e| e.to_string())?;
    let short_kp = overhead(&short, Policy::KernelPriority);
    let short_tally = overhead(&short, Policy::Tally);
    let summary = format!(
        "eager p99 {eager_ratio:.0}x calibrated; long mix kernel-priority/tally p99 {long_gap:.2}; \
         short mix overhead kernel-priority {:.1}%, tally {:.1}%",
        short_kp * 100.0,
        short_tally * 100.0
    );
    check(eager_ratio >= 5.0, format!("eager not degraded enough: {summary}"))?;
    check(long_gap >= 1.5, format!("kernel-priority close to tally on long mix: {summary}"))?;
    check(short_kp <= 0.10, format!("kernel-priority not near-ideal on short mix: {summary}"))?;
    Ok(summary)
}

fn non_decreasing(xs: &[f64], band: f64) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0] * (1.0 - band))
}

fn threshold_sweep(cache: &CalibrationCache) -> Outcome {
    let cfg = experiment("threshold_sweep.toml");
    let axis = SweepAxis::Threshold;
    let values = axis.default_values();
    let sweep = run_sweep(&cfg, axis, &values, cache).map_err(|e| e.to_string())?;
    let tally = |r: &ExperimentReport| r.policy(Policy::Tally).unwrap().clone();
    let p99: Vec<f64> = sweep.points.iter().map(|(_, r)| tally(r).high_priority().p99_ms.unwrap()).collect();
    let be: Vec<f64> = sweep.points.iter().map(|(_, r)| tally(r).best_effort_throughput()).collect();
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    let summary = format!("p99 ms [{}], BE throughput [{}]", fmt(&p99), fmt(&be));
    check(non_decreasing(&p99, 0.03), format!("p99 decreases: {summary}"))?;
    check(non_decreasing(&be, 0.03), format!("BE throughput decreases: {summary}"))?;
    Ok(summary)
}

fn scaling(cache: &CalibrationCache) -> Outcome {
    let cfg = experiment("be_scaling.toml");
    let values: Vec<f64> = (1..=8).map(f64::from).collect();
    let sweep = run_sweep(&cfg, SweepAxis::BeCount, &values, cache).map_err(|e| e.to_string())?;
    let tally = |r: &ExperimentReport| r.policy(Policy::Tally).unwrap().clone();
    let p99: Vec<f64> = sweep.points.iter().map(|(_, r)| tally(r).high_priority().p99_ms.unwrap()).collect();
    let sys: Vec<f64> = sweep.points.iter().map(|(_, r)| tally(r).system_throughput).collect();
    let (lo, hi) = p99.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    let summary = format!("p99 ms [{}], system throughput [{}]", fmt(&p99), fmt(&sys));
    check((hi - lo) / lo <= 0.10, format!("p99 varies more than 10%: {summary}"))?;
    check(non_decreasing(&sys, 0.03), format!("system throughput decreases: {summary}"))?;
    check(sys[3] > 1.5 * sys[0], format!("no throughput growth before saturation: {summary}"))?;
    Ok(summary)
}

fn determinism(cache: &CalibrationCache) -> Outcome {
    let mut cfg = experiment("colocate.toml");
    cfg.duration_s = 3.0;
    let mut trace = experiment("trace_replay.toml");
    trace.duration_s = 3.0;
    trace.scheduler.policies = Policy::ALL.to_vec();
    let mut files = 0;
    for c in [cfg, trace] {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let mut csv = Vec::new();
        for d in &dirs {
            csv.push(run_experiment(&c, Some(d.path()), cache).map_err(|e| e.to_string())?.csv());
        }
        check(csv[0] == csv[1], "metrics CSV differs between reruns")?;
        for p in &c.scheduler.policies {
            let name = format!("events-{p}.csv");
            let a = std::fs::read(dirs[0].path().join(&name)).map_err(|e| e.to_string())?;
            let b = std::fs::read(dirs[1].path().join(&name)).map_err(|e| e.to_string())?;
            check(!a.is_empty() && a == b, format!("{name} differs between reruns"))?;
            files += 1;
        }
    }
    let base = experiment("be_scaling.toml");
    let sweep = |c: &CalibrationCache| run_sweep(&base, SweepAxis::BeCount, &[1.0, 2.0], c).map(|s| s.csv());
    let a = sweep(cache).map_err(|e| e.to_string())?;
    let b = sweep(&CalibrationCache::default()).map_err(|e| e.to_string())?;
    check(a == b, "sweep CSV differs between reruns")?;
    Ok(format!("{files} event logs, 2 metrics CSVs and a sweep CSV byte-identical"))
}

fn main() -> ExitCode {
    let cache = CalibrationCache::default();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, r: Outcome| {
        match &r {
            Ok(msg) => println!("criterion {n:>2} PASS  {name}: {msg}"),
            Err(msg) => println!("criterion {n:>2} FAIL  {name}: {msg}"),
        }
        results.push((n, name, r));
    };
    report(1, "transformation equivalence", transformation_equivalence());
    report(2, "unified-sync witness", unified_sync_witness());
    report(3, "preempt/resume exactness", preempt_resume_exactness());
    report(4, "turnaround estimate fidelity", estimate_fidelity());
    report(5, "long kernel turnaround", long_kernel_turnaround());

    let start = Instant::now();
    let mut colocate = experiment("colocate.toml");
    colocate.scheduler.policies = vec![Policy::Tally, Policy::KernelPriority, Policy::Eager];
    match run_experiment(&colocate, None, &cache) {
        Ok(r) => {
            let secs = start.elapsed().as_secs_f64();
            report(6, "end-to-end co-location", end_to_end(&r, secs));
            report(7, "decomposition", decomposition(&r, &cache));
        }
        Err(e) => {
            report(6, "end-to-end co-location", Err(e.to_string()));
            report(7, "decomposition", Err(e.to_string()));
        }
    }
    report(8, "threshold sweep", threshold_sweep(&cache));
    report(9, "best-effort scaling", scaling(&cache));
    report(10, "determinism", determinism(&cache));

    let failed = results.iter().filter(|(_, _, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
