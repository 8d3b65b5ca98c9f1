use proptest::prelude::*;
use tallysim_core::ir::kernelgen::{generate, GenConfig, GeneratedCase};
use tallysim_core::ir::{
    interpret, interpret_with, Dim3, ExecStatus, InterpOptions, LaunchSpec, StoreTrigger, Word,
};
use tallysim_core::transforms::{
    make_preemptible, make_preemptible_unchecked, slice_kernel, unify_synchronization,
    SliceFraction,
};

const LIMIT: u64 = 20_000_000;

fn reference(case: &GeneratedCase) -> Vec<Word> {
    let r = interpret(
        &LaunchSpec {
            kernel: &case.kernel,
            args: case.args.clone(),
            global_memory: case.memory.clone(),
        },
        0,
        LIMIT,
    );
    assert_eq!(r.status, ExecStatus::Completed);
    r.final_memory.unwrap()
}

fn run_sliced(case: &GeneratedCase, frac: SliceFraction, seed: u64) -> Vec<Word> {
    let plan = slice_kernel(&case.kernel, frac).unwrap();
    let mut mem = case.memory.clone();
    for i in 0..plan.sub_launches.len() {
        let k = plan.kernel_for(i);
        let r = interpret(
            &LaunchSpec {
                kernel: &k,
                args: plan.args_for(&case.args, i),
                global_memory: mem,
            },
            seed + i as u64,
            LIMIT,
        );
        assert_eq!(r.status, ExecStatus::Completed);
        mem = r.final_memory.unwrap();
    }
    mem
}

/// Runs the PTB form with control words appended after the data region;
/// optionally preempts once the counter reaches `preempt_at` and resumes.
fn run_ptb(case: &GeneratedCase, workers: u32, preempt_at: Option<Word>, seed: u64) -> Vec<Word> {
    let unified = unify_synchronization(&case.kernel);
    let ptb = make_preemptible(&unified, Dim3::linear(workers)).unwrap();
    let n = case.memory.len();
    let ctl = ptb.control(n, n + 1);
    let args = ptb.args(&case.args, &ctl);
    let mut mem = case.memory.clone();
    mem.extend([0, 0]);
    if let Some(c) = preempt_at {
        let r = interpret_with(
            &LaunchSpec {
                kernel: &ptb.kernel,
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
        assert_eq!(r.status, ExecStatus::Completed);
        mem = r.final_memory.unwrap();
        mem[n + 1] = 0;
    }
    let r = interpret(
        &LaunchSpec {
            kernel: &ptb.kernel,
            args,
            global_memory: mem,
        },
        seed ^ 0x5a5a,
        LIMIT,
    );
    assert_eq!(r.status, ExecStatus::Completed);
    let mut mem = r.final_memory.unwrap();
    mem.truncate(n);
    mem
}

fn small() -> GenConfig {
    GenConfig {
        max_blocks: 24,
        max_threads: 12,
        divergent_early_return: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sliced_matches_original(seed in any::<u64>(), den in prop::sample::select(vec![1u32, 2, 3, 4, 8, 16])) {
        let case = generate(seed, &small());
        let want = reference(&case);
        let frac = SliceFraction::new(1, den).unwrap();
        prop_assert_eq!(run_sliced(&case, frac, seed), want);
    }

    #[test]
    fn unified_matches_original(seed in any::<u64>(), sched in any::<u64>()) {
        let case = generate(seed, &small());
        let want = reference(&case);
        let u = unify_synchronization(&case.kernel);
        let r = interpret(&LaunchSpec { kernel: &u, args: case.args.clone(), global_memory: case.memory.clone() }, sched, LIMIT);
        prop_assert_eq!(r.status, ExecStatus::Completed);
        prop_assert_eq!(r.final_memory.unwrap(), want);
    }

    #[test]
    fn ptb_matches_original(seed in any::<u64>(), workers in prop::sample::select(vec![1u32, 2, 4, 8])) {
        let case = generate(seed, &small());
        let want = reference(&case);
        prop_assert_eq!(run_ptb(&case, workers, None, seed), want);
    }

    #[test]
    fn ptb_preempt_and_resume_matches_original(seed in any::<u64>(), workers in prop::sample::select(vec![1u32, 2, 4, 8]), frac in 0.0f64..=1.0) {
        let case = generate(seed, &small());
        let want = reference(&case);
        let c = (case.kernel.grid.total() as f64 * frac).floor() as Word;
        prop_assert_eq!(run_ptb(&case, workers, Some(c), seed), want);
    }

    #[test]
    fn divergent_kernels_need_unification(seed in any::<u64>()) {
        let cfg = GenConfig { divergent_early_return: true, ..small() };
        let case = generate(seed, &cfg);
        let launch = |k| LaunchSpec { kernel: k, args: case.args.clone(), global_memory: case.memory.clone() };
        let u = unify_synchronization(&case.kernel);
        let unified = interpret(&launch(&u), 0, LIMIT);
        prop_assert_eq!(unified.status, ExecStatus::Completed);
        let unified = unified.final_memory.unwrap();
        // the unified form is itself schedule-independent
        let again = interpret(&launch(&u), seed, LIMIT).final_memory.unwrap();
        prop_assert_eq!(&again, &unified);
        prop_assert_eq!(run_ptb(&case, 2, None, seed), unified);
    }
}

/// A 16-block kernel preempted after every possible number of claimed tasks
/// resumes to the same memory as an uninterrupted run.
#[test]
fn preempt_sweep_over_every_counter_value() {
    let mut seed = 0;
    let case = loop {
        let c = generate(seed, &small());
        if c.kernel.grid.total() == 16 {
            break c;
        }
        seed += 1;
    };
    let want = reference(&case);
    for c in 0..=16 {
        for workers in [1, 2, 4, 8] {
            assert_eq!(run_ptb(&case, workers, Some(c), c as u64), want, "c={c} workers={workers}");
        }
    }
}

/// Early-return-before-barrier kernels deadlock as-is and after a PTB rewrite
/// that skips unification; both complete once unified.
#[test]
fn divergence_witness() {
    let cfg = GenConfig {
        divergent_early_return: true,
        ..small()
    };
    let mut witnessed = 0;
    for seed in 0..40 {
        let case = generate(seed, &cfg);
        let launch = |k| LaunchSpec {
            kernel: k,
            args: case.args.clone(),
            global_memory: case.memory.clone(),
        };
        let raw = interpret(&launch(&case.kernel), 0, LIMIT);
        if !matches!(raw.status, ExecStatus::DivergentBarrier { .. }) {
            continue;
        }
        witnessed += 1;
        let ptb = make_preemptible_unchecked(&case.kernel, Dim3::linear(2)).unwrap();
        let n = case.memory.len();
        let mut mem = case.memory.clone();
        mem.extend([0, 0]);
        let r = interpret(
            &LaunchSpec {
                kernel: &ptb.kernel,
                args: ptb.args(&case.args, &ptb.control(n, n + 1)),
                global_memory: mem,
            },
            0,
            LIMIT,
        );
        assert_ne!(r.status, ExecStatus::Completed, "seed {seed}");
        assert!(make_preemptible(&case.kernel, Dim3::linear(2)).is_err());
        let u = unify_synchronization(&case.kernel);
        assert_eq!(interpret(&launch(&u), 0, LIMIT).status, ExecStatus::Completed);
    }
    assert!(witnessed >= 20, "only {witnessed} divergent cases");
}
