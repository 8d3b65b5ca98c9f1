//! Desk-scale benchmark presets.

use crate::sim::{GpuSpec, KernelCostModel, Nanos, Priority, NS_PER_US};

use super::{KernelSpec, WorkloadKind, WorkloadSpec};

pub const THREADS_PER_BLOCK: u32 = 1024;

/// 4 SMs, two 1024-thread blocks resident per SM.
pub fn default_gpu() -> GpuSpec {
    GpuSpec {
        num_sms: 4,
        max_threads_per_sm: 2048,
        max_blocks_per_sm: 32,
    }
}

/// 3 SMs with a single resident block each.
pub fn narrow_gpu() -> GpuSpec {
    GpuSpec {
        num_sms: 3,
        max_threads_per_sm: 1024,
        max_blocks_per_sm: 32,
    }
}

fn kernel(name: String, blocks: u64, block_us: f64) -> KernelSpec {
    let bd = (block_us * NS_PER_US as f64).round() as Nanos;
    KernelSpec {
        name,
        cost: KernelCostModel::with_defaults(bd, THREADS_PER_BLOCK, blocks),
        inter_block_dependent: false,
    }
}

/// 12 one-wave kernels; 3.93 ms per request on [`default_gpu`].
pub fn bert_like() -> WorkloadSpec {
    WorkloadSpec {
        name: "bert-like".into(),
        kind: WorkloadKind::Inference,
        priority: Priority::High,
        kernels: (0..12)
            .map(|i| kernel(format!("layer{i}"), 8, 322.5))
            .collect(),
    }
}

/// 20 kernels of 68.5 µs each.
pub fn resnet_like() -> WorkloadSpec {
    WorkloadSpec {
        name: "resnet-like".into(),
        kind: WorkloadKind::Inference,
        priority: Priority::High,
        kernels: (0..20)
            .map(|i| kernel(format!("conv{i}"), 8, 63.5))
            .collect(),
    }
}

/// Training loop with one 32 ms kernel and sixteen short ones.
pub fn whisper_like_train() -> WorkloadSpec {
    let mut kernels = vec![kernel("attention".into(), 10240, 25.0)];
    kernels.extend((0..16).map(|i| kernel(format!("ffn{i}"), 16, 25.0)));
    WorkloadSpec {
        name: "whisper-like-train".into(),
        kind: WorkloadKind::Training,
        priority: Priority::BestEffort,
        kernels,
    }
}

/// Training loop where every kernel finishes in under 0.1 ms.
pub fn resnet_like_train() -> WorkloadSpec {
    WorkloadSpec {
        name: "resnet-like-train".into(),
        kind: WorkloadKind::Training,
        priority: Priority::BestEffort,
        kernels: (0..24)
            .map(|i| kernel(format!("conv{i}"), 8 + 8 * (i % 2), 20.0 + (i % 3) as f64 * 2.5))
            .collect(),
    }
}

/// Two-block kernels: one copy fills a quarter of [`default_gpu`].
pub fn small_train(index: usize) -> WorkloadSpec {
    WorkloadSpec {
        name: format!("small-train-{index}"),
        kind: WorkloadKind::Training,
        priority: Priority::BestEffort,
        kernels: (0..8)
            .map(|i| kernel(format!("k{i}"), 2, 25.0))
            .collect(),
    }
}

/// A single 100-block kernel lasting about 10 ms on [`narrow_gpu`].
pub fn long_kernel_10ms() -> WorkloadSpec {
    WorkloadSpec {
        name: "long-kernel".into(),
        kind: WorkloadKind::Training,
        priority: Priority::BestEffort,
        kernels: vec![kernel("gemm".into(), 100, 294.0)],
    }
}

pub fn by_name(name: &str) -> Option<WorkloadSpec> {
    Some(match name {
        "bert-like" => bert_like(),
        "resnet-like" => resnet_like(),
        "whisper-like-train" => whisper_like_train(),
        "resnet-like-train" => resnet_like_train(),
        "long-kernel" => long_kernel_10ms(),
        _ => {
            let i = name.strip_prefix("small-train-")?.parse().ok()?;
            small_train(i)
        }
    })
}

pub const PRESETS: &[&str] = &[
    "bert-like",
    "resnet-like",
    "whisper-like-train",
    "resnet-like-train",
    "small-train-<n>",
    "long-kernel",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::NS_PER_MS;

    #[test]
    fn bert_request_is_3_93_ms() {
        assert_eq!(bert_like().isolated_unit_latency(&default_gpu()), 3_930 * NS_PER_US);
    }

    #[test]
    fn resnet_kernels_are_short() {
        let gpu = default_gpu();
        for k in resnet_like().kernels.iter().chain(&resnet_like_train().kernels) {
            assert!(super::super::isolated_kernel_latency(&gpu, &k.cost) < NS_PER_MS / 10);
        }
    }

    #[test]
    fn whisper_has_a_kernel_longer_than_a_bert_request() {
        let gpu = default_gpu();
        let bert = bert_like().isolated_unit_latency(&gpu);
        let long = whisper_like_train()
            .kernels
            .iter()
            .map(|k| super::super::isolated_kernel_latency(&gpu, &k.cost))
            .max()
            .unwrap();
        assert!(long >= bert, "{long}");
    }

    #[test]
    fn long_kernel_is_about_10_ms() {
        let w = long_kernel_10ms();
        let t = w.isolated_unit_latency(&narrow_gpu());
        assert!((9_900 * NS_PER_US..=10_100 * NS_PER_US).contains(&t), "{t}");
    }

    #[test]
    fn presets_by_name() {
        assert_eq!(by_name("bert-like"), Some(bert_like()));
        assert_eq!(by_name("small-train-3").unwrap().name, "small-train-3");
        assert_eq!(by_name("nope"), None);
    }
}
