pub mod ir;
pub mod transforms;
pub mod sim;
pub mod profiler;
pub mod workloads;
pub mod scheduler;
pub mod experiment;
