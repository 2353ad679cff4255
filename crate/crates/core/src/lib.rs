pub mod clock;
pub mod device;
pub mod distrib;
pub mod export;
pub mod harness;
pub mod profiler;
pub mod tasking;
pub mod workload;
