//! Two-tier memory simulation and the block streaming scheduler.

mod memory;
mod pool;
mod runtime;
mod schedule;

pub use memory::{offload_block, upload_block, DeviceMemory, HostMemory, Residency, ResidencyHandle};
pub use pool::{AllocKey, MemoryPool, Tier};
pub use runtime::{
    activation_bytes, activation_footprint, mezo_device_peak, run_zo2_schedule, CostModel, ExecutorKind,
    IterationReport, PassLosses, RuntimeOptions, Zo2Runtime,
};
pub use schedule::{
    run_event_loop, NoWork, OpHandler, OpKind, Schedule, ScheduleMode, ScheduleOptions, StreamOp, Timeline,
    TimelineEntry, STREAM_SLOTS,
};
