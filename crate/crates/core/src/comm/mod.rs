//! Sliced host/peer transfer strategy: link topology, slice layouts,
//! transfer plans, a discrete-event simulator and the closed-form cost.

mod layout;
mod plan;
mod sim;
mod topology;

pub use layout::{apply_thread_aligned_layout, AlignedHostStore, NaiveHostStore, Slice, SliceLayout};
pub use plan::{
    plan_naive_offload, plan_naive_upload, plan_pipelined_upload, plan_sliced_offload, plan_sliced_upload, t_comm,
    Node, PlanKind, Transfer, TransferPlan,
};
pub use sim::{execute_offload, execute_upload, simulate_plan, EventTimeline, Link, SimEvent};
pub use topology::{HostLinkModel, LinkTopology, PeerModel};

use crate::error::Result;

/// Simulated naive-over-sliced makespan ratios for one block of `m`
/// parameters on `topo.devices` devices.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SliceSpeedup {
    pub n: usize,
    pub upload_sliced: f64,
    pub upload_naive: f64,
    pub offload_sliced: f64,
    pub offload_naive: f64,
}

impl SliceSpeedup {
    pub fn upload(&self) -> f64 {
        self.upload_naive / self.upload_sliced
    }

    pub fn offload(&self) -> f64 {
        self.offload_naive / self.offload_sliced
    }
}

pub fn slice_speedup(m: usize, topo: &LinkTopology) -> Result<SliceSpeedup> {
    let layout = SliceLayout::new(0, m, topo.devices)?;
    let span = |p: TransferPlan| simulate_plan(&p, topo).map(|t| t.makespan);
    Ok(SliceSpeedup {
        n: topo.devices,
        upload_sliced: span(plan_sliced_upload(&layout, topo)?)?,
        upload_naive: span(plan_naive_upload(&layout, topo)?)?,
        offload_sliced: span(plan_sliced_offload(&layout, topo)?)?,
        offload_naive: span(plan_naive_offload(&layout, topo)?)?,
    })
}
