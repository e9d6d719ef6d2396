//! Transfer plans for moving one block between host and devices.

use serde::{Deserialize, Serialize};

use crate::comm::layout::SliceLayout;
use crate::comm::topology::LinkTopology;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    Host,
    Device(usize),
}

/// One contiguous parameter range moved from `src` to `dst`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub id: usize,
    pub src: Node,
    pub dst: Node,
    pub offset: usize,
    /// Parameters moved.
    pub len: usize,
    /// Transfers that must complete before this one starts.
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    SlicedUpload,
    PipelinedUpload,
    NaiveUpload,
    SlicedOffload,
    NaiveOffload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub kind: PlanKind,
    pub block_id: usize,
    pub m: usize,
    pub n: usize,
    pub transfers: Vec<Transfer>,
}

impl TransferPlan {
    /// Parameters moved over host links.
    pub fn host_volume(&self) -> usize {
        self.transfers
            .iter()
            .filter(|t| t.src == Node::Host || t.dst == Node::Host)
            .map(|t| t.len)
            .sum()
    }

    /// Parameters moved between devices.
    pub fn peer_volume(&self) -> usize {
        self.transfers
            .iter()
            .filter(|t| t.src != Node::Host && t.dst != Node::Host)
            .map(|t| t.len)
            .sum()
    }
}

struct PlanBuilder {
    transfers: Vec<Transfer>,
}

impl PlanBuilder {
    fn push(&mut self, src: Node, dst: Node, offset: usize, len: usize, deps: Vec<usize>) -> usize {
        let id = self.transfers.len();
        self.transfers.push(Transfer {
            id,
            src,
            dst,
            offset,
            len,
            deps,
        });
        id
    }
}

fn check(layout: &SliceLayout, topo: &LinkTopology) -> Result<()> {
    topo.validate()?;
    layout.validate()?;
    if layout.n > topo.devices {
        return Err(Error::Config(format!(
            "layout spans {} devices but the topology has {}",
            layout.n, topo.devices
        )));
    }
    Ok(())
}

/// Host to device `i` for slice `i` (phase 1), then the peer exchange of
/// every slice to every other device (phase 2). With `barrier` the peer
/// phase waits for all of phase 1; otherwise each owner forwards its slice
/// as soon as it has landed.
fn sliced_upload(layout: &SliceLayout, topo: &LinkTopology, barrier: bool) -> Result<TransferPlan> {
    check(layout, topo)?;
    let n = layout.n;
    let mut b = PlanBuilder { transfers: Vec::new() };
    let phase1: Vec<usize> = layout
        .slices
        .iter()
        .map(|s| b.push(Node::Host, Node::Device(s.owner), s.offset, s.len, Vec::new()))
        .collect();
    // Round r: device i sends its slice to device (i + r) mod n, so every
    // device sends and receives exactly one slice per round.
    for r in 1..n {
        for (i, s) in layout.slices.iter().enumerate() {
            let deps = if barrier { phase1.clone() } else { vec![phase1[i]] };
            b.push(Node::Device(s.owner), Node::Device((s.owner + r) % n), s.offset, s.len, deps);
        }
    }
    Ok(TransferPlan {
        kind: if barrier {
            PlanKind::SlicedUpload
        } else {
            PlanKind::PipelinedUpload
        },
        block_id: layout.block_id,
        m: layout.m,
        n,
        transfers: b.transfers,
    })
}

pub fn plan_sliced_upload(layout: &SliceLayout, topo: &LinkTopology) -> Result<TransferPlan> {
    sliced_upload(layout, topo, true)
}

/// Slice-granular variant without the phase barrier.
pub fn plan_pipelined_upload(layout: &SliceLayout, topo: &LinkTopology) -> Result<TransferPlan> {
    sliced_upload(layout, topo, false)
}

/// Every device uploads the full block from host.
pub fn plan_naive_upload(layout: &SliceLayout, topo: &LinkTopology) -> Result<TransferPlan> {
    check(layout, topo)?;
    let mut b = PlanBuilder { transfers: Vec::new() };
    for d in 0..layout.n {
        b.push(Node::Host, Node::Device(d), 0, layout.m, Vec::new());
    }
    Ok(TransferPlan {
        kind: PlanKind::NaiveUpload,
        block_id: layout.block_id,
        m: layout.m,
        n: layout.n,
        transfers: b.transfers,
    })
}

/// Each device sends only its owned slice to the host.
pub fn plan_sliced_offload(layout: &SliceLayout, topo: &LinkTopology) -> Result<TransferPlan> {
    check(layout, topo)?;
    let mut b = PlanBuilder { transfers: Vec::new() };
    for s in &layout.slices {
        b.push(Node::Device(s.owner), Node::Host, s.offset, s.len, Vec::new());
    }
    Ok(TransferPlan {
        kind: PlanKind::SlicedOffload,
        block_id: layout.block_id,
        m: layout.m,
        n: layout.n,
        transfers: b.transfers,
    })
}

/// Every device sends the full block to the host.
pub fn plan_naive_offload(layout: &SliceLayout, topo: &LinkTopology) -> Result<TransferPlan> {
    check(layout, topo)?;
    let mut b = PlanBuilder { transfers: Vec::new() };
    for d in 0..layout.n {
        b.push(Node::Device(d), Node::Host, 0, layout.m, Vec::new());
    }
    Ok(TransferPlan {
        kind: PlanKind::NaiveOffload,
        block_id: layout.block_id,
        m: layout.m,
        n: layout.n,
        transfers: b.transfers,
    })
}

/// Closed-form upload time of the sliced plan with independent host links
/// and no latency: `(m/n)/host_bw + ((n-1)m/n)/peer_bw`.
pub fn t_comm(m: f64, n: usize, topo: &LinkTopology) -> f64 {
    let n = n as f64;
    (m / n) / topo.host_bw + ((n - 1.0) * m / n) / topo.peer_bw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volumes() {
        let topo = LinkTopology::new(1.0, 3.0, 0.0, 4).unwrap();
        let l = SliceLayout::new(0, 12, 4).unwrap();
        let up = plan_sliced_upload(&l, &topo).unwrap();
        assert_eq!(up.host_volume(), 12);
        assert_eq!(up.peer_volume(), 36);
        assert_eq!(plan_naive_upload(&l, &topo).unwrap().host_volume(), 48);
        assert_eq!(plan_sliced_offload(&l, &topo).unwrap().host_volume(), 12);
        assert_eq!(plan_naive_offload(&l, &topo).unwrap().host_volume(), 48);
        assert!(plan_sliced_upload(&SliceLayout::new(0, 12, 8).unwrap(), &topo).is_err());
        assert_eq!(t_comm(12.0, 4, &topo), 6.0);
    }
}
