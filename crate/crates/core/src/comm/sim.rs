//! Discrete-event execution of transfer plans on a link topology.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::comm::plan::{Node, PlanKind, Transfer, TransferPlan};
use crate::comm::topology::{HostLinkModel, LinkTopology, PeerModel};
use crate::error::{Error, Result};
use crate::model::Fnv;
use crate::real::Real;

/// A serially reusable link resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Link {
    HostShared,
    Host(usize),
    Egress(usize),
    Ingress(usize),
    Pair(usize, usize),
    PeerBus,
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Link::HostShared => write!(f, "host"),
            Link::Host(d) => write!(f, "host{d}"),
            Link::Egress(d) => write!(f, "egress{d}"),
            Link::Ingress(d) => write!(f, "ingress{d}"),
            Link::Pair(a, b) => write!(f, "peer{a}-{b}"),
            Link::PeerBus => write!(f, "peerbus"),
        }
    }
}

/// Links a transfer occupies and the bandwidth it moves at.
fn route(t: &Transfer, topo: &LinkTopology) -> Result<(Vec<Link>, f64)> {
    let host = |d: usize| match topo.host_link {
        HostLinkModel::Shared => Link::HostShared,
        HostLinkModel::PerDevice => Link::Host(d),
    };
    let in_range = |d: usize| {
        if d < topo.devices {
            Ok(())
        } else {
            Err(Error::Simulation(format!("transfer {} uses device {d} outside the topology", t.id)))
        }
    };
    match (t.src, t.dst) {
        (Node::Host, Node::Device(d)) | (Node::Device(d), Node::Host) => {
            in_range(d)?;
            Ok((vec![host(d)], topo.host_bw))
        }
        (Node::Device(a), Node::Device(b)) if a != b => {
            in_range(a)?;
            in_range(b)?;
            let links = match topo.peer_model {
                PeerModel::PortSerialized => vec![Link::Egress(a), Link::Ingress(b)],
                PeerModel::FullBisection => vec![Link::Pair(a, b)],
                PeerModel::SharedBus => vec![Link::PeerBus],
            };
            Ok((links, topo.peer_bw))
        }
        _ => Err(Error::Simulation(format!(
            "transfer {} has no route from {:?} to {:?}",
            t.id, t.src, t.dst
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub transfer: usize,
    pub src: Node,
    pub dst: Node,
    pub offset: usize,
    pub len: usize,
    pub links: Vec<Link>,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub kind: PlanKind,
    pub block_id: usize,
    pub events: Vec<SimEvent>,
    pub makespan: f64,
    /// Busy fraction of each link over the makespan.
    pub utilization: BTreeMap<String, f64>,
}

impl EventTimeline {
    /// Export in the same `{op, block_id, stream, start, end}` schema as the
    /// offload scheduler timeline; `stream` names the first link used.
    pub fn to_timeline_json(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .events
            .iter()
            .map(|e| {
                let op = match (e.src, e.dst) {
                    (Node::Host, _) => "upload",
                    (_, Node::Host) => "offload",
                    _ => "peer",
                };
                serde_json::json!({
                    "op": op,
                    "block_id": self.block_id,
                    "stream": e.links.first().map(|l| l.to_string()).unwrap_or_default(),
                    "start": e.start,
                    "end": e.end,
                })
            })
            .collect();
        serde_json::Value::Array(rows)
    }
}

/// List-schedule the plan in dependency order (ties by transfer id). A
/// transfer starts once its deps have ended and all its links are free; it
/// holds its links for `len / bw` and ends `latency` later.
pub fn simulate_plan(plan: &TransferPlan, topo: &LinkTopology) -> Result<EventTimeline> {
    topo.validate()?;
    let ts = &plan.transfers;
    let order = dependency_order(plan)?;
    let mut end_of = vec![0.0f64; ts.len()];
    let mut free: BTreeMap<Link, f64> = BTreeMap::new();
    let mut busy: BTreeMap<Link, f64> = BTreeMap::new();
    let mut events = Vec::with_capacity(ts.len());
    for i in order {
        let t = &ts[i];
        let (links, bw) = route(t, topo)?;
        let after_deps = t.deps.iter().map(|&d| end_of[d]).fold(0.0, f64::max);
        let start = links.iter().map(|l| free.get(l).copied().unwrap_or(0.0)).fold(after_deps, f64::max);
        let occupancy = t.len as f64 / bw;
        for l in &links {
            free.insert(*l, start + occupancy);
            *busy.entry(*l).or_default() += occupancy;
        }
        let end = start + occupancy + topo.latency;
        end_of[i] = end;
        events.push(SimEvent {
            transfer: i,
            src: t.src,
            dst: t.dst,
            offset: t.offset,
            len: t.len,
            links,
            start,
            end,
        });
    }
    let makespan = events.iter().map(|e| e.end).fold(0.0, f64::max);
    let utilization = busy
        .into_iter()
        .map(|(l, b)| (l.to_string(), if makespan > 0.0 { b / makespan } else { 0.0 }))
        .collect();
    Ok(EventTimeline {
        kind: plan.kind,
        block_id: plan.block_id,
        events,
        makespan,
        utilization,
    })
}

fn checksum<T: Real>(v: &[T]) -> u64 {
    let mut h = Fnv::new();
    for x in v {
        h.write_u64(x.bits());
    }
    h.finish()
}

/// Replay an upload plan on real buffers. Returns each device's copy of the
/// block; fails if a device forwards a range it has not received or ends
/// without the full block.
pub fn execute_upload<T: Real>(plan: &TransferPlan, host_block: &[T]) -> Result<Vec<Vec<T>>> {
    if host_block.len() != plan.m {
        return Err(Error::dim("uploaded block", plan.m, host_block.len()));
    }
    let mut bufs = vec![vec![T::zero(); plan.m]; plan.n];
    let mut have = vec![vec![false; plan.m]; plan.n];
    for t in dependency_order(plan)?.into_iter().map(|i| &plan.transfers[i]) {
        let r = t.offset..t.offset + t.len;
        let data: Vec<T> = match t.src {
            Node::Host => host_block[r.clone()].to_vec(),
            Node::Device(s) => {
                if !have[s][r.clone()].iter().all(|&h| h) {
                    return Err(Error::Simulation(format!("device {s} forwards a range it does not hold")));
                }
                bufs[s][r.clone()].to_vec()
            }
        };
        let Node::Device(d) = t.dst else {
            return Err(Error::Simulation("upload plan sends to host".into()));
        };
        bufs[d][r.clone()].copy_from_slice(&data);
        have[d][r].iter_mut().for_each(|h| *h = true);
    }
    if let Some(d) = have.iter().position(|h| !h.iter().all(|&x| x)) {
        return Err(Error::Simulation(format!("device {d} does not hold the full block after upload")));
    }
    Ok(bufs)
}

/// Replay an offload plan: the host reassembles the block from the ranges
/// devices send. Refuses to run when device copies differ, since slices
/// from diverged replicas would assemble a corrupt block.
pub fn execute_offload<T: Real>(plan: &TransferPlan, devices: &[&[T]]) -> Result<Vec<T>> {
    if devices.len() != plan.n {
        return Err(Error::dim("device copies", plan.n, devices.len()));
    }
    if let Some(d) = devices.iter().position(|v| v.len() != plan.m) {
        return Err(Error::dim("device block", plan.m, devices[d].len()));
    }
    let sums: Vec<u64> = devices.iter().map(|v| checksum(v)).collect();
    if sums.iter().any(|&s| s != sums[0]) {
        return Err(Error::Consistency(format!(
            "device copies of block {} diverge (checksums {sums:x?}); refusing to offload",
            plan.block_id
        )));
    }
    let mut host = vec![T::zero(); plan.m];
    let mut have = vec![false; plan.m];
    for t in dependency_order(plan)?.into_iter().map(|i| &plan.transfers[i]) {
        let (Node::Device(s), Node::Host) = (t.src, t.dst) else {
            return Err(Error::Simulation("offload plan has a non device-to-host transfer".into()));
        };
        let r = t.offset..t.offset + t.len;
        host[r.clone()].copy_from_slice(&devices[s][r.clone()]);
        have[r].iter_mut().for_each(|h| *h = true);
    }
    if !have.iter().all(|&h| h) {
        return Err(Error::Simulation("offload did not cover the whole block".into()));
    }
    Ok(host)
}

/// Transfer ids in dependency order, ties broken by id.
fn dependency_order(plan: &TransferPlan) -> Result<Vec<usize>> {
    let ts = &plan.transfers;
    let n = ts.len();
    let mut indeg = vec![0usize; n];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, t) in ts.iter().enumerate() {
        if t.id != i {
            return Err(Error::Simulation(format!("transfer at position {i} has id {}", t.id)));
        }
        if t.offset + t.len > plan.m {
            return Err(Error::Simulation(format!("transfer {i} range exceeds the block")));
        }
        for &d in &t.deps {
            if d >= n {
                return Err(Error::Simulation(format!("transfer {i} depends on missing transfer {d}")));
            }
            indeg[i] += 1;
            users[d].push(i);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &u in &users[i] {
            indeg[u] -= 1;
            if indeg[u] == 0 {
                ready.push(Reverse(u));
            }
        }
    }
    if order.len() != n {
        let stuck: Vec<usize> = (0..n).filter(|&i| indeg[i] > 0).collect();
        return Err(Error::Simulation(format!("cyclic transfer dependencies among {stuck:?}")));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::layout::SliceLayout;
    use crate::comm::plan::*;

    fn topo(host: f64, peer: f64, lat: f64, n: usize) -> LinkTopology {
        LinkTopology::new(host, peer, lat, n).unwrap()
    }

    #[test]
    fn single_event() {
        let t = topo(4.0, 4.0, 0.5, 1);
        let l = SliceLayout::new(0, 8, 1).unwrap();
        let tl = simulate_plan(&plan_sliced_upload(&l, &t).unwrap(), &t).unwrap();
        assert_eq!(tl.makespan, 8.0 / 4.0 + 0.5);
    }

    #[test]
    fn hand_simulated_example() {
        let t = topo(1.0, 3.0, 0.0, 4).with_host_link(HostLinkModel::PerDevice);
        let l = SliceLayout::new(0, 12, 4).unwrap();
        let tl = simulate_plan(&plan_sliced_upload(&l, &t).unwrap(), &t).unwrap();
        assert_eq!(tl.makespan, 6.0);
        let shared = t.with_host_link(HostLinkModel::Shared);
        let naive = simulate_plan(&plan_naive_upload(&l, &shared).unwrap(), &shared).unwrap();
        assert_eq!(naive.makespan, 48.0);
        assert!(tl.utilization.values().all(|&u| u > 0.0 && u <= 1.0));
    }

    #[test]
    fn cycle_is_simulation_error() {
        let t = topo(1.0, 1.0, 0.0, 2);
        let tr = |id, deps| Transfer {
            id,
            src: Node::Host,
            dst: Node::Device(0),
            offset: 0,
            len: 1,
            deps,
        };
        let plan = TransferPlan {
            kind: PlanKind::NaiveUpload,
            block_id: 0,
            m: 1,
            n: 1,
            transfers: vec![tr(0, vec![1]), tr(1, vec![0])],
        };
        assert!(matches!(simulate_plan(&plan, &t), Err(Error::Simulation(_))));
    }

    #[test]
    fn bytes_round_trip() {
        let t = topo(1.0, 6.0, 0.0, 4);
        let block: Vec<f64> = (0..10).map(|i| i as f64 * 0.25).collect();
        let l = SliceLayout::new(2, 10, 4).unwrap();
        for plan in [plan_sliced_upload(&l, &t).unwrap(), plan_pipelined_upload(&l, &t).unwrap()] {
            let copies = execute_upload(&plan, &block).unwrap();
            assert!(copies.iter().all(|c| c == &block));
        }
        let copies = execute_upload(&plan_sliced_upload(&l, &t).unwrap(), &block).unwrap();
        let views: Vec<&[f64]> = copies.iter().map(|c| c.as_slice()).collect();
        let off = plan_sliced_offload(&l, &t).unwrap();
        assert_eq!(execute_offload(&off, &views).unwrap(), block);
        let mut bad = copies.clone();
        bad[3][0] += 1.0;
        let views: Vec<&[f64]> = bad.iter().map(|c| c.as_slice()).collect();
        assert!(matches!(execute_offload(&off, &views), Err(Error::Consistency(_))));
    }
}
