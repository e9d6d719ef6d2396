//! Upload/compute/offload dependency graph and its simulated-clock execution.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Upload,
    Compute,
    Offload,
}

impl OpKind {
    pub const ALL: [OpKind; 3] = [OpKind::Upload, OpKind::Compute, OpKind::Offload];

    /// Each kind runs on its own stream.
    pub fn stream(self) -> usize {
        match self {
            OpKind::Upload => 0,
            OpKind::Compute => 1,
            OpKind::Offload => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Upload => "upload",
            OpKind::Compute => "compute",
            OpKind::Offload => "offload",
        }
    }

    fn letter(self) -> char {
        match self {
            OpKind::Upload => 'U',
            OpKind::Compute => 'C',
            OpKind::Offload => 'O',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamOp {
    pub id: usize,
    pub kind: OpKind,
    pub block_id: usize,
    pub deps: Vec<usize>,
    /// Position among the ops of the same stream.
    pub issue_order: usize,
}

impl StreamOp {
    pub fn label(&self) -> String {
        format!("{}({})", self.kind.letter(), self.block_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    #[default]
    Overlapped,
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleOptions {
    pub mode: ScheduleMode,
    /// Keep the embedding and LM head on the device for the whole run
    /// instead of streaming them like transformer blocks.
    pub resident_embed_head: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            mode: ScheduleMode::Overlapped,
            resident_embed_head: true,
        }
    }
}

/// Blocks that may be on the device at once in overlapped mode: the one
/// computing, the one prefetching and the one draining back to host.
pub const STREAM_SLOTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    ops: Vec<StreamOp>,
    block_count: usize,
    streamed: Vec<bool>,
}

impl Schedule {
    /// Build the per-iteration schedule for a model with `n_blocks`
    /// transformer blocks (block ids `0..=n_blocks + 1`, embedding first,
    /// LM head last).
    pub fn zo2(n_blocks: usize, opts: ScheduleOptions) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::Config("schedule needs at least one transformer block".into()));
        }
        let count = n_blocks + 2;
        let streamed: Vec<bool> = (0..count)
            .map(|p| !(opts.resident_embed_head && (p == 0 || p == count - 1)))
            .collect();
        let mut b = Builder::new(count);
        match opts.mode {
            ScheduleMode::Serial => {
                let mut prev: Option<usize> = None;
                for p in 0..count {
                    if streamed[p] {
                        prev = Some(b.push(OpKind::Upload, p, prev.into_iter().collect()));
                    }
                    let mut deps: Vec<usize> = prev.into_iter().collect();
                    if p > 0 {
                        deps.push(b.compute[p - 1].expect("previous compute issued"));
                    }
                    prev = Some(b.push(OpKind::Compute, p, deps));
                    if streamed[p] {
                        let c = b.compute[p].expect("issued");
                        prev = Some(b.push(OpKind::Offload, p, vec![c]));
                    }
                }
            }
            ScheduleMode::Overlapped => {
                let order: Vec<usize> = (0..count).filter(|&p| streamed[p]).collect();
                let slot_dep = |b: &Builder, p: usize| -> Vec<usize> {
                    let k = order.iter().position(|&q| q == p).expect("streamed");
                    if k >= STREAM_SLOTS {
                        b.offload[order[k - STREAM_SLOTS]].into_iter().collect()
                    } else {
                        Vec::new()
                    }
                };
                if streamed[0] {
                    b.push(OpKind::Upload, 0, Vec::new());
                }
                for p in 0..count {
                    // Host-side waits before this step's launches.
                    let mut waits = Vec::new();
                    if let Some(u) = b.upload[p] {
                        waits.push(u);
                    }
                    if p > 0 {
                        waits.push(b.compute[p - 1].expect("issued"));
                    }
                    if p > 0 && streamed[p - 1] {
                        b.push(OpKind::Offload, p - 1, waits.clone());
                    }
                    b.push(OpKind::Compute, p, waits.clone());
                    if p + 1 < count && streamed[p + 1] {
                        let mut deps = waits;
                        deps.extend(slot_dep(&b, p + 1));
                        b.push(OpKind::Upload, p + 1, deps);
                    }
                }
                if streamed[count - 1] {
                    let c = b.compute[count - 1].expect("issued");
                    b.push(OpKind::Offload, count - 1, vec![c]);
                }
            }
        }
        let s = Schedule {
            ops: b.ops,
            block_count: count,
            streamed,
        };
        s.validate()?;
        Ok(s)
    }

    /// A schedule from explicit ops, for custom or adversarial graphs.
    /// Ids must equal positions; `issue_order` is recomputed from position.
    pub fn from_ops(mut ops: Vec<StreamOp>, block_count: usize, streamed: Vec<bool>) -> Result<Self> {
        let mut counters = [0usize; 3];
        for (i, op) in ops.iter_mut().enumerate() {
            if op.id != i {
                return Err(Error::Schedule(format!("op at position {i} has id {}", op.id)));
            }
            if op.block_id >= block_count {
                return Err(Error::Schedule(format!("{} refers to unknown block", op.label())));
            }
            let s = op.kind.stream();
            op.issue_order = counters[s];
            counters[s] += 1;
        }
        let n = ops.len();
        if let Some(op) = ops.iter().find(|op| op.deps.iter().any(|&d| d >= n)) {
            return Err(Error::Schedule(format!("{} depends on a missing op", op.label())));
        }
        if streamed.len() != block_count {
            return Err(Error::dim("streamed flags", block_count.to_string(), streamed.len().to_string()));
        }
        Ok(Schedule {
            ops,
            block_count,
            streamed,
        })
    }

    pub fn ops(&self) -> &[StreamOp] {
        &self.ops
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    pub fn is_streamed(&self, block_id: usize) -> bool {
        self.streamed[block_id]
    }

    pub fn streamed(&self) -> &[bool] {
        &self.streamed
    }

    /// Ops of one stream in issue order.
    pub fn stream_ops(&self, kind: OpKind) -> Vec<usize> {
        self.ops.iter().filter(|o| o.kind == kind).map(|o| o.id).collect()
    }

    /// Every op's predecessors: explicit deps plus the previous op on its
    /// stream.
    fn wait_edges(&self) -> Vec<Vec<usize>> {
        let mut last = [None::<usize>; 3];
        self.ops
            .iter()
            .map(|op| {
                let mut e = op.deps.clone();
                let s = op.kind.stream();
                if let Some(prev) = last[s] {
                    e.push(prev);
                }
                last[s] = Some(op.id);
                e
            })
            .collect()
    }

    /// Check that dependencies plus per-stream FIFO order form a DAG.
    pub fn validate(&self) -> Result<()> {
        let edges = self.wait_edges();
        let all: BTreeSet<usize> = (0..self.ops.len()).collect();
        match find_cycle(&edges, &all) {
            Some(cycle) => Err(Error::Deadlock {
                cycle: cycle.into_iter().map(|i| self.ops[i].label()).collect(),
            }),
            None => Ok(()),
        }
    }
}

struct Builder {
    ops: Vec<StreamOp>,
    counters: [usize; 3],
    upload: Vec<Option<usize>>,
    compute: Vec<Option<usize>>,
    offload: Vec<Option<usize>>,
}

impl Builder {
    fn new(count: usize) -> Self {
        Builder {
            ops: Vec::new(),
            counters: [0; 3],
            upload: vec![None; count],
            compute: vec![None; count],
            offload: vec![None; count],
        }
    }

    fn push(&mut self, kind: OpKind, block_id: usize, mut deps: Vec<usize>) -> usize {
        deps.sort_unstable();
        deps.dedup();
        let id = self.ops.len();
        let s = kind.stream();
        self.ops.push(StreamOp {
            id,
            kind,
            block_id,
            deps,
            issue_order: self.counters[s],
        });
        self.counters[s] += 1;
        match kind {
            OpKind::Upload => self.upload[block_id] = Some(id),
            OpKind::Compute => self.compute[block_id] = Some(id),
            OpKind::Offload => self.offload[block_id] = Some(id),
        }
        id
    }
}

/// A cycle among `nodes` in the wait-for graph, if any.
fn find_cycle(edges: &[Vec<usize>], nodes: &BTreeSet<usize>) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark = vec![Mark::New; edges.len()];
    for &root in nodes {
        if mark[root] != Mark::New {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        mark[root] = Mark::Active;
        while let Some(&mut (v, ref mut i)) = stack.last_mut() {
            let next = edges[v].iter().skip(*i).find(|w| nodes.contains(w)).copied();
            *i += 1;
            match next {
                None => {
                    if *i > edges[v].len() {
                        mark[v] = Mark::Done;
                        stack.pop();
                    }
                }
                Some(w) => match mark[w] {
                    Mark::New => {
                        mark[w] = Mark::Active;
                        stack.push((w, 0));
                    }
                    Mark::Active => {
                        let start = stack.iter().position(|&(x, _)| x == w).expect("on stack");
                        return Some(stack[start..].iter().map(|&(x, _)| x).collect());
                    }
                    Mark::Done => {}
                },
            }
        }
    }
    None
}

/// Callbacks fired by [`run_event_loop`] at op start and completion.
pub trait OpHandler {
    fn on_start(&mut self, op: &StreamOp, now: f64) -> Result<()>;
    fn on_end(&mut self, op: &StreamOp, now: f64) -> Result<()>;
}

/// Handler that does nothing; used for pure timing simulations.
pub struct NoWork;

impl OpHandler for NoWork {
    fn on_start(&mut self, _: &StreamOp, _: f64) -> Result<()> {
        Ok(())
    }
    fn on_end(&mut self, _: &StreamOp, _: f64) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub op: OpKind,
    pub block_id: usize,
    pub stream: OpKind,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timeline {
    pub entries: Vec<TimelineEntry>,
}

impl Timeline {
    pub fn makespan(&self) -> f64 {
        self.entries.iter().map(|e| e.end).fold(0.0, f64::max)
    }

    pub fn find(&self, op: OpKind, block_id: usize) -> Option<&TimelineEntry> {
        self.entries.iter().find(|e| e.op == op && e.block_id == block_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("timeline serializes")
    }

    /// Shift every entry by `offset`, for concatenating iterations.
    pub fn shifted(&self, offset: f64) -> Timeline {
        Timeline {
            entries: self
                .entries
                .iter()
                .map(|e| TimelineEntry {
                    start: e.start + offset,
                    end: e.end + offset,
                    ..e.clone()
                })
                .collect(),
        }
    }
}

/// Deterministic single-threaded discrete-event execution. An op starts
/// once all its deps have completed, it is next in its stream's issue
/// order and the stream is idle. Completions at a given instant are
/// processed before starts at that instant.
pub fn run_event_loop(
    schedule: &Schedule,
    duration: impl Fn(&StreamOp) -> f64,
    handler: &mut impl OpHandler,
) -> Result<Timeline> {
    let ops = schedule.ops();
    let queues: Vec<Vec<usize>> = OpKind::ALL.iter().map(|&k| schedule.stream_ops(k)).collect();
    let mut head = [0usize; 3];
    let mut running: [Option<(usize, f64, f64)>; 3] = [None; 3];
    let mut done = vec![false; ops.len()];
    let mut remaining = ops.len();
    let mut now = 0.0f64;
    let mut entries = Vec::with_capacity(ops.len());

    while remaining > 0 {
        let mut started = true;
        while started {
            started = false;
            for s in 0..3 {
                if running[s].is_some() || head[s] >= queues[s].len() {
                    continue;
                }
                let op = &ops[queues[s][head[s]]];
                if op.deps.iter().all(|&d| done[d]) {
                    handler.on_start(op, now)?;
                    let d = duration(op);
                    if !(d.is_finite() && d >= 0.0) {
                        return Err(Error::Schedule(format!("{} has invalid duration {d}", op.label())));
                    }
                    running[s] = Some((op.id, now, now + d));
                    head[s] += 1;
                    started = true;
                }
            }
        }
        let next_end = running.iter().flatten().map(|&(_, _, e)| e).fold(f64::INFINITY, f64::min);
        if !next_end.is_finite() {
            let pending: BTreeSet<usize> = (0..ops.len()).filter(|&i| !done[i]).collect();
            let edges = schedule.wait_edges();
            let cycle = find_cycle(&edges, &pending).unwrap_or_else(|| pending.iter().copied().collect());
            return Err(Error::Deadlock {
                cycle: cycle.into_iter().map(|i| ops[i].label()).collect(),
            });
        }
        now = next_end;
        for s in 0..3 {
            if let Some((id, start, end)) = running[s] {
                if end <= now {
                    running[s] = None;
                    let op = &ops[id];
                    handler.on_end(op, now)?;
                    done[id] = true;
                    remaining -= 1;
                    entries.push(TimelineEntry {
                        op: op.kind,
                        block_id: op.block_id,
                        stream: op.kind,
                        start,
                        end,
                    });
                }
            }
        }
    }
    entries.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.stream.cmp(&b.stream)));
    Ok(Timeline { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: &Schedule) -> Vec<String> {
        s.ops().iter().map(|o| o.label()).collect()
    }

    #[test]
    fn single_block_degenerates() {
        let s = Schedule::zo2(1, ScheduleOptions::default()).unwrap();
        assert_eq!(labels(&s), ["C(0)", "U(1)", "C(1)", "O(1)", "C(2)"]);
        let t = run_event_loop(&s, |_| 1.0, &mut NoWork).unwrap();
        let c0 = t.find(OpKind::Compute, 0).unwrap();
        let u1 = t.find(OpKind::Upload, 1).unwrap();
        assert_eq!((c0.start, u1.start), (0.0, 0.0));
        let o1 = t.find(OpKind::Offload, 1).unwrap();
        let ch = t.find(OpKind::Compute, 2).unwrap();
        assert_eq!((o1.start, ch.start), (2.0, 2.0));
        assert_eq!(t.makespan(), 3.0);
    }

    #[test]
    fn uniform_makespan_is_n_plus_two() {
        for n in 1..12 {
            let s = Schedule::zo2(n, ScheduleOptions::default()).unwrap();
            let t = run_event_loop(&s, |_| 1.0, &mut NoWork).unwrap();
            assert_eq!(t.makespan(), (n + 2) as f64, "n={n}");
            let serial = Schedule::zo2(
                n,
                ScheduleOptions {
                    mode: ScheduleMode::Serial,
                    ..Default::default()
                },
            )
            .unwrap();
            let t = run_event_loop(&serial, |_| 1.0, &mut NoWork).unwrap();
            assert_eq!(t.makespan(), (3 * n + 2) as f64);
        }
    }

    #[test]
    fn streamed_head_and_embedding() {
        let opts = ScheduleOptions {
            resident_embed_head: false,
            ..Default::default()
        };
        let s = Schedule::zo2(2, opts).unwrap();
        assert_eq!(s.stream_ops(OpKind::Upload).len(), 4);
        assert_eq!(s.stream_ops(OpKind::Offload).len(), 4);
        let t = run_event_loop(&s, |_| 1.0, &mut NoWork).unwrap();
        assert_eq!(t.makespan(), 6.0);
    }

    #[test]
    fn cycle_is_reported() {
        let op = |id, kind, block_id, deps: Vec<usize>| StreamOp {
            id,
            kind,
            block_id,
            deps,
            issue_order: 0,
        };
        let s = Schedule::from_ops(
            vec![
                op(0, OpKind::Upload, 0, vec![1]),
                op(1, OpKind::Compute, 0, vec![0]),
            ],
            1,
            vec![true],
        )
        .unwrap();
        assert!(matches!(s.validate(), Err(Error::Deadlock { .. })));
        match run_event_loop(&s, |_| 1.0, &mut NoWork) {
            Err(Error::Deadlock { cycle }) => {
                assert_eq!(cycle.len(), 2);
                assert!(cycle.contains(&"U(0)".to_string()));
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn fifo_order_conflict_deadlocks() {
        // Second compute is issued first but depends on the later one.
        let op = |id, block_id, deps: Vec<usize>| StreamOp {
            id,
            kind: OpKind::Compute,
            block_id,
            deps,
            issue_order: 0,
        };
        let s = Schedule::from_ops(vec![op(0, 1, vec![1]), op(1, 0, vec![])], 2, vec![false; 2]).unwrap();
        assert!(run_event_loop(&s, |_| 1.0, &mut NoWork).is_err());
    }
}
