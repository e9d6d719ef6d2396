//! ZO2 execution: lazy ZO iterations driven block by block through the
//! upload/compute/offload schedule over simulated host and device memory.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss, Activation, Batch, ModelConfig, ParamBlock, ParamStore};
use crate::offload::memory::{offload_block, upload_block, DeviceMemory, HostMemory};
use crate::offload::pool::AllocKey;
use crate::offload::schedule::{run_event_loop, OpHandler, OpKind, Schedule, ScheduleOptions, StreamOp, Timeline};
use crate::real::Real;
use crate::zo::{Direction, Directions, IterationCursor, LazyZoState, PassOutputs, ZoHyper, ZoStep};

/// Simulated op durations, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CostModel {
    /// Every op takes `d`.
    Uniform { d: f64 },
    /// Transfers cost `latency + bytes / host_bw`; a block compute costs
    /// `compute`.
    Modeled { host_bw: f64, latency: f64, compute: f64 },
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::Uniform { d: 1.0 }
    }
}

impl CostModel {
    pub fn duration(&self, kind: OpKind, bytes: usize) -> f64 {
        match *self {
            CostModel::Uniform { d } => d,
            CostModel::Modeled {
                host_bw,
                latency,
                compute,
            } => match kind {
                OpKind::Compute => compute,
                OpKind::Upload | OpKind::Offload => latency + bytes as f64 / host_bw,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CostModel::Uniform { d } => d.is_finite() && d >= 0.0,
            CostModel::Modeled {
                host_bw,
                latency,
                compute,
            } => host_bw.is_finite() && host_bw > 0.0 && latency >= 0.0 && compute >= 0.0 && latency.is_finite() && compute.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid cost model {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutorKind {
    /// Deterministic discrete-event loop on the simulated clock.
    #[default]
    EventLoop,
    /// One OS thread per stream; no timeline is recorded.
    Threaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeOptions {
    pub schedule: ScheduleOptions,
    pub device_capacity: usize,
    pub cost: CostModel,
    pub executor: ExecutorKind,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        RuntimeOptions {
            schedule: ScheduleOptions::default(),
            device_capacity: usize::MAX,
            cost: CostModel::default(),
            executor: ExecutorKind::EventLoop,
        }
    }
}

/// Losses of the directional passes that were evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassLosses {
    pub pos: Option<f64>,
    pub neg: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub device_peak: usize,
    pub bytes_uploaded: usize,
    pub bytes_offloaded: usize,
    pub timeline: Timeline,
}

/// Bytes of one block's outputs for the given number of directions.
pub fn activation_bytes<T: Real>(config: &ModelConfig, batch: &Batch, block_id: usize, directions: usize) -> usize {
    let width = if block_id == config.head_block_id() {
        config.vocab_size
    } else {
        config.d_model
    };
    batch.batch * batch.seq_len * width * T::BYTES * directions
}

/// Largest input-plus-output activation footprint of any single block.
pub fn activation_footprint<T: Real>(config: &ModelConfig, batch: &Batch, directions: usize) -> usize {
    (0..config.block_count())
        .map(|p| {
            let input = if p == 0 {
                0
            } else {
                activation_bytes::<T>(config, batch, p - 1, directions)
            };
            input + activation_bytes::<T>(config, batch, p, directions)
        })
        .max()
        .unwrap_or(0)
}

/// Device bytes when the whole model is resident, as in in-memory MeZO.
pub fn mezo_device_peak<T: Real>(store: &ParamStore<T>, batch: &Batch) -> usize {
    store.byte_size() + activation_footprint::<T>(store.config(), batch, 1)
}

fn direction_count(d: Directions) -> usize {
    match d {
        Directions::Both => 2,
        Directions::Only(_) => 1,
    }
}

/// Block ready for compute, with its inputs moved out of the activation map.
struct ComputeJob<T> {
    block: ParamBlock<T>,
    inputs: PassOutputs<T>,
}

impl<T: Real> ComputeJob<T> {
    fn run(mut self, config: &ModelConfig, hyper: &ZoHyper, cursor: &mut IterationCursor) -> (ParamBlock<T>, Result<PassOutputs<T>>) {
        let out = cursor.pass(config, &mut self.block, hyper, self.inputs.inputs());
        (self.block, out)
    }
}

/// Real work attached to schedule ops for one iteration.
struct IterCtx<'a, T> {
    config: &'a ModelConfig,
    hyper: &'a ZoHyper,
    batch: &'a Batch,
    directions: Directions,
    head_id: usize,
    host: &'a mut HostMemory<T>,
    device: &'a mut DeviceMemory<T>,
    acts: BTreeMap<usize, PassOutputs<T>>,
    logits: Option<PassOutputs<T>>,
    inflight: Option<(ParamBlock<T>, Result<PassOutputs<T>>)>,
    cursor: IterationCursor,
    bytes_uploaded: usize,
    bytes_offloaded: usize,
}

impl<'a, T: Real> IterCtx<'a, T> {
    fn start_transfer(&mut self, op: &StreamOp) -> Result<()> {
        if op.kind == OpKind::Upload {
            let h = upload_block(self.host, self.device, op.block_id)?;
            self.bytes_uploaded += h.bytes;
        }
        Ok(())
    }

    fn end_transfer(&mut self, op: &StreamOp) -> Result<()> {
        if op.kind == OpKind::Offload {
            self.bytes_offloaded += offload_block(self.device, self.host, op.block_id)?;
        }
        Ok(())
    }

    fn start_compute(&mut self, op: &StreamOp) -> Result<ComputeJob<T>> {
        let p = op.block_id;
        let inputs = if p == 0 {
            let t = Activation::tokens(self.batch);
            PassOutputs {
                pos: self.directions.includes(Direction::Pos).then(|| t.clone()),
                neg: self.directions.includes(Direction::Neg).then_some(t),
            }
        } else {
            self.acts
                .remove(&(p - 1))
                .ok_or_else(|| Error::Schedule(format!("{} started before its inputs exist", op.label())))?
        };
        let bytes = activation_bytes::<T>(self.config, self.batch, p, direction_count(self.directions));
        self.device.pool_mut().alloc(AllocKey::Activation(p), bytes)?;
        let block = self.device.begin_compute(p)?;
        Ok(ComputeJob { block, inputs })
    }

    fn finish_compute(&mut self, op: &StreamOp, block: ParamBlock<T>, out: Result<PassOutputs<T>>) -> Result<()> {
        let p = op.block_id;
        self.device.end_compute(block)?;
        let out = out?;
        if p > 0 {
            self.device.pool_mut().free(AllocKey::Activation(p - 1))?;
        }
        if p == self.head_id {
            self.device.pool_mut().free(AllocKey::Activation(p))?;
            self.logits = Some(out);
        } else {
            self.acts.insert(p, out);
        }
        Ok(())
    }

    fn losses(&mut self) -> Result<PassLosses> {
        let logits = self
            .logits
            .take()
            .ok_or_else(|| Error::Schedule("iteration ended without LM head compute".into()))?;
        let eval = |a: Option<Activation<T>>| -> Result<Option<f64>> {
            a.map(|a| loss(&a.into_hidden()?, self.batch)).transpose()
        };
        Ok(PassLosses {
            pos: eval(logits.pos)?,
            neg: eval(logits.neg)?,
        })
    }
}

impl<T: Real> OpHandler for IterCtx<'_, T> {
    fn on_start(&mut self, op: &StreamOp, _now: f64) -> Result<()> {
        match op.kind {
            OpKind::Compute => {
                let job = self.start_compute(op)?;
                let (config, hyper) = (self.config, self.hyper);
                self.inflight = Some(job.run(config, hyper, &mut self.cursor));
                Ok(())
            }
            _ => self.start_transfer(op),
        }
    }

    fn on_end(&mut self, op: &StreamOp, _now: f64) -> Result<()> {
        match op.kind {
            OpKind::Compute => {
                let (block, out) = self
                    .inflight
                    .take()
                    .ok_or_else(|| Error::Schedule(format!("{} ended without starting", op.label())))?;
                self.finish_compute(op, block, out)
            }
            _ => self.end_transfer(op),
        }
    }
}

struct SharedRun<'a, T> {
    ctx: IterCtx<'a, T>,
    done: Vec<bool>,
    failed: Option<Error>,
}

/// Run the schedule with one thread per stream. Ordering is enforced only
/// by dependencies and per-stream FIFO order, so interleavings vary run to
/// run.
fn run_threaded<'a, T: Real>(schedule: &Schedule, ctx: IterCtx<'a, T>) -> Result<IterCtx<'a, T>> {
    let (config, hyper) = (ctx.config, ctx.hyper);
    let mut cursor = ctx.cursor;
    let shared = Mutex::new(SharedRun {
        ctx,
        done: vec![false; schedule.ops().len()],
        failed: None,
    });
    let cv = Condvar::new();
    let ops = schedule.ops();

    let worker = |kind: OpKind, cursor: &mut IterationCursor| {
        for id in schedule.stream_ops(kind) {
            let op = &ops[id];
            let mut g = shared.lock().expect("no poisoned lock");
            loop {
                if g.failed.is_some() {
                    return;
                }
                if op.deps.iter().all(|&d| g.done[d]) {
                    break;
                }
                g = cv.wait(g).expect("no poisoned lock");
            }
            let res = match kind {
                OpKind::Compute => match g.ctx.start_compute(op) {
                    Ok(job) => {
                        drop(g);
                        let (block, out) = job.run(config, hyper, cursor);
                        g = shared.lock().expect("no poisoned lock");
                        g.ctx.finish_compute(op, block, out)
                    }
                    Err(e) => Err(e),
                },
                _ => g.ctx.start_transfer(op).and_then(|_| g.ctx.end_transfer(op)),
            };
            match res {
                Ok(()) => g.done[id] = true,
                Err(e) => {
                    g.failed.get_or_insert(e);
                }
            }
            drop(g);
            cv.notify_all();
        }
    };

    // Transfer streams never touch the cursor; they get a throwaway copy.
    let (mut spare_u, mut spare_o) = (cursor, cursor);
    std::thread::scope(|s| {
        s.spawn(|| worker(OpKind::Upload, &mut spare_u));
        s.spawn(|| worker(OpKind::Offload, &mut spare_o));
        worker(OpKind::Compute, &mut cursor);
    });
    let mut run = shared.into_inner().expect("no poisoned lock");
    if let Some(e) = run.failed {
        return Err(e);
    }
    run.ctx.cursor = cursor;
    Ok(run.ctx)
}

/// Block-streaming ZO runtime: parameters live on the host, blocks visit
/// the device one schedule step at a time, and updates are applied lazily
/// during the next iteration's pass over each block.
#[derive(Debug)]
pub struct Zo2Runtime<T> {
    config: ModelConfig,
    hyper: ZoHyper,
    options: RuntimeOptions,
    schedule: Schedule,
    host: HostMemory<T>,
    device: DeviceMemory<T>,
    lazy: LazyZoState,
    open: Option<IterationCursor>,
    poisoned: bool,
    last: IterationReport,
    max_device_peak: usize,
}

impl<T: Real> Zo2Runtime<T> {
    pub fn new(store: ParamStore<T>, hyper: ZoHyper, options: RuntimeOptions) -> Result<Self> {
        options.cost.validate()?;
        let config = store.config().clone();
        let schedule = Schedule::zo2(config.n_blocks, options.schedule)?;
        let host = HostMemory::new(store)?;
        let mut device = DeviceMemory::new(0, options.device_capacity);
        for id in 0..config.block_count() {
            if !schedule.is_streamed(id) {
                upload_block(&host, &mut device, id)?;
            }
        }
        let max_device_peak = device.pool().peak();
        Ok(Zo2Runtime {
            config,
            hyper,
            options,
            schedule,
            host,
            device,
            lazy: LazyZoState::new(),
            open: None,
            poisoned: false,
            last: IterationReport::default(),
            max_device_peak,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn hyper(&self) -> &ZoHyper {
        &self.hyper
    }

    pub fn options(&self) -> &RuntimeOptions {
        &self.options
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn host(&self) -> &HostMemory<T> {
        &self.host
    }

    pub fn device(&self) -> &DeviceMemory<T> {
        &self.device
    }

    pub fn lazy_state(&self) -> &LazyZoState {
        &self.lazy
    }

    pub fn last_report(&self) -> &IterationReport {
        &self.last
    }

    /// Highest device usage seen since construction, including pinned blocks.
    pub fn max_device_peak(&self) -> usize {
        self.max_device_peak
    }

    /// Bytes pinned on the device between iterations.
    pub fn pinned_bytes(&self) -> usize {
        self.device.pool().used()
    }

    fn check_usable(&self) -> Result<()> {
        if self.poisoned {
            return Err(Error::Protocol("runtime is unusable after a failed iteration".into()));
        }
        Ok(())
    }

    /// Run the selected directional forwards for one iteration. The
    /// previous iteration's update is applied block by block on the way.
    /// Must be followed by [`Zo2Runtime::commit`].
    pub fn forward_pass(&mut self, batch: &Batch, seed: u64, directions: Directions) -> Result<PassLosses> {
        self.check_usable()?;
        if self.open.is_some() {
            return Err(Error::Protocol("forward pass while the previous one is uncommitted".into()));
        }
        batch.validate(self.config.vocab_size)?;
        if batch.seq_len > self.config.seq_len {
            return Err(Error::dim("batch sequence length", self.config.seq_len, batch.seq_len));
        }
        let cursor = self.lazy.begin(seed)?;
        self.device.pool_mut().reset_peak();
        let result = self.execute(batch, directions, cursor);
        match result {
            Ok((losses, cursor, report)) => {
                self.max_device_peak = self.max_device_peak.max(report.device_peak);
                self.last = report;
                self.open = Some(cursor);
                Ok(losses)
            }
            Err(e) => {
                self.poisoned = true;
                Err(e)
            }
        }
    }

    fn execute(
        &mut self,
        batch: &Batch,
        directions: Directions,
        cursor: IterationCursor,
    ) -> Result<(PassLosses, IterationCursor, IterationReport)> {
        let block_bytes: Vec<usize> = self.host.store().blocks().iter().map(|b| b.byte_size()).collect();
        let cost = self.options.cost;
        let ctx = IterCtx {
            config: &self.config,
            hyper: &self.hyper,
            batch,
            directions,
            head_id: self.config.head_block_id(),
            host: &mut self.host,
            device: &mut self.device,
            acts: BTreeMap::new(),
            logits: None,
            inflight: None,
            cursor,
            bytes_uploaded: 0,
            bytes_offloaded: 0,
        };
        let (mut ctx, timeline) = match self.options.executor {
            ExecutorKind::EventLoop => {
                let mut ctx = ctx;
                let t = run_event_loop(&self.schedule, |op| cost.duration(op.kind, block_bytes[op.block_id]), &mut ctx)?;
                (ctx, t)
            }
            ExecutorKind::Threaded => (run_threaded(&self.schedule, ctx)?, Timeline::default()),
        };
        let losses = ctx.losses()?;
        let report = IterationReport {
            device_peak: ctx.device.pool().peak(),
            bytes_uploaded: ctx.bytes_uploaded,
            bytes_offloaded: ctx.bytes_offloaded,
            timeline,
        };
        Ok((losses, ctx.cursor, report))
    }

    /// Close the open iteration and defer its update of gradient `g`.
    pub fn commit(&mut self, g: f64) -> Result<()> {
        self.check_usable()?;
        let cursor = self
            .open
            .take()
            .ok_or_else(|| Error::Protocol("commit without a forward pass".into()))?;
        if !g.is_finite() {
            self.poisoned = true;
            return Err(Error::Numeric(format!("non-finite projected gradient {g}")));
        }
        self.lazy.finish(&cursor, g);
        Ok(())
    }

    /// One full ZO2 iteration: dual forward, gradient, deferred update.
    pub fn step(&mut self, batch: &Batch, seed: u64, iter: u64) -> Result<ZoStep> {
        let losses = self.forward_pass(batch, seed, Directions::Both)?;
        let (lp, ln) = (losses.pos.expect("both"), losses.neg.expect("both"));
        let step = match ZoStep::new(iter, seed, lp, ln, self.hyper.epsilon) {
            Ok(s) => s,
            Err(e) => {
                self.poisoned = true;
                return Err(e);
            }
        };
        self.commit(step.g)?;
        Ok(step)
    }

    /// Apply the deferred update to every block so the parameters match an
    /// eager run after the same number of iterations.
    pub fn flush(&mut self) -> Result<()> {
        self.check_usable()?;
        if self.open.is_some() {
            return Err(Error::Protocol("flush while a forward pass is uncommitted".into()));
        }
        let pinned: BTreeSet<usize> = self.device.resident_blocks().into_iter().collect();
        let mut device_blocks: BTreeMap<usize, &mut ParamBlock<T>> =
            self.device.blocks_mut().map(|b| (b.id, b)).collect();
        let blocks: Vec<&mut ParamBlock<T>> = self
            .host
            .store_mut()
            .blocks_mut()
            .iter_mut()
            .map(|hb| {
                if pinned.contains(&hb.id) {
                    device_blocks.remove(&hb.id).expect("pinned block is on device")
                } else {
                    hb
                }
            })
            .collect();
        self.lazy.flush(blocks, &self.hyper)
    }

    /// Current parameters: host masters with pinned device copies on top.
    pub fn host_snapshot(&self) -> ParamStore<T> {
        let mut store = self.host.store().clone();
        for id in self.device.resident_blocks() {
            if let Some(b) = self.device.block(id) {
                store.block_mut(id).values_mut().copy_from_slice(b.values());
            }
        }
        store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.host_snapshot()
    }
}

/// One scheduled ZO2 iteration; see [`Zo2Runtime::step`].
pub fn run_zo2_schedule<T: Real>(runtime: &mut Zo2Runtime<T>, batch: &Batch, seed: u64, iter: u64) -> Result<ZoStep> {
    runtime.step(batch, seed, iter)
}
