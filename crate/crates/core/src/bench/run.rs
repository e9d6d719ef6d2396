use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::config::RunConfig;
use crate::comm::{simulate_plan, plan_sliced_upload, SliceLayout};
use crate::dist::{run_distributed, DistOptions, FabricStats, StepRecord, WorkerExecutor};
use crate::error::Result;
use crate::model::{init_model, ModelConfig, ParamStore};
use crate::offload::{mezo_device_peak, run_event_loop, NoWork, OpKind, Schedule, Timeline};
use crate::real::{Dtype, Real};

/// Steps excluded from the median step time.
pub const WARMUP_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub strategy: String,
    pub workers: usize,
    pub n_b: usize,
    pub n_p: usize,
    pub model: ModelConfig,
    pub param_count: usize,
    pub steps: u64,
    pub tokens_per_step: usize,
    /// Tokens per step over the median step time, warm-up excluded.
    pub tokens_per_sec: f64,
    /// Total tokens over total wall time.
    pub tokens_per_sec_mean: f64,
    pub wall_seconds: f64,
    pub median_step_seconds: f64,
    pub peak_device_bytes: usize,
    pub comm: FabricStats,
    /// Simulated sliced upload time of the largest block across the
    /// run's workers on the configured topology.
    pub sliced_upload_seconds: f64,
    /// Final parameter checksum, hex.
    pub checksum: String,
    pub final_loss_pos: f64,
    pub final_loss_neg: f64,
    pub steps_log: String,
    pub timeline: String,
    pub timeline_makespan: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub steps: Vec<StepRecord>,
    /// One simulated iteration of the block streaming schedule; empty for
    /// in-memory executors.
    pub timeline: Timeline,
}

pub const STEPS_FILE: &str = "steps.jsonl";
pub const TIMELINE_FILE: &str = "timeline.json";
pub const REPORT_FILE: &str = "report.json";

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Train under `cfg` and collect the report. Nothing is written to disk.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.model.dtype {
        Dtype::F64 => run_typed::<f64>(cfg),
        Dtype::F32 => run_typed::<f32>(cfg),
    }
}

fn run_typed<T: Real>(cfg: &RunConfig) -> Result<RunOutput> {
    let mesh = cfg.mesh();
    let store = init_model::<T>(&cfg.model, cfg.init_seed)?;
    let batch = cfg.batch()?;
    let topo = cfg.topology.resolve(None)?;
    let opts = DistOptions {
        executor: cfg.executor(),
        runtime: cfg.runtime,
        check_every: cfg.check_every,
        ..Default::default()
    };
    log::info!("running {} on {} worker(s), {} steps", cfg.method(), mesh.workers, cfg.hyper.steps);

    let t0 = Instant::now();
    let dist = run_distributed(&mesh, &store, &batch, &cfg.hyper, cfg.seed, cfg.hyper.steps, &opts)?;
    let wall = t0.elapsed().as_secs_f64();

    let rank0 = &dist.ranks[0];
    let timed = if rank0.step_seconds.len() > WARMUP_STEPS {
        &rank0.step_seconds[WARMUP_STEPS..]
    } else {
        &rank0.step_seconds[..]
    };
    let med = median(timed);
    let tokens_per_step = batch.tokens();
    let shard = batch.shard(mesh.n_b)?.remove(0);
    let peak = match cfg.executor() {
        WorkerExecutor::Streamed => dist.ranks.iter().filter_map(|r| r.device_peak).max().unwrap_or(0),
        WorkerExecutor::Eager => mezo_device_peak(&store, &shard),
    };
    let timeline = match cfg.executor() {
        WorkerExecutor::Streamed => schedule_timeline(&store, cfg)?,
        WorkerExecutor::Eager => Timeline::default(),
    };
    let largest = store.blocks().iter().map(|b| b.elem_count()).max().unwrap_or(0);
    let sim_topo = topo.with_devices(topo.devices.max(mesh.workers));
    let layout = SliceLayout::new(0, largest, mesh.workers)?;
    let sliced_upload_seconds = simulate_plan(&plan_sliced_upload(&layout, &sim_topo)?, &sim_topo)?.makespan;
    let last = dist.steps().last().copied();

    let report = RunReport {
        method: cfg.method(),
        strategy: cfg.strategy.as_str().to_string(),
        workers: mesh.workers,
        n_b: mesh.n_b,
        n_p: mesh.n_p,
        model: cfg.model.clone(),
        param_count: store.param_count(),
        steps: cfg.hyper.steps,
        tokens_per_step,
        tokens_per_sec: if med > 0.0 { tokens_per_step as f64 / med } else { 0.0 },
        tokens_per_sec_mean: if wall > 0.0 {
            (tokens_per_step as u64 * cfg.hyper.steps) as f64 / wall
        } else {
            0.0
        },
        wall_seconds: wall,
        median_step_seconds: med,
        peak_device_bytes: peak,
        comm: dist.stats.clone(),
        sliced_upload_seconds,
        checksum: format!("{:016x}", dist.final_params().checksum()),
        final_loss_pos: last.map_or(f64::NAN, |s| s.loss_pos),
        final_loss_neg: last.map_or(f64::NAN, |s| s.loss_neg),
        steps_log: STEPS_FILE.into(),
        timeline: TIMELINE_FILE.into(),
        timeline_makespan: timeline.makespan(),
    };
    Ok(RunOutput {
        report,
        steps: dist.steps().to_vec(),
        timeline,
    })
}

fn schedule_timeline<T: Real>(store: &ParamStore<T>, cfg: &RunConfig) -> Result<Timeline> {
    let schedule = Schedule::zo2(cfg.model.n_blocks, cfg.runtime.schedule)?;
    let cost = cfg.runtime.cost;
    run_event_loop(
        &schedule,
        |op| {
            let bytes = match op.kind {
                OpKind::Compute => 0,
                _ => store.block(op.block_id).byte_size(),
            };
            cost.duration(op.kind, bytes)
        },
        &mut NoWork,
    )
}

/// One JSON object per line: iter, seed, loss_pos, loss_neg, g.
pub fn steps_jsonl(steps: &[StepRecord]) -> String {
    let mut out = String::new();
    for s in steps {
        out.push_str(&serde_json::to_string(s).expect("step record serializes"));
        out.push('\n');
    }
    out
}

impl RunOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(STEPS_FILE), steps_jsonl(&self.steps))?;
        std::fs::write(dir.join(TIMELINE_FILE), self.timeline.to_json())?;
        let mut f = std::fs::File::create(dir.join(REPORT_FILE))?;
        serde_json::to_writer_pretty(&mut f, &self.report)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}
