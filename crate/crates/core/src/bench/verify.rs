use serde::{Deserialize, Serialize};

use crate::bench::config::RunConfig;
use crate::comm::{plan_sliced_upload, simulate_plan, t_comm, HostLinkModel, SliceLayout};
use crate::dist::{run_distributed, tree_mean, DistOptions, FaultPlan, MeshConfig, MeshOrdering, Strategy, Tag, WorkerExecutor};
use crate::error::{Error, Result};
use crate::model::{evaluate, init_model, Batch, ParamStore};
use crate::offload::{
    activation_footprint, mezo_device_peak, run_event_loop, NoWork, RuntimeOptions, Schedule, ScheduleMode,
    ScheduleOptions, Zo2Runtime,
};
use crate::real::Dtype;
use crate::rng::{iteration_seed, GaussianStream};
use crate::zo::{mezo_losses, mezo_step, update_params, zo_grad, ZoHyper, ZoStep};

/// Largest model `verify` accepts.
pub const VERIFY_MAX_PARAMS: usize = 1_000_000;

/// Models above this size skip the elementwise gradient oracle.
const ORDER_CHECK_MAX_PARAMS: usize = 20_000;
const ORDER_SEEDS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn get(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }
}

/// Faults injected to show that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerifyFaults {
    /// Rank 1 of the perturbation-parallel run perturbs with a wrong seed.
    pub seed_mismatch: bool,
    /// The streamed run skips its final flush.
    pub skip_flush: bool,
}

type Check = Result<(Status, String)>;

fn pass(detail: impl Into<String>) -> Check {
    Ok((Status::Pass, detail.into()))
}

fn judge(ok: bool, detail: impl Into<String>) -> Check {
    Ok((if ok { Status::Pass } else { Status::Fail }, detail.into()))
}

struct Ctx {
    store: ParamStore<f64>,
    batch: Batch,
    hyper: ZoHyper,
    seed: u64,
    cfg: RunConfig,
    faults: VerifyFaults,
}

impl Ctx {
    fn mezo(&self, iters: u64) -> Result<(Vec<ZoStep>, ParamStore<f64>)> {
        let mut s = self.store.clone();
        let steps = (0..iters)
            .map(|i| mezo_step(&mut s, &self.batch, &self.hyper, iteration_seed(self.seed, i), i))
            .collect::<Result<Vec<_>>>()?;
        Ok((steps, s))
    }

    fn iters(&self) -> u64 {
        self.hyper.steps
    }
}

/// Run the equivalence and estimator checks on `cfg`'s model. Property
/// failures are reported, not returned as errors.
pub fn verify(cfg: &RunConfig, faults: VerifyFaults) -> Result<VerifyReport> {
    cfg.model.validate()?;
    if cfg.model.dtype != Dtype::F64 {
        return Err(Error::Config("verify needs an f64 model".into()));
    }
    let store = init_model::<f64>(&cfg.model, cfg.init_seed)?;
    if store.param_count() > VERIFY_MAX_PARAMS {
        return Err(Error::Config(format!(
            "verify is limited to {VERIFY_MAX_PARAMS} parameters, model has {}",
            store.param_count()
        )));
    }
    let ctx = Ctx {
        store,
        batch: cfg.batch()?,
        hyper: cfg.hyper,
        seed: cfg.seed,
        cfg: cfg.clone(),
        faults,
    };
    let checks: [(&str, fn(&Ctx) -> Check); 9] = [
        ("perturb_restore_identity", perturb_restore),
        ("estimator_order", estimator_order),
        ("zo2_matches_mezo", zo2_matches_mezo),
        ("pertp_matches_mezo", pertp_matches_mezo),
        ("ddp_matches_sequential_shards", ddp_matches_shards),
        ("twod_composes", twod_composes),
        ("memory_bound", memory_bound),
        ("schedule_overlap", schedule_overlap),
        ("comm_formula", comm_formula),
    ];
    let properties: Vec<PropertyResult> = checks
        .iter()
        .map(|(name, check)| {
            log::info!("verify: {name}");
            let (status, detail) = check(&ctx).unwrap_or_else(|e| (Status::Fail, e.to_string()));
            PropertyResult {
                name: name.to_string(),
                status,
                detail,
            }
        })
        .collect();
    Ok(VerifyReport {
        passed: properties.iter().all(|p| p.status != Status::Fail),
        properties,
    })
}

fn perturb_restore(ctx: &Ctx) -> Check {
    for i in 0..5 {
        let mut s = ctx.store.clone();
        mezo_losses(&mut s, &ctx.batch, ctx.hyper.epsilon, iteration_seed(ctx.seed, i))?;
        if !s.bit_identical(&ctx.store) {
            return judge(false, format!("parameters changed after the cycle for iteration seed {i}"));
        }
    }
    pass("5 perturb/restore cycles left parameters bit-identical")
}

fn flat(store: &ParamStore<f64>) -> Vec<f64> {
    store.blocks().iter().flat_map(|b| b.values().iter().copied()).collect()
}

/// Elementwise central differences of the loss.
fn numerical_gradient(store: &ParamStore<f64>, batch: &Batch, h: f64) -> Result<Vec<f64>> {
    let mut work = store.clone();
    let mut grad = Vec::with_capacity(store.param_count());
    for b in 0..store.blocks().len() {
        for i in 0..store.block(b).elem_count() {
            let x = store.block(b).values()[i];
            work.block_mut(b).values_mut()[i] = x + h;
            let up = evaluate(&work, batch)?;
            work.block_mut(b).values_mut()[i] = x - h;
            let down = evaluate(&work, batch)?;
            work.block_mut(b).values_mut()[i] = x;
            grad.push((up - down) / (2.0 * h));
        }
    }
    Ok(grad)
}

/// Halving epsilon should cut the estimator's bias roughly fourfold.
fn estimator_order(ctx: &Ctx) -> Check {
    let p = ctx.store.param_count();
    if p > ORDER_CHECK_MAX_PARAMS {
        return Ok((Status::Skip, format!("{p} parameters exceed the {ORDER_CHECK_MAX_PARAMS} oracle budget")));
    }
    let grad = numerical_gradient(&ctx.store, &ctx.batch, 1e-5)?;
    // Keep eps * |z| small so the cubic term dominates the bias; powers of
    // two halve exactly on the perturbation grid.
    let eps = 2f64.powi((0.1 / (p as f64).sqrt()).log2().round().clamp(-20.0, -3.0) as i32);
    let (mut coarse, mut fine) = (0.0, 0.0);
    for s in 0..ORDER_SEEDS {
        let seed = iteration_seed(ctx.seed ^ 0x0D0E, s);
        let mut zeros = ctx.store.clone();
        zeros.blocks_mut().iter_mut().for_each(|b| b.values_mut().fill(0.0));
        update_params(&mut zeros, -1.0, 1.0, &mut GaussianStream::new(seed));
        let directional: f64 = flat(&zeros).iter().zip(&grad).map(|(z, g)| z * g).sum();
        let err = |e: f64| -> Result<f64> {
            let mut w = ctx.store.clone();
            let (lp, ln) = mezo_losses(&mut w, &ctx.batch, e, seed)?;
            Ok((zo_grad(lp, ln, e)? - directional).abs())
        };
        coarse += err(eps)?;
        fine += err(eps / 2.0)?;
    }
    let ratio = coarse / fine;
    judge(
        (3.0..=5.0).contains(&ratio),
        format!("mean error ratio {ratio:.3} at eps {eps:e} over {ORDER_SEEDS} seeds (expected 3..5)"),
    )
}

fn zo2_matches_mezo(ctx: &Ctx) -> Check {
    let (expected, reference) = ctx.mezo(ctx.iters())?;
    let mut rt = Zo2Runtime::new(ctx.store.clone(), ctx.hyper, ctx.cfg.runtime)?;
    for (i, e) in expected.iter().enumerate() {
        let st = rt.step(&ctx.batch, iteration_seed(ctx.seed, i as u64), i as u64)?;
        if !st.bit_eq(e) {
            return judge(false, format!("step {i} differs: {st:?} vs {e:?}"));
        }
    }
    if !ctx.faults.skip_flush {
        rt.flush()?;
    }
    let got = rt.host_snapshot();
    judge(
        got.bit_identical(&reference),
        format!(
            "{} steps, max |diff| {:e}{}",
            ctx.iters(),
            got.max_abs_diff(&reference),
            if ctx.faults.skip_flush { " (flush skipped)" } else { "" }
        ),
    )
}

fn dist_opts(ctx: &Ctx, executor: WorkerExecutor) -> DistOptions {
    DistOptions {
        executor,
        runtime: ctx.cfg.runtime,
        timeout: std::time::Duration::from_secs(10),
        ..Default::default()
    }
}

fn pertp_matches_mezo(ctx: &Ctx) -> Check {
    let (expected, reference) = ctx.mezo(ctx.iters())?;
    let mut opts = dist_opts(ctx, WorkerExecutor::Eager);
    if ctx.faults.seed_mismatch {
        opts.faults = FaultPlan {
            seed_mismatch_rank: Some(1),
        };
    }
    let mesh = MeshConfig::for_strategy(Strategy::Pertp, 2);
    let run = run_distributed(&mesh, &ctx.store, &ctx.batch, &ctx.hyper, ctx.seed, ctx.iters(), &opts)?;
    let grads_match = run.steps().iter().zip(&expected).all(|(a, b)| a.g.to_bits() == b.g.to_bits());
    let same = run.final_params().bit_identical(&reference);
    let checksums = run.ranks[0].checksum == run.ranks[1].checksum;
    let param_bytes = run.stats.bytes(Tag::Param);
    judge(
        grads_match && same && checksums && param_bytes == 0,
        format!("grads {grads_match}, params {same}, checksums {checksums}, param bytes {param_bytes}"),
    )
}

fn ddp_matches_shards(ctx: &Ctx) -> Check {
    let k = 2;
    if ctx.batch.batch % k != 0 {
        return Ok((Status::Skip, format!("batch of {} rows does not split into {k}", ctx.batch.batch)));
    }
    let shards = ctx.batch.shard(k)?;
    let mut reference = ctx.store.clone();
    let mut expected = Vec::new();
    for i in 0..ctx.iters() {
        let seed = iteration_seed(ctx.seed, i);
        let gs = shards
            .iter()
            .map(|s| {
                let (p, n) = mezo_losses(&mut reference, s, ctx.hyper.epsilon, seed)?;
                zo_grad(p, n, ctx.hyper.epsilon)
            })
            .collect::<Result<Vec<_>>>()?;
        let g = tree_mean(&gs);
        update_params(&mut reference, g, ctx.hyper.lr, &mut GaussianStream::new(seed));
        expected.push(g);
    }
    let mesh = MeshConfig::for_strategy(Strategy::Ddp, k);
    let run = run_distributed(&mesh, &ctx.store, &ctx.batch, &ctx.hyper, ctx.seed, ctx.iters(), &dist_opts(ctx, WorkerExecutor::Eager))?;
    let grads = run.steps().iter().zip(&expected).all(|(a, g)| a.g.to_bits() == g.to_bits());
    let same = run.final_params().bit_identical(&reference);
    let scalars = run.stats.contributed(Tag::Grad);
    let want = k as u64 * ctx.iters();
    judge(
        grads && same && scalars == want,
        format!("grads {grads}, params {same}, gradient scalars {scalars} (expected {want})"),
    )
}

fn twod_composes(ctx: &Ctx) -> Check {
    if ctx.batch.batch % 2 != 0 {
        return Ok((Status::Skip, format!("batch of {} rows does not split into 2", ctx.batch.batch)));
    }
    let opts = dist_opts(ctx, WorkerExecutor::Eager);
    let iters = ctx.iters().min(5);
    let go = |m: MeshConfig| run_distributed(&m, &ctx.store, &ctx.batch, &ctx.hyper, ctx.seed, iters, &opts);
    let ddp = go(MeshConfig::for_strategy(Strategy::Ddp, 2))?;
    let pertp = go(MeshConfig::for_strategy(Strategy::Pertp, 2))?;
    let mut notes = Vec::new();
    let mut ok = true;
    for ordering in [MeshOrdering::PertpInner, MeshOrdering::DdpInner] {
        let with = |w| MeshConfig {
            ordering,
            ..MeshConfig::for_strategy(Strategy::TwoD, w)
        };
        let four = go(with(4))?;
        let two = go(with(2))?;
        let a = four.final_params().bit_identical(ddp.final_params());
        let b = two.final_params().bit_identical(pertp.final_params());
        ok &= a && b;
        notes.push(format!("{ordering:?}: 2x2=ddp2 {a}, 1x2=pertp {b}"));
    }
    judge(ok, notes.join("; "))
}

fn memory_bound(ctx: &Ctx) -> Check {
    let cfg = &ctx.cfg.model;
    let mut rt = Zo2Runtime::new(ctx.store.clone(), ctx.hyper, RuntimeOptions::default())?;
    let pinned = rt.pinned_bytes();
    for i in 0..2 {
        rt.step(&ctx.batch, iteration_seed(ctx.seed, i), i)?;
    }
    let block = (1..=cfg.n_blocks).map(|b| ctx.store.block(b).byte_size()).max().unwrap_or(0);
    let act = activation_footprint::<f64>(cfg, &ctx.batch, 2);
    let streamed = rt.max_device_peak() - pinned;
    let mezo = mezo_device_peak(&ctx.store, &ctx.batch);
    let bound = 3 * block + act;
    judge(
        streamed <= bound && mezo >= cfg.n_blocks * block,
        format!(
            "streamed peak {streamed} B (bound {bound} B, plus {pinned} B pinned), in-memory peak {mezo} B vs {} B of blocks",
            cfg.n_blocks * block
        ),
    )
}

fn schedule_overlap(ctx: &Ctx) -> Check {
    let n = ctx.cfg.model.n_blocks;
    let span = |mode| -> Result<f64> {
        let s = Schedule::zo2(
            n,
            ScheduleOptions {
                mode,
                ..Default::default()
            },
        )?;
        Ok(run_event_loop(&s, |_| 1.0, &mut NoWork)?.makespan())
    };
    let overlapped = span(ScheduleMode::Overlapped)?;
    let serial = span(ScheduleMode::Serial)?;
    judge(
        overlapped <= (n + 2) as f64 && serial >= (3 * n) as f64,
        format!("unit durations, {n} blocks: overlapped {overlapped}, serial {serial}"),
    )
}

fn comm_formula(ctx: &Ctx) -> Check {
    let base = ctx.cfg.topology.resolve(None)?.with_host_link(HostLinkModel::PerDevice);
    let m = ctx.store.blocks().iter().map(|b| b.elem_count()).max().unwrap_or(0);
    let mut worst: f64 = 0.0;
    for n in [1usize, 2, 4, 8] {
        let topo = base.with_devices(base.devices.max(n));
        let layout = SliceLayout::new(0, m, n)?;
        let sim = simulate_plan(&plan_sliced_upload(&layout, &topo)?, &topo)?.makespan;
        let formula = t_comm(m as f64, n, &topo);
        let phases = if n == 1 { 1.0 } else { 2.0 };
        let excess = sim - formula;
        let slack = 1e-9 * formula;
        if excess < -slack || excess > phases * topo.latency + slack {
            return judge(false, format!("n={n}: simulated {sim:e} vs formula {formula:e}"));
        }
        worst = worst.max(excess);
    }
    pass(format!("block of {m} params, largest excess over formula {worst:e} s"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let r = verify(&RunConfig::default(), VerifyFaults::default()).unwrap();
        for p in &r.properties {
            assert_eq!(p.status, Status::Pass, "{}: {}", p.name, p.detail);
        }
        assert!(r.passed);
    }
}
