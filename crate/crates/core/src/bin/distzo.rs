use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use distzo::bench::{self, RunConfig, RunReport, TopologySpec, VerifyFaults};
use distzo::comm::{
    plan_naive_offload, plan_naive_upload, plan_pipelined_upload, plan_sliced_offload, plan_sliced_upload,
    simulate_plan, slice_speedup, t_comm, HostLinkModel, PeerModel, SliceLayout,
};
use distzo::dist::{MeshOrdering, Strategy, WorkerExecutor};
use distzo::offload::ScheduleMode;
use distzo::real::Dtype;
use distzo::zo::ZoHyper;
use distzo::{Error, Result};

const DEFAULT_OUT_DIR: &str = "distzo-out";

#[derive(Parser)]
#[command(name = "distzo", version, about = "Distributed zeroth-order fine-tuning harness")]
struct Cli {
    /// More log output (-v info, -vv debug). DISTZO_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train under one configuration and write report.json, steps.jsonl and timeline.json.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run several configurations and tabulate them in compare.csv.
    Compare {
        /// Run config files, or report.json files with --reports.
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
        /// Treat the inputs as existing reports instead of configs.
        #[arg(long)]
        reports: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the equivalence and estimator checks.
    Verify {
        #[command(flatten)]
        overrides: Overrides,
        /// Deliberate fault to inject; repeatable.
        #[arg(long, value_enum)]
        inject: Vec<Fault>,
        /// Also write verify.json here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Simulate one block transfer on a link topology.
    Simulate {
        /// Profile name or topology JSON file.
        #[arg(long, default_value = "pcie-nvlink")]
        topology: String,
        /// Parameters in the block.
        #[arg(long, default_value_t = 1 << 20)]
        params: usize,
        /// Devices sharing the block; defaults to the topology's count.
        #[arg(long)]
        devices: Option<usize>,
        #[arg(long, value_enum, default_value = "sliced")]
        plan: PlanArg,
        #[arg(long, value_enum, default_value = "upload")]
        direction: DirectionArg,
        #[arg(long, value_parser = parse_serde::<HostLinkModel>)]
        host_link: Option<HostLinkModel>,
        #[arg(long, value_parser = parse_serde::<PeerModel>)]
        peer_model: Option<PeerModel>,
        /// Write timeline.json here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    SeedMismatch,
    SkipFlush,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlanArg {
    Sliced,
    Pipelined,
    Naive,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    Upload,
    Offload,
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Flags that override fields of the config file.
#[derive(Args)]
struct Overrides {
    /// JSON run config; flags take precedence over its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_serde::<Strategy>)]
    strategy: Option<Strategy>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    n_b: Option<usize>,
    #[arg(long)]
    n_p: Option<usize>,
    #[arg(long, value_parser = parse_serde::<MeshOrdering>)]
    ordering: Option<MeshOrdering>,
    #[arg(long, value_parser = parse_serde::<WorkerExecutor>)]
    executor: Option<WorkerExecutor>,
    #[arg(long, value_parser = parse_serde::<ScheduleMode>)]
    schedule: Option<ScheduleMode>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    check_every: Option<u64>,
    /// Profile name or topology JSON file.
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, value_parser = parse_serde::<Dtype>)]
    dtype: Option<Dtype>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            strategy => strategy, ordering => ordering, batch_size => batch_size, seed => seed,
            init_seed => init_seed, data_seed => data_seed, check_every => check_every,
            vocab_size => model.vocab_size, d_model => model.d_model, n_heads => model.n_heads,
            n_blocks => model.n_blocks, seq_len => model.seq_len, dtype => model.dtype,
            schedule => runtime.schedule.mode,
        );
        if self.workers.is_some() {
            c.workers = self.workers;
        }
        if self.n_b.is_some() {
            c.n_b = self.n_b;
        }
        if self.n_p.is_some() {
            c.n_p = self.n_p;
        }
        if self.executor.is_some() {
            c.executor = self.executor;
        }
        if let Some(t) = &self.topology {
            c.topology = TopologySpec::Named(t.clone());
        }
        if self.steps.is_some() || self.lr.is_some() || self.epsilon.is_some() {
            c.hyper = ZoHyper::new(
                self.epsilon.unwrap_or(c.hyper.epsilon),
                self.lr.unwrap_or(c.hyper.lr),
                self.steps.unwrap_or(c.hyper.steps),
            )?;
        }
        Ok(c)
    }
}

fn out_dir(flag: &Option<PathBuf>, cfg: Option<&RunConfig>) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Write to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"))
}

fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("report {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Returns the process exit code on success paths that still fail (verify).
fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { overrides, out_dir: flag } => {
            let cfg = overrides.resolve()?;
            let out = bench::run(&cfg)?;
            let dir = out_dir(&flag, Some(&cfg));
            out.write(&dir)?;
            log::info!("wrote outputs to {}", dir.display());
            print_json(&out.report)?;
            Ok(0)
        }
        Command::Compare {
            files,
            reports,
            out_dir: flag,
        } => {
            let dir = out_dir(&flag, None);
            let csv = if reports {
                let reports = files.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
                bench::compare_reports(&reports)?
            } else {
                let configs = files.iter().map(|p| RunConfig::load(p)).collect::<Result<Vec<_>>>()?;
                let (outputs, csv) = bench::compare(&configs)?;
                for (i, o) in outputs.iter().enumerate() {
                    o.write(&dir.join(format!("run-{i}")))?;
                }
                csv
            };
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("compare.csv"), &csv)?;
            emit(&csv)?;
            Ok(0)
        }
        Command::Verify {
            overrides,
            inject,
            out_dir: flag,
        } => {
            let cfg = overrides.resolve()?;
            let mut faults = VerifyFaults::default();
            for f in inject {
                match f {
                    Fault::SeedMismatch => faults.seed_mismatch = true,
                    Fault::SkipFlush => faults.skip_flush = true,
                }
            }
            let report = bench::verify(&cfg, faults)?;
            if let Some(dir) = flag {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
            }
            print_json(&report)?;
            Ok(if report.passed { 0 } else { 1 })
        }
        Command::Simulate {
            topology,
            params,
            devices,
            plan,
            direction,
            host_link,
            peer_model,
            out_dir: flag,
        } => {
            let mut topo = TopologySpec::Named(topology).resolve(None)?;
            if let Some(n) = devices {
                topo = topo.with_devices(n);
            }
            if let Some(h) = host_link {
                topo = topo.with_host_link(h);
            }
            if let Some(p) = peer_model {
                topo = topo.with_peer_model(p);
            }
            topo.validate()?;
            let layout = SliceLayout::new(0, params, topo.devices)?;
            let transfer = match (direction, plan) {
                (DirectionArg::Upload, PlanArg::Sliced) => plan_sliced_upload(&layout, &topo)?,
                (DirectionArg::Upload, PlanArg::Pipelined) => plan_pipelined_upload(&layout, &topo)?,
                (DirectionArg::Upload, PlanArg::Naive) => plan_naive_upload(&layout, &topo)?,
                (DirectionArg::Offload, PlanArg::Naive) => plan_naive_offload(&layout, &topo)?,
                (DirectionArg::Offload, PlanArg::Sliced) => plan_sliced_offload(&layout, &topo)?,
                (DirectionArg::Offload, PlanArg::Pipelined) => {
                    return Err(Error::Config("the pipelined plan is upload-only".into()))
                }
            };
            let tl = simulate_plan(&transfer, &topo)?;
            if let Some(dir) = flag {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("timeline.json"), serde_json::to_string_pretty(&tl.to_timeline_json())?)?;
            }
            let speedup = slice_speedup(params, &topo)?;
            print_json(&serde_json::json!({
                "topology": topo,
                "plan": transfer.kind,
                "params": params,
                "devices": topo.devices,
                "makespan": tl.makespan,
                "t_comm": t_comm(params as f64, topo.devices, &topo),
                "host_volume": transfer.host_volume(),
                "peer_volume": transfer.peer_volume(),
                "utilization": tl.utilization,
                "speedup": {"upload": speedup.upload(), "offload": speedup.offload()},
            }))?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DISTZO_LOG", level)).init();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
