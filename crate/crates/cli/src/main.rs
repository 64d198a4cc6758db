//! `pdsim`: run, sweep and inspect disaggregated serving simulations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pdsim_core::config::TransferModeName;
use pdsim_core::gateway::GatewayPolicy;
use pdsim_core::{run, sweep, sweep_csv, MetricsFrame, RunConfig, RunOutput, SimOptions, SweepPoint, SweepSpec};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pdsim", version, about = "Disaggregated prefill/decode serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check configs and print the analytic prediction for each group.
    Validate {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Simulate one config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Also write a per-event debug log (events.jsonl).
        #[arg(long)]
        event_log: bool,
        /// Also write a copy of the metrics scaled to 0..1.
        #[arg(long)]
        normalize: bool,
    },
    /// Run a grid of configs, or a named experiment, in parallel.
    Sweep(SweepArgs),
    /// Summarize a run directory written by `run --out`.
    Report {
        dir: PathBuf,
        /// Write metrics.normalized.csv next to metrics.csv.
        #[arg(long)]
        normalize: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the simulated duration, seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory; created if missing.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    /// Every prefill/decode split of the group's instance count.
    Ratio,
    /// Traffic multiplied by 1, 2, 3 and 4.
    Load,
    /// Baseline against on-demand forwarding.
    Policy,
    /// Block-free against block-fixed transfer.
    Transfer,
    /// Runs the config's fault schedule and reports the recoveries.
    Drill,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    experiment: Option<Experiment>,
    /// Group whose composition the ratio axis changes.
    #[arg(long)]
    group: Option<String>,
    /// Prefill:decode pairs, e.g. 2:6.
    #[arg(long, value_delimiter = ',', value_parser = parse_ratio)]
    ratio: Vec<(u32, u32)>,
    /// Sweep every split of this many instances.
    #[arg(long, conflicts_with = "ratio")]
    splits: Option<u32>,
    /// Traffic multipliers.
    #[arg(long, value_delimiter = ',')]
    load: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    mode: Vec<TransferModeName>,
    /// Transfer block sizes in bytes.
    #[arg(long, value_delimiter = ',')]
    block_size: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
    policy: Vec<GatewayPolicy>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

fn parse_ratio(s: &str) -> Result<(u32, u32), String> {
    let (p, d) = s.split_once(':').ok_or("expected P:D")?;
    let p: u32 = p.trim().parse().map_err(|e| format!("prefill count: {e}"))?;
    let d: u32 = d.trim().parse().map_err(|e| format!("decode count: {e}"))?;
    if p == 0 || d == 0 {
        return Err("both counts must be at least 1".into());
    }
    Ok((p, d))
}

fn parse_mode(s: &str) -> Result<TransferModeName, String> {
    match s {
        "block_free" | "free" => Ok(TransferModeName::BlockFree),
        "block_fixed" | "fixed" => Ok(TransferModeName::BlockFixed),
        _ => Err(format!("unknown transfer mode `{s}`")),
    }
}

fn parse_policy(s: &str) -> Result<GatewayPolicy, String> {
    match s {
        "baseline" => Ok(GatewayPolicy::Baseline),
        "on_demand" | "on-demand" => Ok(GatewayPolicy::OnDemand),
        _ => Err(format!("unknown gateway policy `{s}`")),
    }
}

fn load_config(path: &Path, common: Option<&Common>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(c) = common {
        if let Some(seed) = c.seed {
            cfg.seed = seed;
        }
        if let Some(d) = c.duration {
            cfg.duration = d;
        }
    }
    cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn validate(paths: &[PathBuf]) -> Result<()> {
    let mut failed = 0;
    for path in paths {
        match load_config(path, None) {
            Ok(cfg) => {
                println!("{}: ok ({})", path.display(), cfg.name);
                let res = cfg.resolve()?;
                for (group, shape) in &res.shapes {
                    println!(
                        "  group {group}: {}P{}D, batch {}/{}",
                        shape.n_prefill, shape.n_decode, shape.batch_prefill, shape.batch_decode
                    );
                }
            }
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e:#}", path.display());
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} configs are invalid", paths.len());
    }
    Ok(())
}

fn print_run(out: &RunOutput) {
    let r = &out.report;
    let s = &r.summary;
    println!("run {} (seed {}, {:?}), {} requests", r.name, r.seed, r.policy, r.requests);
    println!("  window        [{}, {})", s.from, s.to);
    println!("  throughput    {:.4} rps ({} per instance)", s.throughput, opt(s.per_instance_rps));
    println!("  goodput       {:.4} rps", s.goodput);
    println!("  success rate  {}", opt(s.success_rate));
    println!("  T_p / T_d     {} / {} s", opt(s.tp), opt(s.td));
    println!("  E2E           {} s", opt(s.e2e));
    println!("  transfer      {} s", opt(s.transfer_mean));
    for a in &r.analytic {
        if let Some(e) = a.estimate {
            println!(
                "  analytic {}: {:.4} rps per instance, {:?}-bound",
                a.group, e.per_instance_rps, e.bottleneck
            );
        }
    }
    if r.faults.injected > 0 {
        let adds = &r.faults.recovery_additions;
        println!(
            "  faults        {} injected, {} detected, {} recoveries adding {} containers",
            r.faults.injected,
            r.faults.detected,
            adds.len(),
            adds.iter().sum::<u32>()
        );
    }
}

fn check_violations(label: &str, violations: &[String]) -> Result<()> {
    if violations.is_empty() {
        return Ok(());
    }
    for v in violations.iter().take(20) {
        eprintln!("violation: {v}");
    }
    bail!("{label}: {} invariant violations", violations.len())
}

fn run_one(config: &Path, common: &Common, event_log: bool, normalize: bool) -> Result<()> {
    let cfg = load_config(config, Some(common))?;
    let out = run(&cfg, SimOptions { event_log })?;
    print_run(&out);
    if let Some(dir) = &common.out {
        ensure_dir(dir)?;
        write(dir, "metrics.csv", out.frame.to_csv())?;
        write(dir, "report.json", out.report_json())?;
        if normalize {
            write(dir, "metrics.normalized.csv", out.frame.normalized().to_csv())?;
        }
        if event_log {
            let mut buf = Vec::new();
            out.events.write_jsonl(&mut buf)?;
            write(dir, "events.jsonl", buf)?;
        }
        println!("wrote {}", dir.display());
    }
    check_violations(&cfg.name, &out.report.violations)
}

#[derive(Serialize)]
struct RatioSummary {
    group: String,
    best: Option<Split>,
    analytic_best: Option<Split>,
    points: Vec<Split>,
}

#[derive(Serialize, Clone, Copy)]
struct Split {
    n_prefill: u32,
    n_decode: u32,
    per_instance_rps: Option<f64>,
    analytic_per_instance_rps: Option<f64>,
}

fn by<F: Fn(&Split) -> Option<f64>>(points: &[Split], key: F) -> Option<Split> {
    points
        .iter()
        .filter(|p| key(p).is_some())
        .fold(None, |best: Option<Split>, p| match best {
            Some(b) if key(&b) >= key(p) => Some(b),
            _ => Some(*p),
        })
}

fn ratio_summary(group: &str, points: &[SweepPoint]) -> RatioSummary {
    let splits: Vec<Split> = points
        .iter()
        .map(|p| Split {
            n_prefill: p.n_prefill,
            n_decode: p.n_decode,
            per_instance_rps: p.summary.per_instance_rps,
            analytic_per_instance_rps: p.analytic.map(|a| a.per_instance_rps),
        })
        .collect();
    RatioSummary {
        group: group.to_string(),
        best: by(&splits, |s| s.per_instance_rps),
        analytic_best: by(&splits, |s| s.analytic_per_instance_rps),
        points: splits,
    }
}

fn sweep_cmd(args: &SweepArgs) -> Result<()> {
    let cfg = load_config(&args.config, Some(&args.common))?;
    if matches!(args.experiment, Some(Experiment::Drill)) {
        return drill(&cfg, &args.common);
    }
    let group = match &args.group {
        Some(g) => g.clone(),
        None => cfg.groups.first().context("config has no groups")?.name.clone(),
    };
    let total = cfg
        .group(&group)
        .with_context(|| format!("no group named `{group}`"))?
        .shape()
        .total_instances();
    let mut spec = SweepSpec {
        group: Some(group.clone()),
        ratios: args.ratio.clone(),
        loads: args.load.clone(),
        modes: args.mode.clone(),
        block_sizes: args.block_size.clone(),
        policies: args.policy.clone(),
        seeds: args.seeds.clone(),
    };
    if let Some(n) = args.splits {
        if n < 2 {
            bail!("--splits needs at least 2 instances");
        }
        spec.ratios = SweepSpec::all_splits(n);
    }
    match args.experiment {
        Some(Experiment::Ratio) if spec.ratios.is_empty() => spec.ratios = SweepSpec::all_splits(total),
        Some(Experiment::Load) if spec.loads.is_empty() => spec.loads = vec![1.0, 2.0, 3.0, 4.0],
        Some(Experiment::Policy) if spec.policies.is_empty() => {
            spec.policies = vec![GatewayPolicy::Baseline, GatewayPolicy::OnDemand];
        }
        Some(Experiment::Transfer) if spec.modes.is_empty() => {
            spec.modes = vec![TransferModeName::BlockFree, TransferModeName::BlockFixed];
        }
        _ => {}
    }

    let points = sweep(&cfg, &spec)?;
    let table = sweep_csv(&points);
    print!("{table}");
    let ratio = matches!(args.experiment, Some(Experiment::Ratio)).then(|| ratio_summary(&group, &points));
    if let Some(r) = &ratio {
        if let Some(b) = r.best {
            println!("best split {}P{}D", b.n_prefill, b.n_decode);
        }
        if let Some(b) = r.analytic_best {
            println!("analytic best split {}P{}D", b.n_prefill, b.n_decode);
        }
    }
    if let Some(dir) = &args.common.out {
        ensure_dir(dir)?;
        write(dir, "sweep.csv", &table)?;
        let frames = dir.join("frames");
        ensure_dir(&frames)?;
        for (i, p) in points.iter().enumerate() {
            let name = format!("{i:03}-{}p{}d.csv", p.n_prefill, p.n_decode);
            write(&frames, &name, p.frame.to_csv())?;
        }
        if let Some(r) = &ratio {
            write(dir, "ratio_summary.json", serde_json::to_string_pretty(r)?)?;
        }
        println!("wrote {}", dir.display());
    }
    let bad: usize = points.iter().map(|p| p.violations).sum();
    if bad > 0 {
        bail!("{bad} invariant violations across the sweep");
    }
    Ok(())
}

fn drill(cfg: &RunConfig, common: &Common) -> Result<()> {
    let out = run(cfg, SimOptions::default())?;
    print_run(&out);
    let f = &out.report.faults;
    let completed = out.report.transcripts.iter().filter(|t| t.finished.is_some()).count();
    println!(
        "drill: {} injected, {} detected, {} workflows finished, {} failed requests, max parked {}",
        f.injected,
        f.detected,
        completed,
        f.failed_requests,
        f.max_parked
    );
    if let Some(dir) = &common.out {
        ensure_dir(dir)?;
        write(dir, "metrics.csv", out.frame.to_csv())?;
        write(dir, "report.json", out.report_json())?;
        write(dir, "transcripts.json", serde_json::to_string_pretty(&out.report.transcripts)?)?;
        println!("wrote {}", dir.display());
    }
    check_violations(&cfg.name, &out.report.violations)
}

fn report(dir: &Path, normalize: bool) -> Result<()> {
    let text = fs::read_to_string(dir.join("report.json")).with_context(|| format!("reading {}/report.json", dir.display()))?;
    let json: serde_json::Value = serde_json::from_str(&text).context("parsing report.json")?;
    let csv = fs::read_to_string(dir.join("metrics.csv")).with_context(|| format!("reading {}/metrics.csv", dir.display()))?;
    let frame = MetricsFrame::from_csv(&csv)?;

    println!("run {} (seed {})", json["name"].as_str().unwrap_or("?"), json["seed"]);
    if let Some(summary) = json["summary"].as_object() {
        for (k, v) in summary {
            println!("  {k:<16} {v}");
        }
    }
    let violations = json["violations"].as_array().map_or(0, Vec::len);
    println!("  {:<16} {violations}", "violations");
    let peak = frame.rows.iter().map(|r| r.rps).fold(0.0, f64::max);
    println!("  {} buckets of {} s, peak {peak:.4} rps", frame.rows.len(), frame.bucket);
    if normalize {
        write(dir, "metrics.normalized.csv", frame.normalized().to_csv())?;
        println!("wrote {}", dir.join("metrics.normalized.csv").display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate { configs } => validate(configs),
        Command::Run {
            config,
            common,
            event_log,
            normalize,
        } => run_one(config, common, *event_log, *normalize),
        Command::Sweep(args) => sweep_cmd(args),
        Command::Report { dir, normalize } => report(dir, *normalize),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
