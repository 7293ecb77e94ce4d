mod manifest;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use moe_planner::analyzer::{calibrate, compare_report, pareto_front, read_observations, select_strategy, Objective, SelectOptions};
use moe_planner::config::{load_config, validate_bundle, ConfigBundle};
use moe_planner::simcluster::{
    build_grid, grid_for, moe_oracle, random_input, read_trace_csv, run_moe_block, trace_csv_string, BlockOutput,
    ExpertSpec, Mode, RankStats, RouterSpec, SimOptions, ORACLE_TOLERANCE,
};
use moe_planner::strategy::parse_strategy;
use moe_planner::timeline::{overlap_metrics, render_gantt, schedule, synchronous, GanttFormat};

use manifest::RunManifest;

const EXIT_VERIFICATION: u8 = 1;
const EXIT_INPUT: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "moe-planner", version, about = "Plan and verify hybrid TP/EP layouts for MoE inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rank every legal strategy for a configuration.
    Analyze(AnalyzeArgs),
    /// Run one MoE block on the simulated cluster and check it against the oracle.
    Simulate(SimulateArgs),
    /// Schedule a trace CSV and export a Gantt chart.
    Gantt(GanttArgs),
    /// Side-by-side indicators for chosen strategies.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration bundle (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory for outputs; created if missing.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "ttft")]
    objective: Objective,
    /// Profiling observations used to refit the calibration coefficients.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    /// Drop strategies whose TTFT exceeds this many seconds.
    #[arg(long)]
    max_ttft: Option<f64>,
    /// Drop strategies whose ITL exceeds this many seconds.
    #[arg(long)]
    max_itl: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Fused,
    Baseline,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExpertKind {
    Affine,
    Dense,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Strategy text, e.g. "TP=8 + DP=4, TP=8 + EP=4".
    #[arg(long)]
    strategy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Tokens in the block; defaults to four per EP group.
    #[arg(long)]
    tokens: Option<usize>,
    /// Hidden width; defaults to four columns per MoE TP rank.
    #[arg(long)]
    hidden: Option<usize>,
    /// Routed experts; defaults to the smallest multiple of the EP degree not below top-k.
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long, value_enum, default_value = "dense")]
    expert_kind: ExpertKind,
}

#[derive(Args, Debug)]
struct GanttArgs {
    #[command(flatten)]
    common: Common,
    /// Trace CSV written by `simulate`.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value = "svg")]
    format: GanttFormat,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Strategy to include; repeat for more columns.
    #[arg(long = "strategy", required = true)]
    strategies: Vec<String>,
    #[arg(long, default_value = "ttft")]
    objective: Objective,
}

/// A failed run: bad input, or a simulation that disagreed with the oracle.
#[derive(Debug)]
enum Failure {
    Input(anyhow::Error),
    Verification(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn load(common: &Common) -> Result<ConfigBundle> {
    let bundle = load_config(&common.config)?;
    for w in validate_bundle(&bundle) {
        log::warn!("{w}");
    }
    fs::create_dir_all(&common.out_dir).with_context(|| format!("cannot create {}", common.out_dir.display()))?;
    Ok(bundle)
}

fn analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let mut bundle = load(&args.common)?;
    let out = &args.common.out_dir;
    let mut manifest = RunManifest::start("analyze", Some(&args.common.config));
    if let Some(path) = &args.profile {
        let file = fs::File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
        let obs = read_observations(file).with_context(|| path.display().to_string())?;
        bundle.calibration = calibrate(&obs, &bundle.calibration).with_context(|| path.display().to_string())?;
        manifest.inputs.push(path.clone());
        let fitted = serde_json::to_string_pretty(&bundle.calibration).map_err(anyhow::Error::from)? + "\n";
        manifest.write(out, "calibration.json", &fitted)?;
    }
    let options = SelectOptions {
        max_ttft: args.max_ttft,
        max_itl: args.max_itl,
        ..SelectOptions::default()
    };
    let ranked = select_strategy(&bundle, args.objective, &options).map_err(anyhow::Error::from)?;
    let report = compare_report(&ranked, args.top_n);
    manifest.write(out, "report.json", &(report.to_json() + "\n"))?;
    manifest.write(out, "report.txt", &report.render_table())?;
    let front: Vec<&str> = pareto_front(&ranked).iter().map(|e| e.label.as_str()).collect();
    manifest.write(out, "pareto.json", &(serde_json::to_string_pretty(&front).map_err(anyhow::Error::from)? + "\n"))?;
    let top = ranked.top();
    if !top.stable {
        manifest.finish(out, EXIT_INPUT as i32)?;
        return Err(Failure::Input(anyhow!(
            "every strategy saturates at arrival rate {} (best utilization {:.3})",
            bundle.workload.arrival_rate,
            top.estimate.rho
        )));
    }
    println!("{}: {}", args.objective, top.label);
    manifest.finish(out, 0)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Verification {
    strategy: String,
    mode: Mode,
    groups: usize,
    tp: usize,
    tokens: usize,
    hidden: usize,
    experts: usize,
    top_k: usize,
    seed: u64,
    tolerance: f64,
    max_rel_error: f64,
    pass: bool,
    stats: Vec<RankStats>,
}

fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let bundle = load(&args.common)?;
    let out = &args.common.out_dir;
    let strategy = parse_strategy(&args.strategy)
        .and_then(|s| s.bind(&bundle.cluster))
        .map_err(anyhow::Error::from)?;
    if strategy.d_pp != 1 {
        return Err(anyhow!("'{strategy}': the simulator runs single-stage layouts only").into());
    }
    let (groups, tp) = grid_for(&strategy);
    let tokens = args.tokens.unwrap_or(4 * groups);
    let hidden = args.hidden.unwrap_or(4 * tp);
    let top_k_model = bundle.model.top_k.max(1) as usize;
    let experts = args.experts.unwrap_or(groups * top_k_model.div_ceil(groups));
    let top_k = top_k_model.min(experts);
    if tokens % groups != 0 || hidden % tp != 0 || experts % groups != 0 {
        return Err(anyhow!(
            "tokens ({tokens}) and experts ({experts}) must divide by {groups} EP groups, hidden ({hidden}) by TP={tp}"
        )
        .into());
    }

    let mut manifest = RunManifest::start("simulate", Some(&args.common.config));
    manifest.seed = Some(args.seed);
    let x = random_input(tokens, hidden, args.seed);
    let router = RouterSpec::random(tokens, experts, top_k, args.seed.wrapping_add(1)).map_err(anyhow::Error::from)?;
    let spec = match args.expert_kind {
        ExpertKind::Affine => ExpertSpec::affine_default(experts),
        ExpertKind::Dense => ExpertSpec::dense_random(experts, hidden, args.seed.wrapping_add(2)),
    };
    let want = moe_oracle(&x, &router, &spec);
    let modes: &[Mode] = match args.mode {
        ModeArg::Fused => &[Mode::Fused],
        ModeArg::Baseline => &[Mode::Baseline],
        ModeArg::Both => &[Mode::Fused, Mode::Baseline],
    };

    let mut runs: Vec<BlockOutput> = Vec::new();
    let mut verdicts = Vec::new();
    for &mode in modes {
        let mut cluster = build_grid(groups, tp, bundle.cluster.n_proc as usize).map_err(anyhow::Error::from)?;
        let block = run_moe_block(&mut cluster, &strategy, &x, &router, &spec, &SimOptions { mode, capacity: None })
            .map_err(anyhow::Error::from)?;
        let err = block.y.max_rel_error(&want);
        let name = format!("trace_{}.csv", mode_name(mode));
        manifest.write(out, &name, &trace_csv_string(&block.trace))?;
        verdicts.push(Verification {
            strategy: strategy.to_string(),
            mode,
            groups,
            tp,
            tokens,
            hidden,
            experts,
            top_k,
            seed: args.seed,
            tolerance: ORACLE_TOLERANCE,
            max_rel_error: err,
            pass: err <= ORACLE_TOLERANCE,
            stats: block.stats.clone(),
        });
        runs.push(block);
    }
    let text = serde_json::to_string_pretty(&verdicts).map_err(anyhow::Error::from)? + "\n";
    manifest.write(out, "verification.json", &text)?;

    if let [fused, baseline] = runs.as_slice() {
        let calib = &bundle.calibration;
        let f = schedule(&fused.trace, &bundle.cluster, calib).map_err(anyhow::Error::from)?;
        let s = schedule(&synchronous(&fused.trace), &bundle.cluster, calib).map_err(anyhow::Error::from)?;
        let b = schedule(&baseline.trace, &bundle.cluster, calib).map_err(anyhow::Error::from)?;
        let metrics = overlap_metrics(&f, &s).map_err(anyhow::Error::from)?;
        let comparison = serde_json::json!({
            "overlap": metrics,
            "baseline_makespan": b.makespan,
        });
        let text = serde_json::to_string_pretty(&comparison).map_err(anyhow::Error::from)? + "\n";
        manifest.write(out, "overlap.json", &text)?;
    }

    let failed: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.pass)
        .map(|v| format!("{} mode: max relative error {:e} exceeds {:e}", mode_name(v.mode), v.max_rel_error, v.tolerance))
        .collect();
    for v in &verdicts {
        println!("{}: max relative error {:e}", mode_name(v.mode), v.max_rel_error);
    }
    if !failed.is_empty() {
        manifest.finish(out, EXIT_VERIFICATION as i32)?;
        return Err(Failure::Verification(failed.join("; ")));
    }
    manifest.finish(out, 0)?;
    Ok(())
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Fused => "fused",
        Mode::Baseline => "baseline",
    }
}

fn gantt(args: &GanttArgs) -> Result<(), Failure> {
    let bundle = load(&args.common)?;
    let out = &args.common.out_dir;
    let file = fs::File::open(&args.trace).with_context(|| format!("cannot read {}", args.trace.display()))?;
    let trace = read_trace_csv(file).with_context(|| args.trace.display().to_string())?;
    let timeline = schedule(&trace, &bundle.cluster, &bundle.calibration).map_err(anyhow::Error::from)?;
    let mut manifest = RunManifest::start("gantt", Some(&args.common.config));
    manifest.inputs.push(args.trace.clone());
    let stem = args.trace.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let name = format!("{stem}_gantt.{}", args.format.extension());
    let path = manifest.write(out, &name, &render_gantt(&timeline, args.format))?;
    println!("{} events, makespan {:e} s -> {}", timeline.events.len(), timeline.makespan, path.display());
    manifest.finish(out, 0)?;
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<(), Failure> {
    let bundle = load(&args.common)?;
    let out = &args.common.out_dir;
    let candidates = args
        .strategies
        .iter()
        .map(|t| parse_strategy(t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(anyhow::Error::from)?;
    let options = SelectOptions {
        candidates: Some(candidates),
        include_infeasible: true,
        ..SelectOptions::default()
    };
    let ranked = select_strategy(&bundle, args.objective, &options).map_err(anyhow::Error::from)?;
    let report = compare_report(&ranked, usize::MAX);
    let mut manifest = RunManifest::start("compare", Some(&args.common.config));
    manifest.write(out, "compare.json", &(report.to_json() + "\n"))?;
    manifest.write(out, "compare.txt", &report.render_table())?;
    print!("{}", report.render_table());
    manifest.finish(out, 0)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => simulate(a),
        Command::Gantt(a) => gantt(a),
        Command::Compare(a) => compare(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(EXIT_VERIFICATION)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "moe-planner",
            "simulate",
            "--config",
            "c.json",
            "--strategy",
            "TP=2 + DP=2, TP=2 + EP=2",
            "--mode",
            "fused",
            "--seed",
            "9",
        ])
        .unwrap();
        match cli.command {
            Command::Simulate(a) => {
                assert_eq!((a.mode, a.seed), (ModeArg::Fused, 9));
                assert_eq!(a.common.out_dir, Path::new("out"));
            }
            other => panic!("{other:?}"),
        }
        let cli = Cli::try_parse_from(["moe-planner", "analyze", "--config", "c.json", "--objective", "theta"]).unwrap();
        assert!(matches!(cli.command, Command::Analyze(AnalyzeArgs { objective: Objective::Throughput, .. })));
    }

    #[test]
    fn compare_needs_a_strategy() {
        assert!(Cli::try_parse_from(["moe-planner", "compare", "--config", "c.json"]).is_err());
        assert!(Cli::try_parse_from(["moe-planner", "gantt", "--config", "c.json", "--trace", "t.csv", "--format", "png"]).is_err());
    }
}
