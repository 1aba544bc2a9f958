use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use rpy_core::align::{AlignTrainer, RunLog, TrainConfig};
use rpy_core::divergence::discrete_metric;
use rpy_core::fair_lp::{check_prop3, solve_fair};
use rpy_core::linalg::DenseMatrix;
use rpy_core::mdp::{GroupPair, Mdp, Policy};
use rpy_core::parity::{analyze, check_prop2, Witness};
use rpy_core::pca::project_groups;
use rpy_core::report::{
    aggregate, load_pair, ratio_label, read_features, write_csv, write_features, DisparityRow, Report, RunConfig,
};
use rpy_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rpy", version, about = "Return parity analysis, fair LP, and aligned DQN training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact return disparity and decomposition bounds for two policies.
    Analyze(AnalyzeArgs),
    /// Check the sufficient conditions for (in)feasibility of return parity.
    Check(CheckArgs),
    /// Solve the return-parity-constrained occupancy LP.
    Optimize(OptimizeArgs),
    /// Train the aligned double-DQN over a seed x ratio grid.
    Train(TrainArgs),
    /// Project per-group feature batches onto two principal components.
    Pca(PcaArgs),
}

#[derive(Args)]
struct PairArgs {
    /// A group-pair JSON file, or two MDP JSON files (group 0 then group 1).
    #[arg(long, required = true, num_args = 1)]
    pair: Vec<PathBuf>,
    /// Population share of group 0 (overrides the pair file).
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    policy0: PathBuf,
    #[arg(long)]
    policy1: PathBuf,
    /// `sup` or `lipschitz:L`.
    #[arg(long, default_value = "sup")]
    witness: String,
    /// Ground metric on states (JSON m x m) for the Lipschitz witness;
    /// defaults to the 0/1 metric.
    #[arg(long)]
    metric: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Prop2,
    Prop3,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, value_enum)]
    which: Which,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PcaArgs {
    /// Headerless numeric CSV per group, in group order.
    #[arg(long = "features", required = true)]
    features: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn load_pair_args(args: &PairArgs, inputs: &mut Vec<Vec<u8>>) -> Result<GroupPair> {
    for p in &args.pair {
        inputs.push(read_bytes(p)?);
    }
    let pair = match args.pair.as_slice() {
        [one] => load_pair(one)?,
        [a, b] => GroupPair::new(Mdp::load(a)?, Mdp::load(b)?, args.lambda.unwrap_or(0.5))?,
        _ => return Err(Error::Validation("--pair takes one pair file or two MDP files".into())),
    };
    match args.lambda {
        Some(l) => GroupPair::new(pair.mdp0, pair.mdp1, l),
        None => Ok(pair),
    }
}

fn parse_witness(spec: &str, metric: Option<&Path>, m: usize, inputs: &mut Vec<Vec<u8>>) -> Result<Witness> {
    if spec == "sup" {
        return Ok(Witness::SupNormBall);
    }
    let Some(l) = spec.strip_prefix("lipschitz:") else {
        return Err(Error::Validation(format!("unknown witness '{spec}' (expected sup or lipschitz:L)")));
    };
    let constant: f64 = l
        .parse()
        .map_err(|e| Error::Validation(format!("bad Lipschitz constant '{l}': {e}")))?;
    let metric = match metric {
        None => discrete_metric(m),
        Some(p) => {
            let bytes = read_bytes(p)?;
            let rows: Vec<Vec<f64>> = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Parse(format!("{}: line {} column {}: {e}", p.display(), e.line(), e.column())))?;
            inputs.push(bytes);
            DenseMatrix::from_rows(&rows)?
        }
    };
    Ok(Witness::Lipschitz { constant, metric })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn emit(report: &Report, out: Option<&Path>) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            write_text(&dir.join(format!("{}.json", report.command)), &report.to_json())
        }
        None => {
            println!("{}", report.to_json());
            Ok(())
        }
    }
}

fn csv_string<T: serde::Serialize>(rows: &[T]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    let t = Instant::now();
    let mut inputs = Vec::new();
    let pair = load_pair_args(&a.pair, &mut inputs)?;
    inputs.push(read_bytes(&a.policy0)?);
    inputs.push(read_bytes(&a.policy1)?);
    let pi0 = Policy::load(&a.policy0)?;
    let pi1 = Policy::load(&a.policy1)?;
    let witness = parse_witness(&a.witness, a.metric.as_deref(), pair.num_states(), &mut inputs)?;
    let rep = analyze(&pair, &pi0, &pi1, &witness)?;
    let report = Report::new("analyze", &inputs, serde_json::to_value(&rep).expect("serializable"), vec![], t.elapsed().as_secs_f64());
    if let Some(dir) = &a.out {
        write_text(&dir.join("analyze.csv"), &csv_string(&[DisparityRow::from(&rep)])?)?;
        eprintln!(
            "delta_ret {:.6}  thm1 {:.6}  thm2 {:.6}",
            rep.delta_ret, rep.bound_thm1.total, rep.bound_thm2.total
        );
    }
    emit(&report, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(a: CheckArgs) -> Result<ExitCode> {
    let t = Instant::now();
    let mut inputs = Vec::new();
    let pair = load_pair_args(&a.pair, &mut inputs)?;
    let (name, results) = match a.which {
        Which::Prop2 => ("check", json!({ "which": "prop2", "outcome": check_prop2(&pair)? })),
        Which::Prop3 => {
            let eps = a
                .epsilon
                .ok_or_else(|| Error::Validation("--which prop3 needs --epsilon".into()))?;
            ("check", json!({ "which": "prop3", "epsilon": eps, "outcome": check_prop3(&pair, eps)? }))
        }
    };
    let holds = results["outcome"]["holds"].as_bool().unwrap_or(false);
    let report = Report::new(name, &inputs, results, vec![], t.elapsed().as_secs_f64());
    if a.out.is_some() {
        eprintln!("holds = {holds}");
    }
    emit(&report, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_optimize(a: OptimizeArgs) -> Result<ExitCode> {
    let t = Instant::now();
    let mut inputs = Vec::new();
    let pair = load_pair_args(&a.pair, &mut inputs)?;
    let sol = solve_fair(&pair, a.epsilon)?;
    let optimal = sol.is_optimal();
    let report = Report::new("optimize", &inputs, serde_json::to_value(&sol).expect("serializable"), vec![], t.elapsed().as_secs_f64());
    if let Some(dir) = &a.out {
        for (name, pi) in [("policy0.json", &sol.pi0), ("policy1.json", &sol.pi1)] {
            if let Some(pi) = pi {
                write_text(&dir.join(name), &serde_json::to_string_pretty(pi).expect("serializable"))?;
            }
        }
        eprintln!("status {:?}  objective {:?}  achieved_disparity {:?}", sol.status, sol.objective, sol.achieved_disparity);
    }
    emit(&report, a.out.as_deref())?;
    Ok(if optimal { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("RPY_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("RPY_THREADS = '{v}' is not a positive integer")))?;
        if n == 0 {
            return Err(Error::Config("RPY_THREADS must be positive".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

struct RunResult {
    ratio: [u32; 2],
    seed: u64,
    log: RunLog,
    features: Option<[Vec<Vec<f64>>; 2]>,
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let t = Instant::now();
    let text = std::fs::read_to_string(&a.config).map_err(|e| Error::Io(format!("{}: {e}", a.config.display())))?;
    let mut cfg = RunConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", a.config.display())),
        other => other,
    })?;
    if let Some(seeds) = a.seeds {
        cfg.seeds = seeds;
    }
    let base_dir = a.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let env = cfg.env.build(&base_dir)?;
    let base = cfg.trainer_config()?;
    let jobs: Vec<([u32; 2], u64)> = cfg
        .ratios
        .iter()
        .flat_map(|r| cfg.seeds.iter().map(move |s| (*r, *s)))
        .collect();
    let pool = thread_pool()?;
    let results: Vec<RunResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(ratio, seed)| {
                let tc = TrainConfig { ratio, ..base.clone() };
                let mut tr = AlignTrainer::new(tc, env.feature_dim(), env.num_actions(), seed)?;
                let log = tr.train(env.as_ref())?;
                let features = if cfg.export_features {
                    let ev = tr.evaluate(env.as_ref(), tr.config().eval_episodes, seed, true)?;
                    Some(ev.features)
                } else {
                    None
                };
                Ok(RunResult { ratio, seed, log, features })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    std::fs::create_dir_all(&a.out)?;
    let mut summary = Vec::new();
    let mut agg_rows = Vec::new();
    for ratio in &cfg.ratios {
        let runs: Vec<&RunResult> = results.iter().filter(|r| r.ratio == *ratio).collect();
        let tag = format!("{}-{}", ratio[0], ratio[1]);
        for r in &runs {
            let mut buf = Vec::new();
            r.log.write_csv(&mut buf)?;
            write_text(&a.out.join(format!("run_ratio{tag}_seed{}.csv", r.seed)), &String::from_utf8(buf).expect("utf-8"))?;
            if let Some(f) = &r.features {
                for (g, rows) in f.iter().enumerate() {
                    let mut buf = Vec::new();
                    write_features(rows, &mut buf)?;
                    write_text(
                        &a.out.join(format!("features_ratio{tag}_seed{}_g{g}.csv", r.seed)),
                        &String::from_utf8(buf).expect("utf-8"),
                    )?;
                }
            }
        }
        let logs: Vec<RunLog> = runs.iter().map(|r| r.log.clone()).collect();
        agg_rows.extend(aggregate(*ratio, &logs));
        let n = logs.len() as f64;
        let final_gap = logs.iter().map(|l| l.tail_mean(0.1, |r| r.gap)).sum::<f64>() / n;
        let final_overall = logs.iter().map(|l| l.tail_mean(0.1, |r| r.overall_return)).sum::<f64>() / n;
        let mmd_start = logs.iter().map(|l| l.rows.first().map_or(f64::NAN, |r| r.alignment_loss)).sum::<f64>() / n;
        let mmd_end = logs.iter().map(|l| l.tail_mean(0.1, |r| r.alignment_loss)).sum::<f64>() / n;
        eprintln!("ratio {:>4}  final gap {final_gap:.4}  overall {final_overall:.4}  mmd {mmd_start:.4} -> {mmd_end:.4}", ratio_label(*ratio));
        summary.push(json!({
            "ratio": ratio_label(*ratio),
            "final_gap_mean": final_gap,
            "final_overall_return_mean": final_overall,
            "alignment_loss_start": mmd_start,
            "alignment_loss_end": mmd_end,
        }));
    }
    write_text(&a.out.join("aggregate.csv"), &csv_string(&agg_rows)?)?;
    let results_json = json!({ "trainer": base, "env": cfg.env, "ratios": summary });
    let report = Report::new("train", &[text.into_bytes()], results_json, cfg.seeds.clone(), t.elapsed().as_secs_f64());
    emit(&report, Some(&a.out))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_pca(a: PcaArgs) -> Result<ExitCode> {
    let groups = a.features.iter().map(|p| read_features(p)).collect::<Result<Vec<_>>>()?;
    let (pca, points) = project_groups(&groups)?;
    let text = csv_string(&points)?;
    match &a.out {
        Some(p) => {
            write_text(p, &text)?;
            eprintln!("explained variance ratio {:?}", pca.explained_ratio());
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse(_)
        | Error::Validation(_)
        | Error::Config(_)
        | Error::Io(_)
        | Error::DimensionMismatch(_)
        | Error::InvalidParameter(_)
        | Error::IndexOutOfRange { .. }
        | Error::AssumptionViolated { .. }
        | Error::WitnessPreconditionViolated(_)
        | Error::BatchTooSmall { .. }
        | Error::DegenerateData(_) => 2,
        Error::LpStatus(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Check(a) => cmd_check(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Train(a) => cmd_train(a),
        Command::Pca(a) => cmd_pca(a),
    };
    match out {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
