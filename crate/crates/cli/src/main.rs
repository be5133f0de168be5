use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use tnsynth::dsl::{exec_program, ExecState, Program};
use tnsynth::io::{load_network, load_tensor, relative_error_by_name, save_network, save_tensor, Report, Truth};
use tnsynth::rank::RankStrategy;
use tnsynth::search::{
    decompose_with_topology, generate_synthetic, ht_baseline, search_structure, tt_baseline, SearchConfig,
    SearchResult,
};
use tnsynth::{Error, Tensor, TensorNetwork};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  semantic failure (program failed to execute, verify out of bounds)
  2  input error (bad arguments, unreadable or malformed files)
  3  unsupported input (for example order-2 data for search)
  4  internal invariant violation";

/// Slack on top of eps when checking a network against its bound.
const VERIFY_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "tnsynth", version, about = "Tensor network structure search", after_help = EXIT_CODES)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search topology and ranks for a tensor.
    #[command(after_help = EXIT_CODES)]
    Search(SearchArgs),
    /// Write a random tensor with a known low-rank tree structure.
    #[command(after_help = EXIT_CODES)]
    Generate(GenerateArgs),
    /// Recontract a saved network and check it against the data.
    #[command(after_help = EXIT_CODES)]
    Verify(VerifyArgs),
    /// Tensor-train or hierarchical-Tucker decomposition.
    #[command(after_help = EXIT_CODES)]
    Baseline(BaselineArgs),
    /// Decompose with the topology found in an earlier report.
    #[command(after_help = EXIT_CODES)]
    Reuse(ReuseArgs),
    /// Execute a split program on a tensor.
    #[command(after_help = EXIT_CODES)]
    RunProgram(RunProgramArgs),
}

#[derive(Args)]
struct Output {
    /// Report path (JSON). Printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for the factor tensors, topology and DOT graph.
    #[arg(long)]
    save_network: Option<PathBuf>,
}

#[derive(Args)]
struct Tuning {
    /// Number of completed sketches executed on the data.
    #[arg(long, default_value_t = 1)]
    topk: usize,
    /// Maximum number of splits per sketch [default: min(2d-3, 6)].
    #[arg(long)]
    max_splits: Option<usize>,
    /// Spacing of the error-budget bins as a fraction of the budget.
    #[arg(long, default_value_t = 0.1)]
    bin_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "TNSYNTH_THREADS", default_value_t = 0)]
    threads: usize,
    #[arg(long, value_enum, default_value_t = Strategy::Constraint)]
    rank_strategy: Strategy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    /// Ranks from the budget-constrained cost minimization.
    Constraint,
    /// Each split gets an equal share of the error budget.
    Equal,
}

#[derive(Args)]
struct SearchArgs {
    input: PathBuf,
    /// Relative Frobenius error bound.
    #[arg(long)]
    eps: f64,
    #[command(flatten)]
    tuning: Tuning,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct GenerateArgs {
    /// Mode sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    rank_min: usize,
    #[arg(long, default_value_t = 5)]
    rank_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the ground-truth description (JSON).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also save the ground-truth network.
    #[arg(long)]
    save_network: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    data: PathBuf,
    /// A network directory or a report that names one.
    artifact: PathBuf,
    /// Bound to check against instead of the declared one.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Tt,
    Ht,
}

#[derive(Args)]
struct BaselineArgs {
    input: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    eps: f64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct ReuseArgs {
    input: PathBuf,
    /// Report whose edge list gives the topology.
    #[arg(long)]
    sketch_from: PathBuf,
    #[arg(long)]
    eps: f64,
    #[command(flatten)]
    tuning: Tuning,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct RunProgramArgs {
    input: PathBuf,
    /// Program text, one `osplit {I1,I2} rank=3` per line.
    program: PathBuf,
    #[arg(long)]
    eps: f64,
    #[command(flatten)]
    output: Output,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn semantic(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::ShapeMismatch(_) | Error::Malformed(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Unsupported(_) => 3,
            Error::InvalidState(_) => 4,
        };
        Self { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn read_input(path: &Path) -> Result<Tensor, Failure> {
    load_tensor(path).map_err(|e| {
        let f = Failure::from(e);
        Failure { message: format!("{}: {}", path.display(), f.message), ..f }
    })
}

fn config(eps: f64, t: &Tuning) -> SearchConfig {
    SearchConfig {
        eps,
        k: t.topk,
        max_splits: t.max_splits,
        bin_fraction: t.bin_fraction,
        seed: t.seed,
        threads: t.threads,
        strategy: match t.rank_strategy {
            Strategy::Constraint => RankStrategy::Constraint,
            Strategy::Equal => RankStrategy::Equal,
        },
    }
}

fn summarize(r: &Report) {
    eprintln!(
        "{}: ratio {:.4} ({} -> {} entries), relative error {:.3e} (eps {:e}), {} nodes",
        r.method,
        r.compression_ratio,
        r.tensor_size,
        r.network_size,
        r.achieved_rel_error,
        r.eps,
        r.nodes.len()
    );
}

fn emit(mut report: Report, input: &Path, g: &TensorNetwork, output: &Output) -> CmdResult {
    report.input = Some(input.display().to_string());
    if let Some(dir) = &output.save_network {
        save_network(dir, g, Some(report.eps))?;
        report.network_dir = Some(dir.display().to_string());
        info!("network saved to {}", dir.display());
    }
    summarize(&report);
    match &output.out {
        Some(path) => report.save(path)?,
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?),
    }
    Ok(())
}

fn emit_result(method: &str, t: &Tensor, r: &SearchResult, cfg: Option<SearchConfig>, input: &Path, o: &Output) -> CmdResult {
    let eps = cfg.as_ref().map_or(0.0, |c| c.eps);
    let mut report = Report::from_result(method, t, r, eps);
    report.config = cfg;
    emit(report, input, &r.network, o)
}

fn search(a: SearchArgs) -> CmdResult {
    let t = read_input(&a.input)?;
    let cfg = config(a.eps, &a.tuning);
    cfg.validate()?;
    let r = search_structure(&t, &cfg)?;
    emit_result("search", &t, &r, Some(cfg), &a.input, &a.output)
}

fn generate(a: GenerateArgs) -> CmdResult {
    let syn = generate_synthetic(&a.dims, (a.rank_min, a.rank_max), a.seed)?;
    save_tensor(&a.out, &syn.tensor)?;
    if let Some(path) = &a.truth {
        let truth = Truth::new(&syn, (a.rank_min, a.rank_max), a.seed);
        let mut text = serde_json::to_string_pretty(&truth).map_err(Error::from)?;
        text.push('\n');
        std::fs::write(path, text).map_err(Error::from)?;
    }
    if let Some(dir) = &a.save_network {
        save_network(dir, &syn.truth, None)?;
    }
    eprintln!(
        "wrote {} ({} values), ground-truth ratio {:.4}",
        a.out.display(),
        syn.tensor.len(),
        syn.ratio()
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> CmdResult {
    let t = read_input(&a.data)?;
    let (dir, declared, claimed) = if a.artifact.is_dir() {
        let dir = a.artifact.clone();
        (dir, None, None)
    } else {
        let report = Report::load(&a.artifact)?;
        let Some(dir) = &report.network_dir else {
            return Err(Failure::input(format!(
                "{} does not name a saved network (rerun with --save-network)",
                a.artifact.display()
            )));
        };
        let mut dir = PathBuf::from(dir);
        if dir.is_relative() && !dir.exists() {
            if let Some(parent) = a.artifact.parent() {
                dir = parent.join(dir);
            }
        }
        (dir, Some(report.eps), Some(report.achieved_rel_error))
    };
    let saved = load_network(&dir)?;
    let eps = a
        .eps
        .or(declared)
        .or(saved.eps)
        .ok_or_else(|| Failure::input("no error bound declared; pass --eps"))?;
    let g = &saved.network;
    let rel = relative_error_by_name(g, &t)?;
    println!("achieved_rel_error {rel:e}");
    println!("eps {eps:e}");
    println!("tensor_size {}", t.len());
    println!("network_size {}", g.size());
    println!("compression_ratio {}", t.len() as f64 / g.size() as f64);
    for (id, n) in g.nodes() {
        println!("node {id} size {}", n.len());
    }
    if let Some(claimed) = claimed {
        println!("reported_rel_error {claimed:e}");
        if (claimed - rel).abs() > 1e-10 {
            return Err(Failure::semantic(format!("report claims error {claimed:e}, recomputed {rel:e}")));
        }
    }
    if rel <= eps + VERIFY_TOLERANCE {
        println!("within_eps true");
        Ok(())
    } else {
        println!("within_eps false");
        Err(Failure::semantic(format!("relative error {rel:e} exceeds eps {eps:e}")))
    }
}

fn baseline(a: BaselineArgs) -> CmdResult {
    let t = read_input(&a.input)?;
    let (name, r) = match a.method {
        Method::Tt => ("tt", tt_baseline(&t, a.eps)?),
        Method::Ht => ("ht", ht_baseline(&t, a.eps)?),
    };
    let report = Report::from_result(name, &t, &r, a.eps);
    emit(report, &a.input, &r.network, &a.output)
}

fn reuse(a: ReuseArgs) -> CmdResult {
    let t = read_input(&a.input)?;
    let source = Report::load(&a.sketch_from)?;
    let sketch = source.sketch(t.indices())?;
    let cfg = config(a.eps, &a.tuning);
    let r = decompose_with_topology(&t, &sketch, &cfg)?;
    emit_result("reuse", &t, &r, Some(cfg), &a.input, &a.output)
}

fn run_program(a: RunProgramArgs) -> CmdResult {
    let t = read_input(&a.input)?;
    let text = std::fs::read_to_string(&a.program)
        .map_err(|e| Failure::input(format!("{}: {e}", a.program.display())))?;
    let p = Program::parse(&text, t.indices())?;
    let start = Instant::now();
    let st = exec_program(&p, ExecState::new(t.clone(), a.eps)?).map_err(|f| Failure::semantic(format!("program failed at {f}")))?;
    let g = st.network;
    let rel = relative_error_by_name(&g, &t)?;
    let mut report = Report::describe("program", &t, &g, a.eps, rel);
    report.timings.execution = start.elapsed().as_secs_f64();
    report.timings.total = report.timings.execution;
    report.executions = 1;
    emit(report, &a.input, &g, &a.output)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Search(a) => search(a),
        Command::Generate(a) => generate(a),
        Command::Verify(a) => verify(a),
        Command::Baseline(a) => baseline(a),
        Command::Reuse(a) => reuse(a),
        Command::RunProgram(a) => run_program(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
