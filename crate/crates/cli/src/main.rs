//! `plusdc`: fit, diagnose and simulate Plackett-Luce models with dynamic
//! covariates.
//!
//! Exit codes: 0 success, 2 the MLE does not exist, 3 the fit did not
//! converge, 64 usage or data error, 70 numerical failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plusdc::estimate::ExistenceMode;
use plusdc::experiments::CvMode;
use plusdc::randgraph::ExperimentDesign;

#[derive(Parser, Debug)]
#[command(name = "plusdc", version, about = "Plackett-Luce ranking with dynamic covariates")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit utilities and covariate coefficients.
    Fit(FitArgs),
    /// Win probabilities for comparisons under fitted parameters.
    Predict(PredictArgs),
    /// Identifiability, curl, existence and topology report.
    Check(CheckArgs),
    /// Summary statistics of a comparison hypergraph.
    GraphStats(GraphStatsArgs),
    /// Sample a random comparison hypergraph.
    SimulateGraph(SimulateGraphArgs),
    /// Sample covariates and outcomes on a hypergraph.
    SimulateData(SimulateDataArgs),
    /// Reproducible simulation studies.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// k-fold cross-validated cross-entropy of the fitted model against plain PL.
    Cv(CvArgs),
    /// AIC/BIC over covariate subsets.
    Select(SelectArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Comparisons CSV: comparison_id,rank,object_id,x1..xd.
    #[arg(long)]
    data: PathBuf,
    /// Number of objects (default: largest object id).
    #[arg(long)]
    n: Option<usize>,
    /// Expected number of covariate columns.
    #[arg(long)]
    d: Option<usize>,
}

#[derive(Args, Debug)]
struct FitOptions {
    /// Outer stopping tolerance on the normalized log-likelihood gain.
    #[arg(long, default_value_t = 1e-10)]
    epsilon: f64,
    #[arg(long, default_value_t = 5000)]
    max_outer: usize,
    /// off, divergence or lp.
    #[arg(long, default_value = "divergence")]
    existence: ExistenceMode,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitOptions,
    /// Output parameters JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-iteration log-likelihood CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Parameters JSON as written by `fit`.
    #[arg(long)]
    params: PathBuf,
    /// Comparisons CSV; ranks may be empty.
    #[arg(long)]
    data: PathBuf,
    /// Also report the probability of each comparison's recorded ranking.
    #[arg(long)]
    ranking_prob: bool,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TopologyArgs {
    /// Compute the exact Cheeger constant (small graphs only).
    #[arg(long)]
    cheeger: bool,
    /// Compute the weakly admissible diameter at this lambda (small graphs only).
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run the exact LP existence check.
    #[arg(long)]
    lp: bool,
    /// Evaluate the curl matrix on these triangles, e.g. "1-2-4,1-3-4".
    #[arg(long)]
    triangles: Option<String>,
    #[command(flatten)]
    topology: TopologyArgs,
    /// Output JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct GraphSource {
    /// Graph CSV: edge_id,object_id.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Comparisons CSV; its hypergraph is used.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GraphStatsArgs {
    #[command(flatten)]
    source: GraphSource,
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    topology: TopologyArgs,
    /// Output JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum GraphModel {
    /// Fixed edge count, sizes 2..=7 in equal shares.
    Nurhm6,
    /// Fixed edge count, two blocks, size-5 edges.
    Hsbm2,
    /// Independent inclusion with per-size probabilities.
    Nurhm,
    /// Independent inclusion with block probabilities.
    Hsbm,
}

#[derive(Args, Debug)]
struct SimulateGraphArgs {
    #[arg(long, value_enum)]
    model: GraphModel,
    #[arg(long)]
    n: usize,
    /// Edge count for nurhm6/hsbm2 (default: the study's count for n).
    #[arg(long)]
    edges: Option<usize>,
    /// nurhm: inclusion probabilities for sizes 2, 3, ...
    #[arg(long, value_delimiter = ',')]
    probs: Vec<f64>,
    /// hsbm: edge size.
    #[arg(long)]
    edge_size: Option<usize>,
    /// hsbm: block sizes.
    #[arg(long, value_delimiter = ',')]
    blocks: Vec<usize>,
    /// hsbm: within-block probabilities.
    #[arg(long, value_delimiter = ',')]
    within: Vec<f64>,
    /// hsbm: probability of edges spanning blocks.
    #[arg(long)]
    cross: Option<f64>,
    #[arg(long, env = "PLUSDC_SEED")]
    seed: u64,
    /// Output graph CSV; metadata goes to `<out>.meta.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateDataArgs {
    /// Graph CSV: edge_id,object_id.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    /// True covariate coefficients; their count sets d.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    v: Vec<f64>,
    /// Utilities are drawn uniformly from [-w, w] and centered.
    #[arg(long, default_value_t = 0.5)]
    u_half_width: f64,
    #[arg(long, env = "PLUSDC_SEED")]
    seed: u64,
    /// Output comparisons CSV.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the true parameters (default: `<out>.truth.json`).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ExperimentCommand {
    /// Estimation error against n on a random design.
    Consistency(ConsistencyArgs),
}

#[derive(Args, Debug)]
struct ConsistencyArgs {
    #[arg(long)]
    design: ExperimentDesign,
    /// Object counts, e.g. 100,200,400.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1,-0.5,0")]
    v_star: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    u_half_width: f64,
    #[arg(long, env = "PLUSDC_SEED")]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_value = "top1,top3,full")]
    modes: Vec<CvMode>,
    #[arg(long, env = "PLUSDC_SEED")]
    seed: u64,
    /// Output directory (default: summary JSON on stdout only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// "all", or 1-based covariate subsets separated by ';' ("none" is the
    /// empty subset), e.g. "none;1;1,3".
    #[arg(long, default_value = "all")]
    subsets: String,
    /// Output directory (default: JSON on stdout only).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot set up {threads} threads: {e}");
            return ExitCode::from(64);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Predict(a) => commands::predict(a),
        Command::Check(a) => commands::check(a),
        Command::GraphStats(a) => commands::graph_stats(a),
        Command::SimulateGraph(a) => commands::simulate_graph(a),
        Command::SimulateData(a) => commands::simulate_data(a),
        Command::Experiment(ExperimentCommand::Consistency(a)) => commands::consistency(a),
        Command::Cv(a) => commands::cv(a),
        Command::Select(a) => commands::select(a),
    };
    match result {
        Ok(outcome) => ExitCode::from(outcome.code()),
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
