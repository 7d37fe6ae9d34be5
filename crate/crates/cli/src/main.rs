use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fsa_core::data::to_signed_label;
use fsa_core::experiment::{BenchConfig, BenchOptions, BenchReport};
use fsa_core::metrics::{auc, misclassification_error, pcd, rank_disagreement, rmse};
use fsa_core::plinear::{pl_default_bins, pl_default_spec};
use fsa_core::synth::{gen_classification, gen_rank_pairs, gen_regression, SynthConfig};
use fsa_core::{
    fit, load_csv, load_ranking_csv, pl_fit, pl_refit, read_table, refit, write_csv, write_pairs_csv, BlockGrid,
    Dataset, FsaError, Hyperparams, LossKind, LossScale, LossSpec, ModelFile, Predictor, Schedule, Targets, Task,
};

const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "fsa", version, about = "Feature selection with annealing", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a sparse linear or piecewise-linear model
    Train(TrainArgs),
    /// Score a data file with a saved model
    Predict(PredictArgs),
    /// Score a labelled data file and print metrics
    Evaluate(EvaluateArgs),
    /// Write a synthetic correlated-Gaussian dataset
    Generate(GenerateArgs),
    /// Run repeated synthetic experiments from a TOML config
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Classification,
    Ranking,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
            TaskArg::Ranking => Task::Ranking,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    SquaredError,
    Logistic,
    SvmHuber,
    Lorenz,
    RankLogistic,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> LossKind {
        match l {
            LossArg::SquaredError => LossKind::SquaredError,
            LossArg::Logistic => LossKind::Logistic,
            LossArg::SvmHuber => LossKind::SvmHuber,
            LossArg::Lorenz => LossKind::Lorenz,
            LossArg::RankLogistic => LossKind::RankLogistic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Mean,
    Sum,
}

#[derive(Args)]
struct ExecArgs {
    /// Worker threads for the blocked kernels
    #[arg(long, env = "FSA_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Rows per block
    #[arg(long, default_value_t = 2048)]
    block_rows: usize,
    /// Columns per block
    #[arg(long, default_value_t = 256)]
    block_cols: usize,
}

impl ExecArgs {
    fn grid(&self) -> Result<BlockGrid, FsaError> {
        BlockGrid::new(self.block_rows, self.block_cols)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training CSV
    #[arg(long)]
    data: PathBuf,
    /// Target column (not used for ranking)
    #[arg(long, default_value = "y")]
    target: String,
    /// Pair file with columns i,j,r (ranking only)
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Defaults to the task's usual loss
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Variables to keep
    #[arg(long)]
    k: usize,
    #[arg(long)]
    eta: f64,
    #[arg(long, default_value_t = 300.0)]
    mu: f64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    /// Train a piecewise-linear model with this many bins per variable
    #[arg(long)]
    bins: Option<usize>,
    /// Piecewise-linear model with the task's default bin count
    #[arg(long)]
    pl: bool,
    /// Centre and scale columns (linear models only)
    #[arg(long)]
    standardize: bool,
    /// Seed for random tie breaking
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Break selection ties at random instead of by column order
    #[arg(long)]
    random_ties: bool,
    /// Average (mean) or sum the data-fit term
    #[arg(long, value_enum, default_value_t = ScaleArg::Mean)]
    scale: ScaleArg,
    /// Force an intercept on or off (default depends on the task)
    #[arg(long)]
    intercept: Option<bool>,
    /// Ridge weight of the prior
    #[arg(long)]
    ridge: Option<f64>,
    /// Second-difference smoothness weight (piecewise-linear)
    #[arg(long)]
    smooth: Option<f64>,
    /// Total-variation weight (piecewise-linear)
    #[arg(long)]
    tv: Option<f64>,
    /// Width of the huberized absolute value in the total-variation prior
    #[arg(long)]
    tv_width: Option<f64>,
    /// Transition width of the huberized hinge
    #[arg(long)]
    huber_h: Option<f64>,
    /// Shrink kept coefficients by 1/(1+lambda) at each selection
    #[arg(long, default_value_t = 0.0)]
    shrink: f64,
    /// Extra gradient steps on the selected support
    #[arg(long, default_value_t = 0)]
    refit_iters: usize,
    /// Model JSON to write
    #[arg(long)]
    out: PathBuf,
    /// Trace CSV (default: next to the model, `.trace.csv`)
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Target column (default: the model's training target)
    #[arg(long)]
    target: Option<String>,
    /// Pair file for ranking models
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Comma-separated names of the true variables; adds PCD
    #[arg(long, value_delimiter = ',')]
    truth: Vec<String>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    /// True variables, placed at 1-based columns 10, 20, ...
    #[arg(long)]
    k_star: usize,
    #[arg(long, default_value_t = 0.9)]
    delta: f64,
    /// Fraction of classification labels redrawn at random
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Regression noise standard deviation
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of rank pairs (ranking)
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Pair file to write (ranking)
    #[arg(long)]
    pairs_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML file with [[row]] entries
    #[arg(long)]
    config: PathBuf,
    /// Results CSV (deterministic)
    #[arg(long)]
    out: PathBuf,
    /// Aligned text table (default: stdout only)
    #[arg(long)]
    text: Option<PathBuf>,
    /// Mean training times per row
    #[arg(long)]
    timings: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<FsaError> for Failure {
    fn from(e: FsaError) -> Self {
        let code = match &e {
            FsaError::Diverged { .. } => EXIT_DIVERGED,
            FsaError::Io { .. } | FsaError::Parse { .. } | FsaError::Csv(_) | FsaError::Json(_) | FsaError::Schema(_) => EXIT_IO,
            FsaError::Validation(_) | FsaError::Config(_) | FsaError::Contract(_) => EXIT_USAGE,
            FsaError::UndefinedMetric(_) => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| {
        Failure::from(FsaError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn load_training(args: &TrainArgs, task: Task) -> Result<Dataset, Failure> {
    match (task, &args.pairs) {
        (Task::Ranking, Some(p)) => Ok(load_ranking_csv(&args.data, p)?),
        (Task::Ranking, None) => Err(usage("ranking needs --pairs")),
        (_, Some(_)) => Err(usage("--pairs is only used with --task ranking")),
        (t, None) => Ok(load_csv(&args.data, &args.target, t)?),
    }
}

fn loss_spec(args: &TrainArgs, task: Task, piecewise: bool) -> LossSpec {
    let mut spec = if piecewise {
        pl_default_spec(task)
    } else {
        LossSpec::new(LossKind::default_for(task))
    };
    if let Some(l) = args.loss {
        spec.kind = l.into();
    }
    if let Some(h) = args.huber_h {
        spec.huber_h = h;
    }
    let p = &mut spec.prior;
    if let Some(v) = args.ridge {
        p.ridge = v;
    }
    if let Some(v) = args.smooth {
        p.smooth2 = v;
        if args.tv.is_none() {
            p.tv_q = 0.0;
        }
    }
    if let Some(v) = args.tv {
        p.tv_q = v;
        if args.smooth.is_none() {
            p.smooth2 = 0.0;
        }
    }
    if let Some(v) = args.tv_width {
        p.tv_huber_h = v;
    }
    spec
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let task: Task = args.task.into();
    let bins = match (args.bins, args.pl) {
        (Some(0), _) => return Err(usage("--bins must be at least 1")),
        (Some(b), _) => Some(b),
        (None, true) => Some(pl_default_bins(task)),
        (None, false) => None,
    };
    if bins.is_some() && args.standardize {
        return Err(usage("--standardize applies to linear models only"));
    }
    if bins.is_none() && (args.smooth.is_some() || args.tv.is_some()) {
        return Err(usage("--smooth and --tv need a piecewise-linear model (--bins or --pl)"));
    }
    let data = load_training(&args, task)?;
    let spec = loss_spec(&args, task, bins.is_some());
    spec.check_targets(data.targets())?;

    let m = data.n_features();
    if args.k == m {
        eprintln!("warning: k equals the number of features ({m}); no selection takes place");
    }
    let mut hp = Hyperparams::new(args.eta, args.iters, args.mu, args.k);
    hp.seed = args.seed;
    hp.random_ties = args.random_ties;
    hp.scale = match args.scale {
        ScaleArg::Mean => LossScale::Mean,
        ScaleArg::Sum => LossScale::Sum,
    };
    hp.intercept = args.intercept;
    hp.standardize = args.standardize;
    hp.threshold_shrink = args.shrink;
    hp.workers = args.exec.workers;
    hp.grid = args.exec.grid()?;
    hp.validate(m)?;
    let sched = Schedule::new(m, args.k, args.mu, args.iters)?;

    let (predictor, trace) = match bins {
        None => {
            let (mut model, trace) = fit(&data, &spec, &hp, &sched)?;
            if args.refit_iters > 0 {
                let mut polish = hp.clone();
                polish.n_iter = args.refit_iters;
                model = refit(&data, &model, &spec, &polish)?;
            }
            (Predictor::Linear(model), trace)
        }
        Some(b) => {
            let (mut model, trace) = pl_fit(&data, &spec, &hp, &sched, b)?;
            if args.refit_iters > 0 {
                let mut polish = hp.clone();
                polish.n_iter = args.refit_iters;
                model = pl_refit(&data, &model, &spec, &polish)?;
            }
            (Predictor::PiecewiseLinear(model), trace)
        }
    };
    let file = ModelFile::new(
        task,
        spec.kind,
        data.feature_names().to_vec(),
        data.target_name().map(str::to_string),
        predictor,
    )?;
    file.write(&args.out)?;
    let trace_path = args.trace.unwrap_or_else(|| args.out.with_extension("trace.csv"));
    trace.write_csv(&trace_path)?;
    let names: Vec<&str> = file
        .predictor
        .columns()
        .iter()
        .map(|&c| file.feature_names[c].as_str())
        .collect();
    eprintln!(
        "selected {} variable(s): {}; final loss {:.6e}",
        names.len(),
        names.join(","),
        trace.final_loss()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), Failure> {
    let model = ModelFile::read(&args.model)?;
    let table = read_table(&args.data)?;
    let scores = model.scores_table(&table)?;
    let mut out = String::new();
    if model.task == Task::Classification {
        out.push_str("score,label\n");
        for s in &scores {
            let _ = writeln!(out, "{s},{}", if *s >= 0.0 { 1 } else { -1 });
        }
    } else {
        out.push_str("score\n");
        for s in &scores {
            let _ = writeln!(out, "{s}");
        }
    }
    match args.out {
        Some(p) => write_file(&p, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let model = ModelFile::read(&args.model)?;
    let table = read_table(&args.data)?;
    let scores = model.scores_table(&table)?;
    let mut report = format!("rows,{}\n", scores.len());
    match model.task {
        Task::Ranking => {
            let pairs_path = args.pairs.ok_or_else(|| usage("ranking evaluation needs --pairs"))?;
            let pairs = fsa_core::data::read_pairs(&pairs_path, scores.len())?;
            let _ = writeln!(report, "rank_disagreement,{}", rank_disagreement(&scores, &pairs)?);
        }
        task => {
            let target = args
                .target
                .or_else(|| model.target.clone())
                .ok_or_else(|| usage("the model names no target column; pass --target"))?;
            let t = table
                .column_index(&target)
                .ok_or_else(|| Failure::from(FsaError::Schema(format!("data lacks target column '{target}'"))))?;
            let y: Vec<f64> = table.rows.iter().map(|r| r[t]).collect();
            if task == Task::Classification {
                let labels = y
                    .iter()
                    .map(|&v| to_signed_label(v).ok_or_else(|| FsaError::Validation(format!("non-binary label {v}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                let _ = writeln!(report, "auc,{}", auc(&scores, &labels)?);
                let _ = writeln!(report, "error_rate,{}", misclassification_error(&scores, &labels)?);
            } else {
                let _ = writeln!(report, "rmse,{}", rmse(&scores, &y)?);
            }
        }
    }
    if !args.truth.is_empty() {
        let index = |name: &String| {
            model
                .feature_names
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| usage(format!("unknown feature '{name}' in --truth")))
        };
        let truth = args.truth.iter().map(index).collect::<Result<Vec<_>, _>>()?;
        let selected = model.predictor.columns();
        let _ = writeln!(report, "pcd,{}", pcd(&selected, &truth)?);
        let mut t = truth.clone();
        t.sort_unstable();
        t.dedup();
        let _ = writeln!(report, "exact_support,{}", selected == t);
    }
    print!("{report}");
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        n: args.n,
        m: args.m,
        k_star: args.k_star,
        delta: args.delta,
        noise_fraction: args.noise,
        sigma: args.sigma,
        seed: args.seed,
    };
    match args.task {
        TaskArg::Classification => write_csv(&gen_classification(&cfg)?, &args.out)?,
        TaskArg::Regression => write_csv(&gen_regression(&cfg)?, &args.out)?,
        TaskArg::Ranking => {
            let pairs_out = args.pairs_out.ok_or_else(|| usage("ranking data needs --pairs-out"))?;
            let d = gen_rank_pairs(&cfg, args.n_pairs.unwrap_or(4 * args.n))?;
            write_csv(&d, &args.out)?;
            if let Targets::Pairs(p) = d.targets() {
                write_pairs_csv(p, &pairs_out)?;
            }
        }
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let cfg = BenchConfig::read(&args.config)?;
    let opts = BenchOptions {
        workers: args.exec.workers,
        grid: args.exec.grid()?,
    };
    if opts.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let report = BenchReport::run(&cfg, opts)?;
    write_file(&args.out, &report.to_csv())?;
    let text = report.to_text();
    if let Some(p) = &args.text {
        write_file(p, &text)?;
    }
    if let Some(p) = &args.timings {
        write_file(p, &report.timings_csv())?;
    }
    print!("{text}");
    if report.all_failed() {
        return Err(Failure {
            code: 1,
            message: "every run failed".into(),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
