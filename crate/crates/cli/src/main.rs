use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedstack::clustering::{prepare, ClusterInput, GmmOptions, KMeansOptions, MethodRegistry};
use fedstack::config::RunConfig;
use fedstack::lr_schedule::CyclicalSchedule;
use fedstack::model_selection::select_k;
use fedstack::nn::read_weight_csv;
use fedstack::pipeline::{run_pipeline, PipelineError, StageSeeds};
use fedstack::report::emit_reports;

#[derive(Parser)]
#[command(name = "fedstack", version, about = "Clustered stacked federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write reports.
    Run(RunArgs),
    /// Print the BIC curve for a weight-vector CSV.
    SelectK(SelectArgs),
    /// Cluster a weight-vector CSV with one or more methods.
    Cluster(ClusterArgs),
    /// Print the learning-rate curve as `epoch,lr` CSV.
    Schedule(ScheduleArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Report directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Restrict to these methods; repeatable.
    #[arg(long = "method")]
    methods: Vec<String>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Defaults to min(9, clients).
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Defaults to all registered methods.
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Defaults to the BIC choice.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for `distance_matrix.csv` and `assignments_<method>.csv`;
    /// assignments go to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    step_size: Option<usize>,
    /// Take the schedule from this config's `[meta.schedule]`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config and argument problems exit with 2, pipeline stage failures with 1.
enum Failure {
    Config(String),
    Stage(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Stage(_) => 1,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn stage_err(e: impl std::fmt::Display) -> Failure {
    Failure::Stage(e.to_string())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| stage_err(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(config_err)?;
    Ok(pool.install(f))
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut config = RunConfig::load(&args.config).map_err(config_err)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    if !args.methods.is_empty() {
        config.methods = args.methods;
    }
    if args.k.is_some() {
        config.k = args.k;
    }
    let out = args
        .out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| config_err("no output directory: pass --out or set output_dir"))?;
    let report = run_pipeline(&config).map_err(|e| match e {
        PipelineError::Config(c) => config_err(c),
        other => stage_err(other),
    })?;
    let files = emit_reports(&report, &out).map_err(stage_err)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn load_weights(path: &Path) -> Result<fedstack::nn::WeightSet, Failure> {
    let file = fs::File::open(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    read_weight_csv(file).map_err(|e| stage_err(format!("{}: {e}", path.display())))
}

fn k_max_for(requested: Option<usize>, n: usize) -> Result<usize, Failure> {
    let k_max = requested.unwrap_or(n.min(9));
    if k_max == 0 || k_max > n {
        return Err(config_err(format!("k_max = {k_max} must be in 1..={n}")));
    }
    Ok(k_max)
}

fn select(args: SelectArgs) -> Result<(), Failure> {
    let weights = load_weights(&args.weights)?;
    let (points, _) = prepare(&weights).map_err(stage_err)?;
    let k_max = k_max_for(args.k_max, points.nrows())?;
    let seeds = StageSeeds::new(args.seed, &[]);
    let result = with_pool(args.workers, || {
        select_k(points.view(), k_max, seeds.selection, args.restarts, &GmmOptions::default())
    })?
    .map_err(stage_err)?;
    eprintln!("selected k = {}", result.selected_k);
    write_or_print(args.out.as_deref(), &result.to_csv())
}

fn cluster(args: ClusterArgs) -> Result<(), Failure> {
    let registry = MethodRegistry::with_options(KMeansOptions::default(), GmmOptions::default());
    let methods: Vec<String> = if args.methods.is_empty() {
        registry.names().iter().map(|s| s.to_string()).collect()
    } else {
        args.methods.clone()
    };
    for m in &methods {
        registry.get(m).map_err(config_err)?;
    }
    let weights = load_weights(&args.weights)?;
    let (points, distances) = prepare(&weights).map_err(stage_err)?;
    let n = points.nrows();
    if let Some(k) = args.k {
        if k == 0 || k > n {
            return Err(config_err(format!("k = {k} must be in 1..={n}")));
        }
    }
    let seeds = StageSeeds::new(args.seed, &methods);
    let assignments = with_pool(args.workers, || -> Result<_, Failure> {
        let k = match args.k {
            Some(k) => k,
            None => {
                select_k(points.view(), n.min(9), seeds.selection, args.restarts, &GmmOptions::default())
                    .map_err(stage_err)?
                    .selected_k
            }
        };
        let input = ClusterInput::new(points.view(), &distances).map_err(stage_err)?;
        seeds
            .clustering
            .iter()
            .map(|(name, s)| {
                registry
                    .get(name)
                    .and_then(|m| m.cluster(&input, k, *s))
                    .map_err(stage_err)
            })
            .collect::<Result<Vec<_>, _>>()
    })??;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| stage_err(format!("{}: {e}", dir.display())))?;
            write_or_print(Some(&dir.join("distance_matrix.csv")), &distances.to_csv())?;
            for a in &assignments {
                let path = dir.join(format!("assignments_{}.csv", a.method));
                write_or_print(Some(&path), &a.to_csv())?;
                println!("{}", path.display());
            }
        }
        None => {
            for a in &assignments {
                println!("# {} (k = {})", a.method, a.k);
                print!("{}", a.to_csv());
            }
        }
    }
    Ok(())
}

fn schedule(args: ScheduleArgs) -> Result<(), Failure> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p).map_err(config_err)?.meta.schedule,
        None => CyclicalSchedule::default(),
    };
    let schedule = CyclicalSchedule::new(
        args.base_lr.unwrap_or(base.base_lr),
        args.max_lr.unwrap_or(base.max_lr),
        args.step_size.unwrap_or(base.step_size),
    )
    .map_err(config_err)?;
    write_or_print(args.out.as_deref(), &schedule.to_csv(args.epochs))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::SelectK(a) => select(a),
        Command::Cluster(a) => cluster(a),
        Command::Schedule(a) => schedule(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Config(m) => ("config error", m),
                Failure::Stage(m) => ("error", m),
            };
            eprintln!("fedstack: {kind}: {msg}");
            ExitCode::from(f.exit_code())
        }
    }
}
