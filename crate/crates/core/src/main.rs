//! Benchmark CLI: run replicated optimization experiments, summarize
//! their CSV output, and export 2-D posterior surfaces for plotting.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use addbo::acquisition::Method;
use addbo::bench::{
    csv_string, export_surface, read_csv, run_experiment, summarize, write_surface_csv,
    ExperimentConfig, FIT_STEPS, FIT_STEP_SIZE,
};
use addbo::model::{AdditiveGpModel, Dataset};
use addbo::structure::AdditiveStructure;
use addbo::testfns::{known_optimum, make_function, Kind};

#[derive(Parser)]
#[command(
    name = "addbo",
    about = "Additive-GP Bayesian optimization benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replicated optimization experiment and write CSV records.
    Run(RunArgs),
    /// Summarize an experiment CSV: per-method BOV quartiles.
    Summarize(SummarizeArgs),
    /// Export a 2-D posterior surface comparing exact and
    /// cross-group-free predictive variances.
    Surface(SurfaceArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config file; explicit flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Objective: ackley | levy | rastrigin.
    #[arg(long)]
    function: Option<Kind>,
    /// Input dimension P.
    #[arg(long)]
    dim: Option<usize>,
    /// Acquisition method: ts | ats | alcb.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial uniform design size.
    #[arg(long)]
    init: Option<usize>,
    /// Total acquired evaluations after the initial design.
    #[arg(long)]
    acquisitions: Option<usize>,
    /// Candidate grid size per round.
    #[arg(long)]
    candidates: Option<usize>,
    /// Acquisitions between hyperparameter refits.
    #[arg(long)]
    refit_every: Option<usize>,
    /// Largest random-partition block.
    #[arg(long)]
    max_group_dim: Option<usize>,
    /// Number of replicates.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run replicates one at a time.
    #[arg(long)]
    serial: bool,
    /// Record round_seconds as 0 for byte-reproducible output.
    #[arg(long)]
    no_timing: bool,
}

#[derive(clap::Args)]
struct SummarizeArgs {
    /// Experiment CSV produced by `run`.
    input: PathBuf,
    /// Objective the CSV came from, to report log10 optimality gaps.
    #[arg(long)]
    function: Option<Kind>,
    /// Dimension of that objective.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(clap::Args)]
struct SurfaceArgs {
    /// 2-D objective to observe: ackley | levy | rastrigin.
    #[arg(long, default_value = "rastrigin")]
    function: Kind,
    /// Observations before exporting the posterior.
    #[arg(long, default_value_t = 20)]
    observations: usize,
    /// Grid points per axis.
    #[arg(long, default_value_t = 50)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn build_config(args: &RunArgs) -> addbo::Result<ExperimentConfig> {
    let mut config: ExperimentConfig = match &args.config {
        Some(path) => serde_json::from_reader(BufReader::new(File::open(path)?))?,
        None => {
            let function = args.function.ok_or_else(|| {
                addbo::Error::Config("--function is required without --config".into())
            })?;
            let dim = args.dim.ok_or_else(|| {
                addbo::Error::Config("--dim is required without --config".into())
            })?;
            let method = args.method.ok_or_else(|| {
                addbo::Error::Config("--method is required without --config".into())
            })?;
            serde_json::from_value(serde_json::json!({
                "function": function,
                "dim": dim,
                "method": method,
            }))?
        }
    };
    if let Some(v) = args.function {
        config.function = v;
    }
    if let Some(v) = args.dim {
        config.dim = v;
    }
    if let Some(v) = args.method {
        config.method = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.init {
        config.init_count = v;
    }
    if let Some(v) = args.acquisitions {
        config.total_acquisitions = v;
    }
    if let Some(v) = args.candidates {
        config.candidate_count = v;
    }
    if let Some(v) = args.refit_every {
        config.refit_every = Some(v);
    }
    if let Some(v) = args.max_group_dim {
        config.max_group_dim = v;
    }
    if let Some(v) = args.reps {
        config.replicates = v;
    }
    if let Some(v) = args.seed {
        config.base_seed = v;
    }
    if args.serial {
        config.parallel = false;
    }
    if args.no_timing {
        config.record_timing = false;
    }
    config.validate()?;
    Ok(config)
}

fn write_out(path: &Option<PathBuf>, contents: &str) -> addbo::Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            w.write_all(contents.as_bytes())?;
            w.flush()?;
        }
        None => print!("{contents}"),
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> addbo::Result<()> {
    let config = build_config(&args)?;
    let records = run_experiment(&config)?;
    let csv = csv_string(&records, config.dim)?;
    write_out(&args.out, &csv)?;
    if args.out.is_some() {
        eprintln!(
            "wrote {} records ({} replicates x {} evaluations)",
            records.len(),
            config.replicates,
            config.init_count + config.total_acquisitions
        );
    }
    Ok(())
}

fn cmd_summarize(args: SummarizeArgs) -> addbo::Result<()> {
    let (records, _p) = read_csv(BufReader::new(File::open(&args.input)?))?;
    let optimum = match (args.function, args.dim) {
        (Some(kind), Some(dim)) => Some(known_optimum(kind, dim)),
        (None, None) => None,
        _ => {
            return Err(addbo::Error::Config(
                "--function and --dim must be given together".into(),
            ))
        }
    };
    let summaries = summarize(&records, optimum)?;
    for s in &summaries {
        println!("method {}:", s.method.name());
        println!("  eval_index,q1,median,q3");
        for i in 0..s.eval_index.len() {
            println!(
                "  {},{},{},{}",
                s.eval_index[i], s.q1[i], s.median[i], s.q3[i]
            );
        }
        if let Some([q1, med, q3]) = s.final_log10_gap {
            println!("  final log10 gap quartiles: {q1}, {med}, {q3}");
        }
    }
    Ok(())
}

fn cmd_surface(args: SurfaceArgs) -> addbo::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let f = make_function(args.function, 2, &mut rng)?;
    let grid = addbo::acquisition::candidate_grid::<f64, _>(2, args.observations, &mut rng)?;
    let mut data = Dataset::empty(2);
    for i in 0..args.observations {
        let point = [grid[(i, 0)], grid[(i, 1)]];
        data.push(&point, f.eval(&point))?;
    }
    let structure = AdditiveStructure::new(vec![vec![1], vec![2]], 2)?;
    let model = AdditiveGpModel::new(structure).fit(&data, FIT_STEPS, FIT_STEP_SIZE)?;
    let rows = export_surface(&model, &data, args.resolution, &mut rng)?;
    let mut buf = Vec::new();
    write_surface_csv(&rows, &mut buf)?;
    write_out(&args.out, &String::from_utf8(buf).expect("ascii csv"))?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Summarize(args) => cmd_summarize(args),
        Command::Surface(args) => cmd_surface(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
