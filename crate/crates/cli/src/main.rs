use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use widthsearch::assign::{grid_audit, OverlapMode, Principle};
use widthsearch::bench::{
    correlate, flops_correlation, generate_benchmark, score_supernet, BenchmarkTable, SyntheticOracle,
};
use widthsearch::eval::{retrain_from_scratch, SupernetEvaluator};
use widthsearch::net::{write_checkpoint, SynthDataset};
use widthsearch::pipeline::{
    self, files, init_run_dir, median_flops, population_stage, read_artifact, read_loss_log, read_supernet,
    run_pipeline, search_stage, train_stage, write_artifact, write_history, Artifact, Method, OracleConfig, RunConfig,
    Stage, Trained,
};
use widthsearch::prior::{build_error_table, sample_population, solve_distribution};
use widthsearch::rng::substream;
use widthsearch::space::{FlopsTable, SearchSpace, WidthVector};
use widthsearch::supertrain::UpdateMode;

/// Layer-width search with weight-sharing supernets under a FLOPs budget.
#[derive(Parser)]
#[command(name = "widthsearch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a space file and print its grids and FLOPs range.
    Space(SpaceArgs),
    /// Train the supernet and write its checkpoint and loss log.
    Train(RunArgs),
    /// Print per-channel cardinality audits for every layer.
    Audit(SpaceArgs),
    /// Solve the prior sampling distribution and draw the initial population.
    Prior(RunArgs),
    /// Search for the best width under the budget.
    Search(RunArgs),
    /// Evaluate widths on a run's trained supernet.
    Eval(EvalArgs),
    /// Benchmark tables: generation, supernet scoring and correlation.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Run every stage end to end.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PrincipleArg {
    Ua,
    Bc,
    Bcv2,
}

#[derive(Clone, Copy, ValueEnum)]
enum OverlapArg {
    ExactFair,
    PaperLiteral,
}

impl From<OverlapArg> for OverlapMode {
    fn from(o: OverlapArg) -> Self {
        match o {
            OverlapArg::ExactFair => OverlapMode::ExactFair,
            OverlapArg::PaperLiteral => OverlapMode::PaperLiteral,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum UpdateModeArg {
    Both,
    Iterative,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Evo,
    EvoPrior,
    Greedy,
    Random,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Evo => Method::Evo,
            MethodArg::EvoPrior => Method::EvoPrior,
            MethodArg::Greedy => Method::Greedy,
            MethodArg::Random => Method::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Synthetic,
}

fn principle_of(p: Option<PrincipleArg>, overlap: Option<OverlapArg>, current: Principle) -> Principle {
    match (p, overlap) {
        (Some(PrincipleArg::Ua), _) => Principle::Ua,
        (Some(PrincipleArg::Bc), _) => Principle::Bc,
        (Some(PrincipleArg::Bcv2), o) => Principle::BcV2 {
            overlap: o.map(Into::into).unwrap_or_default(),
        },
        (None, Some(o)) => match current {
            Principle::BcV2 { .. } => Principle::BcV2 { overlap: o.into() },
            other => other,
        },
        (None, None) => current,
    }
}

#[derive(Args)]
struct SpaceArgs {
    /// Search space file (JSON).
    #[arg(long)]
    space: PathBuf,
    #[arg(long, value_enum)]
    principle: Option<PrincipleArg>,
    #[arg(long, value_enum)]
    overlap: Option<OverlapArg>,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON). Without it, `--space` or the config
    /// stored in `--out` is used. Flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Search space file (JSON).
    #[arg(long)]
    space: Option<PathBuf>,
    /// FLOPs budget: an integer, or `median` for the median over the space.
    #[arg(long)]
    budget: Option<String>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Root seed; every stage seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    principle: Option<PrincipleArg>,
    /// Train complementary widths alongside sampled ones.
    #[arg(long)]
    complementary: Option<bool>,
    #[arg(long, value_enum)]
    update_mode: Option<UpdateModeArg>,
    #[arg(long, value_enum)]
    overlap: Option<OverlapArg>,
    /// Replace training with an analytic fitness (for testing searches).
    #[arg(long, value_enum)]
    oracle: Option<OracleArg>,
    /// Supernet training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Evolution iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding a trained supernet.
    #[arg(long)]
    out: PathBuf,
    /// Width to evaluate, e.g. `4,6,8` (repeatable).
    #[arg(long = "width", required = true)]
    widths: Vec<WidthVector>,
    /// Also retrain each width from scratch.
    #[arg(long)]
    retrain: bool,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Retrain every width of a small space and write a JSONL table.
    Generate(GenerateArgs),
    /// Correlate a run's supernet estimates with a benchmark table.
    Score(ScoreArgs),
    /// Correlate two JSON arrays of numbers, or FLOPs with accuracy in a table.
    Correlate(CorrelateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Run configuration supplying space, data and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Retraining seeds per width.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long, value_enum)]
    oracle: Option<OracleArg>,
    /// Output table (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV export.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Run directory holding a trained supernet.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    table: PathBuf,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long, requires = "truth", conflicts_with = "table")]
    predicted: Option<PathBuf>,
    #[arg(long, requires = "predicted")]
    truth: Option<PathBuf>,
    /// Benchmark table for the FLOPs-vs-accuracy correlation.
    #[arg(long)]
    table: Option<PathBuf>,
}

/// Accepts both a bare value and a run artifact wrapping it.
fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(a) = serde_json::from_str::<Artifact<T>>(&text) {
        return Ok(a.data);
    }
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn parse_budget(s: &str, space: &SearchSpace) -> Result<u64> {
    let flops = FlopsTable::dense(space);
    if s == "median" {
        return Ok(median_flops(space, &flops)?);
    }
    s.parse()
        .with_context(|| format!("budget must be an integer or `median`, got {s:?}"))
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = if let Some(p) = &args.config {
        load_json::<RunConfig>(p)?
    } else if let Some(p) = &args.space {
        let space: SearchSpace = load_json(p)?;
        let budget = match &args.budget {
            Some(b) => parse_budget(b, &space)?,
            None => parse_budget("median", &space)?,
        };
        RunConfig::new(space, budget, Method::default(), args.seed.unwrap_or(0))
    } else if args.out.join(files::RUN_CONFIG).exists() {
        pipeline::load_run_config(&args.out)?
    } else {
        bail!("need --config, --space, or a run directory with {}", files::RUN_CONFIG);
    };
    if let Some(b) = &args.budget {
        cfg.budget = parse_budget(b, &cfg.space)?;
    }
    if let Some(m) = args.method {
        cfg.method = m.into();
    }
    cfg.train.principle = principle_of(args.principle, args.overlap, cfg.train.principle);
    if let Some(c) = args.complementary {
        cfg.train.complementary = c;
    }
    if let Some(u) = args.update_mode {
        cfg.train.update_mode = match u {
            UpdateModeArg::Both => UpdateMode::BothPaths,
            UpdateModeArg::Iterative => UpdateMode::Iterative,
        };
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(i) = args.iterations {
        cfg.evo.iterations = i;
    }
    if args.oracle.is_some() && cfg.oracle.is_none() {
        cfg.oracle = Some(OracleConfig::default());
        cfg.reseed(cfg.seed);
    }
    if let Some(s) = args.seed {
        cfg.reseed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_space(args: &SpaceArgs) -> Result<()> {
    let space: SearchSpace = load_json(&args.space)?;
    let principle = principle_of(args.principle, args.overlap, Principle::Bc);
    let flops = FlopsTable::dense(&space);
    #[derive(Serialize)]
    struct Layer {
        max_width: usize,
        base_width: usize,
        grid: Vec<usize>,
        physical_width: usize,
    }
    #[derive(Serialize)]
    struct Summary {
        size: String,
        genes: usize,
        min_flops: u64,
        max_flops: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        median_flops: Option<u64>,
        layers: Vec<Layer>,
    }
    let layers = space
        .layers()
        .iter()
        .enumerate()
        .map(|(l, s)| {
            Ok(Layer {
                max_width: s.max_width,
                base_width: s.base_width,
                grid: space.grid(l).to_vec(),
                physical_width: principle.physical_width(s)?,
            })
        })
        .collect::<Result<_>>()?;
    print_json(&Summary {
        size: space.size().to_string(),
        genes: space.genes().len(),
        min_flops: flops.flops(&space.min_width())?,
        max_flops: flops.flops(&space.max_width())?,
        median_flops: if space.size() <= 1 << 20 {
            Some(median_flops(&space, &flops)?)
        } else {
            None
        },
        layers,
    })
}

fn cmd_audit(args: &SpaceArgs) -> Result<()> {
    let space: SearchSpace = load_json(&args.space)?;
    let principle = principle_of(args.principle, args.overlap, Principle::Bc);
    #[derive(Serialize)]
    struct Audit {
        layer: usize,
        counts: Vec<u64>,
        uniform: bool,
    }
    let audits = space
        .layers()
        .iter()
        .enumerate()
        .map(|(layer, s)| {
            let counts = grid_audit(principle, s)?;
            let uniform = counts.iter().all(|&c| c == counts[0]);
            Ok(Audit { layer, counts, uniform })
        })
        .collect::<Result<Vec<_>>>()?;
    print_json(&serde_json::json!({ "principle": principle.to_string(), "layers": audits }))
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    init_run_dir(&cfg, &args.out)?;
    let (trained, log) = train_stage(&cfg)?;
    if let Trained::Supernet { net, .. } = &trained {
        let mut w = BufWriter::new(File::create(args.out.join(files::SUPERNET))?);
        write_checkpoint(net, cfg.stage_hash_bytes(Stage::Train), &mut w)?;
        w.flush()?;
    }
    let mut w = BufWriter::new(File::create(args.out.join(files::LOSS_LOG))?);
    log.write_jsonl(&mut w, &cfg.stage_hash(Stage::Train))?;
    w.flush()?;
    eprintln!("trained; {} loss entries in {}", log.len(), args.out.display());
    Ok(())
}

fn cmd_prior(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    init_run_dir(&cfg, &args.out)?;
    let hash = cfg.stage_hash(Stage::Prior);
    let flops = FlopsTable::dense(&cfg.space);
    let log =
        read_loss_log(&args.out.join(files::LOSS_LOG), &cfg.stage_hash(Stage::Train)).context("run `train` first")?;
    let table = build_error_table(&log, cfg.prior_top_m, &cfg.space)?;
    let sol = solve_distribution(&table, &cfg.space, &flops, cfg.budget, &cfg.solver)?;
    let mut rng = substream(cfg.evo.seed, "population");
    let pop = sample_population(
        &sol.distribution,
        &cfg.space,
        &flops,
        cfg.budget,
        cfg.evo.population_size,
        &mut rng,
    )?;
    write_artifact(&args.out.join(files::PRIOR), &hash, &sol)?;
    write_artifact(&args.out.join(files::POPULATION), &hash, &pop)?;
    eprintln!(
        "prior objective {:.6}, expected FLOPs {:.0} of {}",
        sol.objective, sol.expected_flops, cfg.budget
    );
    Ok(())
}

fn load_trained(cfg: &RunConfig, out: &Path) -> Result<Trained> {
    Ok(match &cfg.oracle {
        Some(o) => Trained::Oracle(SyntheticOracle::new(&cfg.space, o.seed, o.noise)),
        None => Trained::Supernet {
            net: read_supernet(&out.join(files::SUPERNET), cfg).context("run `train` first")?,
            data: SynthDataset::generate(&cfg.data)?,
        },
    })
}

fn cmd_search(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    init_run_dir(&cfg, &args.out)?;
    let hash = cfg.hash();
    let flops = FlopsTable::dense(&cfg.space);
    let trained = load_trained(&cfg, &args.out)?;
    let init = match cfg.method {
        Method::Evo | Method::EvoPrior => {
            let path = args.out.join(files::POPULATION);
            let prior_hash = cfg.stage_hash(Stage::Prior);
            match read_artifact::<Vec<WidthVector>>(&path, &prior_hash) {
                Ok(pop) => pop,
                Err(e) => {
                    if path.exists() {
                        log::warn!("not reusing {}: {e}", path.display());
                    }
                    let log = read_loss_log(&args.out.join(files::LOSS_LOG), &cfg.stage_hash(Stage::Train))
                        .context("run `train` first")?;
                    let (prior, pop) = population_stage(&cfg, &flops, &log)?;
                    if let Some(sol) = &prior {
                        write_artifact(&args.out.join(files::PRIOR), &prior_hash, sol)?;
                    }
                    write_artifact(&path, &prior_hash, &pop)?;
                    pop
                }
            }
        }
        Method::Greedy | Method::Random => Vec::new(),
    };
    let outcome = match &trained {
        Trained::Oracle(o) => search_stage(&cfg, &flops, o, &init)?,
        Trained::Supernet { net, data } => {
            let ev = SupernetEvaluator {
                net,
                space: &cfg.space,
                flops: &flops,
                val: &data.val,
                principle: cfg.train.principle,
            };
            search_stage(&cfg, &flops, &ev, &init)?
        }
    };
    write_history(&args.out.join(files::HISTORY), &hash, &outcome.history)?;
    write_artifact(&args.out.join(files::BEST), &hash, &outcome.best)?;
    print_json(&outcome.best)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = pipeline::load_run_config(&args.out)?;
    let reports = pipeline::evaluate_widths(&args.out, &args.widths)?;
    if !args.retrain {
        return print_json(&reports);
    }
    let data = SynthDataset::generate(&cfg.data)?;
    let rows = reports
        .into_iter()
        .map(|r| {
            let retrained = retrain_from_scratch(&cfg.space, &r.width, &cfg.train, &data)?;
            Ok(serde_json::json!({ "supernet": r, "retrained": retrained }))
        })
        .collect::<Result<Vec<_>>>()?;
    print_json(&rows)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let report = run_pipeline(&cfg, &args.out)?;
    eprintln!(
        "searched {} ({} FLOPs): supernet {:.4}, retrained {:.4}",
        report.searched_width, report.flops, report.supernet_acc, report.retrained_acc
    );
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut cfg = match (&args.config, &args.space) {
        (Some(p), _) => load_json::<RunConfig>(p)?,
        (None, Some(p)) => {
            let space: SearchSpace = load_json(p)?;
            let budget = FlopsTable::dense(&space).flops(&space.max_width())?;
            RunConfig::new(space, budget, Method::default(), 0)
        }
        (None, None) => bail!("need --config or --space"),
    };
    if let Some(s) = args.seed {
        cfg.reseed(s);
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let table = if args.oracle.is_some() {
        let o = cfg.oracle.clone().unwrap_or_default();
        SyntheticOracle::new(&cfg.space, o.seed, o.noise).table()?
    } else {
        let data = SynthDataset::generate(&cfg.data)?;
        generate_benchmark(&cfg.space, &cfg.train, &data, args.seeds)?
    };
    let mut w = BufWriter::new(File::create(&args.out)?);
    table.write_jsonl(&mut w)?;
    w.flush()?;
    if let Some(csv) = &args.csv {
        let mut w = BufWriter::new(File::create(csv)?);
        table.write_csv(&mut w)?;
        w.flush()?;
    }
    print_json(&flops_correlation(&table)?)
}

fn read_table(path: &Path) -> Result<BenchmarkTable> {
    BenchmarkTable::read_jsonl(BufReader::new(File::open(path)?)).with_context(|| format!("reading {}", path.display()))
}

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let cfg = pipeline::load_run_config(&args.run)?;
    let table = read_table(&args.table)?;
    let net = read_supernet(&args.run.join(files::SUPERNET), &cfg)?;
    let data = SynthDataset::generate(&cfg.data)?;
    let flops = FlopsTable::dense(&cfg.space);
    let ev = SupernetEvaluator {
        net: &net,
        space: &cfg.space,
        flops: &flops,
        val: &data.val,
        principle: cfg.train.principle,
    };
    let (report, _) = score_supernet(&ev, &cfg.space, &table)?;
    print_json(&report)
}

fn cmd_correlate(args: &CorrelateArgs) -> Result<()> {
    match (&args.predicted, &args.truth, &args.table) {
        (Some(p), Some(t), None) => {
            let p: Vec<f64> = load_json(p)?;
            let t: Vec<f64> = load_json(t)?;
            print_json(&correlate(&p, &t)?)
        }
        (None, None, Some(table)) => print_json(&flops_correlation(&read_table(table)?)?),
        _ => bail!("give --predicted with --truth, or --table"),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let pool = pipeline::thread_pool()?;
    pool.install(|| match &cli.command {
        Command::Space(a) => cmd_space(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Train(a) => cmd_train(a),
        Command::Prior(a) => cmd_prior(a),
        Command::Search(a) => cmd_search(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Run(a) => cmd_run(a),
        Command::Bench(BenchCommand::Generate(a)) => cmd_generate(a),
        Command::Bench(BenchCommand::Score(a)) => cmd_score(a),
        Command::Bench(BenchCommand::Correlate(a)) => cmd_correlate(a),
    })
}
