//! End-to-end runs: supernet training, optional prior sampling, search,
//! retraining of the searched width, and a JSON report.
//!
//! A run is fully described by its [`RunConfig`]. The SHA-256 of the
//! config's canonical JSON is stamped into every artifact, and loaders
//! reject artifacts from a different run.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::SyntheticOracle;
use crate::error::{Error, Result};
use crate::eval::{retrain_from_scratch, EvalReport, SupernetEvaluator, WidthEvaluator};
use crate::evo::{evolve, greedy_slim, random_best, EvoConfig, HistoryRow, SearchOutcome};
use crate::net::{read_checkpoint, write_checkpoint, DataConfig, MiniNet, SynthDataset};
use crate::prior::{
    build_error_table, sample_population, solve_distribution, uniform_feasible, PriorSolution, SolverConfig,
    DEFAULT_TOP_M,
};
use crate::rng::substream;
use crate::space::{FlopsTable, SearchSpace, WidthVector};
use crate::supertrain::{train_supernet, LossEntry, LossLog, LossSide, TrainConfig};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "WIDTHSEARCH_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Evo,
    EvoPrior,
    Greedy,
    Random,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evo" => Ok(Method::Evo),
            "evo-prior" => Ok(Method::EvoPrior),
            "greedy" => Ok(Method::Greedy),
            "random" => Ok(Method::Random),
            _ => Err(Error::Parse(format!(
                "unknown method {s:?}; expected evo, evo-prior, greedy or random"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Evo => "evo",
            Method::EvoPrior => "evo-prior",
            Method::Greedy => "greedy",
            Method::Random => "random",
        })
    }
}

/// Harness-only replacement of supernet training and retraining by
/// [`SyntheticOracle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub seed: u64,
    pub noise: f64,
    /// Uniformly sampled widths in the synthesized loss log.
    pub samples: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            noise: SyntheticOracle::DEFAULT_NOISE,
            samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub space: SearchSpace,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub evo: EvoConfig,
    pub budget: u64,
    pub method: Method,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    pub prior_top_m: usize,
    pub solver: SolverConfig,
    pub random_samples: usize,
}

fn derive_seed(root: u64, name: &str) -> u64 {
    substream(root, name).next_u64()
}

impl RunConfig {
    /// A config with default training, search and solver settings, all
    /// seeds derived from `seed`.
    pub fn new(space: SearchSpace, budget: u64, method: Method, seed: u64) -> Self {
        let data = DataConfig::blobs(0, space.input_dim(), space.output_dim());
        let mut cfg = Self {
            seed,
            space,
            data,
            train: TrainConfig::default(),
            evo: EvoConfig::default(),
            budget,
            method,
            oracle: None,
            prior_top_m: DEFAULT_TOP_M,
            solver: SolverConfig::default(),
            random_samples: 20,
        };
        cfg.reseed(seed);
        cfg
    }

    /// Sets the root seed and re-derives every stage seed from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = derive_seed(seed, "data");
        self.train.seed = derive_seed(seed, "train");
        self.evo.seed = derive_seed(seed, "evo");
        self.solver.seed = derive_seed(seed, "prior");
        if let Some(o) = &mut self.oracle {
            o.seed = derive_seed(seed, "oracle");
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.evo.validate()?;
        if self.data.input_dim != self.space.input_dim() || self.data.num_classes != self.space.output_dim() {
            return Err(Error::Dimension(format!(
                "data has {} inputs and {} classes, space expects {} and {}",
                self.data.input_dim,
                self.data.num_classes,
                self.space.input_dim(),
                self.space.output_dim()
            )));
        }
        if self.prior_top_m == 0 || self.random_samples == 0 {
            return Err(Error::Parse("prior_top_m and random_samples must be positive".into()));
        }
        let minimum = FlopsTable::dense(&self.space).flops(&self.space.min_width())?;
        if self.budget < minimum {
            return Err(Error::InfeasibleBudget {
                budget: self.budget,
                minimum,
            });
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        self.stage_hash(Stage::Search)
    }

    /// Hash of the fields that determine a stage's artifacts: training
    /// artifacts depend on space, data and training settings only, the
    /// initial population additionally on budget, method and prior
    /// settings, and search artifacts on everything.
    pub fn stage_hash(&self, stage: Stage) -> String {
        hex::encode(self.stage_hash_bytes(stage))
    }

    pub fn stage_hash_bytes(&self, stage: Stage) -> [u8; 32] {
        let json = match stage {
            Stage::Train => serde_json::to_vec(&serde_json::json!({
                "space": self.space,
                "data": self.data,
                "train": self.train,
                "oracle": self.oracle,
            })),
            Stage::Prior => serde_json::to_vec(&serde_json::json!({
                "train": self.stage_hash(Stage::Train),
                "budget": self.budget,
                "method": self.method,
                "prior_top_m": self.prior_top_m,
                "solver": self.solver,
                "population_size": self.evo.population_size,
                "evo_seed": self.evo.seed,
            })),
            Stage::Search => serde_json::to_vec(self),
        }
        .expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Pipeline stages whose artifacts carry their own hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Train,
    Prior,
    Search,
}

/// Median FLOPs over all widths of an enumerable space.
pub fn median_flops(space: &SearchSpace, flops: &FlopsTable) -> Result<u64> {
    let mut all: Vec<u64> = space.enumerate().map(|c| flops.flops(&c)).collect::<Result<_>>()?;
    if all.is_empty() {
        return Err(Error::Empty("search space".into()));
    }
    all.sort_unstable();
    Ok(all[(all.len() - 1) / 2])
}

/// JSON artifact stamped with its run's config hash.
#[derive(Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config_hash: String,
    pub data: T,
}

pub fn write_artifact<T: Serialize>(path: &Path, hash: &str, data: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(
        &mut w,
        &Artifact {
            config_hash: hash.to_string(),
            data,
        },
    )?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn check_hash(path: &Path, expected: &str, found: &str) -> Result<()> {
    if found != expected {
        return Err(Error::MixedRun {
            artifact: path.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// Loads a JSON artifact, rejecting it unless it carries `hash`.
pub fn read_artifact<T: DeserializeOwned>(path: &Path, hash: &str) -> Result<T> {
    let a: Artifact<T> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    check_hash(path, hash, &a.config_hash)?;
    Ok(a.data)
}

pub fn read_loss_log(path: &Path, hash: &str) -> Result<LossLog> {
    let (log, found) = LossLog::read_jsonl(BufReader::new(File::open(path)?))?;
    check_hash(path, hash, &found)?;
    Ok(log)
}

pub fn read_supernet(path: &Path, config: &RunConfig) -> Result<MiniNet> {
    let (net, found) = read_checkpoint(BufReader::new(File::open(path)?))?;
    check_hash(path, &config.stage_hash(Stage::Train), &hex::encode(found))?;
    Ok(net)
}

/// Names of the files a run writes.
pub mod files {
    pub const RUN_CONFIG: &str = "run_config.json";
    pub const SPACE: &str = "space.json";
    pub const FLOPS: &str = "flops.json";
    pub const SUPERNET: &str = "supernet.ckpt";
    pub const LOSS_LOG: &str = "losslog.jsonl";
    pub const PRIOR: &str = "prior_dist.json";
    pub const POPULATION: &str = "population.json";
    pub const HISTORY: &str = "history.csv";
    pub const BEST: &str = "best_width.json";
    pub const REPORT: &str = "report.json";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub method: Method,
    pub searched_width: WidthVector,
    pub flops: u64,
    pub params: u64,
    pub budget: u64,
    /// Accuracy of the searched width as estimated during search.
    pub supernet_acc: f64,
    /// Accuracy after retraining from scratch (the oracle value in oracle
    /// mode).
    pub retrained_acc: f64,
    pub evaluations: usize,
    pub history: Vec<HistoryRow>,
}

/// What the training stage hands to the search stage.
pub enum Trained {
    Supernet { net: MiniNet, data: SynthDataset },
    Oracle(SyntheticOracle),
}

impl Trained {
    fn with_evaluator<T>(
        &self,
        config: &RunConfig,
        flops: &FlopsTable,
        f: impl FnOnce(&dyn WidthEvaluator) -> Result<T>,
    ) -> Result<T> {
        match self {
            Trained::Oracle(o) => f(o),
            Trained::Supernet { net, data } => f(&SupernetEvaluator {
                net,
                space: &config.space,
                flops,
                val: &data.val,
                principle: config.train.principle,
            }),
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Trains the supernet (or synthesizes the oracle's loss log).
pub fn train_stage(config: &RunConfig) -> Result<(Trained, LossLog)> {
    if let Some(o) = &config.oracle {
        let oracle = SyntheticOracle::new(&config.space, o.seed, o.noise);
        let mut rng = substream(config.train.seed, "widths");
        let mut log = LossLog::new(o.samples.max(1));
        for step in 0..o.samples as u64 {
            let c = config.space.sample_uniform(&mut rng);
            log.push(LossEntry {
                loss: oracle.loss(&c)?,
                width: c,
                side: LossSide::Both,
                step,
            });
        }
        return Ok((Trained::Oracle(oracle), log));
    }
    let data = SynthDataset::generate(&config.data)?;
    let net = MiniNet::supernet(
        &config.space,
        config.train.principle,
        config.train.normalize,
        &mut substream(config.train.seed, "init"),
    )?;
    let out = train_supernet(&config.space, net, &config.train, &data.train)?;
    info!(
        "supernet trained: {} batches, final epoch loss {:.4}",
        out.stats.batches, out.stats.final_epoch_loss
    );
    Ok((Trained::Supernet { net: out.net, data }, out.log))
}

/// Initial population: from the solved prior for `evo-prior`, uniform
/// feasible otherwise.
pub fn population_stage(
    config: &RunConfig,
    flops: &FlopsTable,
    log: &LossLog,
) -> Result<(Option<PriorSolution>, Vec<WidthVector>)> {
    let mut rng = substream(config.evo.seed, "population");
    let size = config.evo.population_size;
    if config.method == Method::EvoPrior {
        let table = build_error_table(log, config.prior_top_m, &config.space)?;
        let sol = solve_distribution(&table, &config.space, flops, config.budget, &config.solver)?;
        let pop = sample_population(&sol.distribution, &config.space, flops, config.budget, size, &mut rng)?;
        Ok((Some(sol), pop))
    } else {
        let pop = uniform_feasible(&config.space, flops, config.budget, size, &Default::default(), &mut rng)?;
        Ok((None, pop))
    }
}

pub fn search_stage(
    config: &RunConfig,
    flops: &FlopsTable,
    evaluator: &dyn WidthEvaluator,
    init: &[WidthVector],
) -> Result<SearchOutcome> {
    let mut rng = substream(config.evo.seed, "search");
    match config.method {
        Method::Evo | Method::EvoPrior => evolve(
            evaluator,
            &config.space,
            flops,
            config.budget,
            &config.evo,
            init,
            &mut rng,
        ),
        Method::Random => random_best(
            evaluator,
            &config.space,
            flops,
            config.budget,
            config.random_samples,
            &mut rng,
        ),
        Method::Greedy => {
            let g = greedy_slim(evaluator, &config.space, flops, config.budget)?;
            let history = g
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| HistoryRow {
                    iteration: i,
                    best_fitness: s.acc_mean,
                    mean_fitness: s.acc_mean,
                    best_width: s.width.clone(),
                    best_flops: s.flops,
                })
                .collect();
            Ok(SearchOutcome {
                evaluations: g.steps.len(),
                best: g.best,
                history,
            })
        }
    }
}

/// Retrained accuracy of the searched width.
pub fn retrain_stage(config: &RunConfig, trained: &Trained, width: &WidthVector) -> Result<f64> {
    match trained {
        Trained::Oracle(o) => o.fitness(width),
        Trained::Supernet { data, .. } => Ok(retrain_from_scratch(&config.space, width, &config.train, data)?.accuracy),
    }
}

pub fn write_history(path: &Path, hash: &str, history: &[HistoryRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "iteration,best_fitness,mean_fitness,best_width,best_flops")?;
    for h in history {
        writeln!(
            w,
            "{},{},{},\"{}\",{}",
            h.iteration, h.best_fitness, h.mean_fitness, h.best_width, h.best_flops
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Rayon pool sized by `WIDTHSEARCH_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Parse(format!("thread pool: {e}")))
}

/// Prepares `out` for the run: creates it and refuses a directory whose
/// stored config trained under different settings.
pub fn init_run_dir(config: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let hash = config.hash();
    let existing = out.join(files::RUN_CONFIG);
    if existing.exists() {
        let previous = load_run_config(out)?;
        check_hash(
            &existing,
            &config.stage_hash(Stage::Train),
            &previous.stage_hash(Stage::Train),
        )?;
    }
    let flops = FlopsTable::dense(&config.space);
    write_artifact(&existing, &hash, config)?;
    write_artifact(&out.join(files::SPACE), &hash, &config.space)?;
    write_artifact(&out.join(files::FLOPS), &hash, &flops)?;
    Ok(())
}

/// Loads the config stored in a run directory.
pub fn load_run_config(out: &Path) -> Result<RunConfig> {
    let path = out.join(files::RUN_CONFIG);
    let a: Artifact<RunConfig> = serde_json::from_reader(BufReader::new(File::open(&path)?))?;
    check_hash(&path, &a.data.hash(), &a.config_hash)?;
    Ok(a.data)
}

/// Runs every stage, writing artifacts into `out` as they are produced.
/// A failing stage aborts the run with its name; earlier artifacts stay.
pub fn run_pipeline(config: &RunConfig, out: &Path) -> Result<RunReport> {
    let pool = thread_pool()?;
    pool.install(|| run_stages(config, out))
}

fn run_stages(config: &RunConfig, out: &Path) -> Result<RunReport> {
    stage("config", config.validate())?;
    stage("config", init_run_dir(config, out))?;
    let hash = config.hash();
    let flops = FlopsTable::dense(&config.space);
    let p = |name: &str| -> PathBuf { out.join(name) };

    let (trained, log) = stage("train", train_stage(config))?;
    stage(
        "train",
        (|| {
            if let Trained::Supernet { net, .. } = &trained {
                let mut w = BufWriter::new(File::create(p(files::SUPERNET))?);
                write_checkpoint(net, config.stage_hash_bytes(Stage::Train), &mut w)?;
                w.flush()?;
            }
            let mut w = BufWriter::new(File::create(p(files::LOSS_LOG))?);
            log.write_jsonl(&mut w, &config.stage_hash(Stage::Train))?;
            w.flush()?;
            Ok(())
        })(),
    )?;

    let init = match config.method {
        Method::Evo | Method::EvoPrior => {
            let (prior, pop) = stage("prior", population_stage(config, &flops, &log))?;
            stage(
                "prior",
                (|| {
                    let prior_hash = config.stage_hash(Stage::Prior);
                    if let Some(sol) = &prior {
                        write_artifact(&p(files::PRIOR), &prior_hash, sol)?;
                    }
                    write_artifact(&p(files::POPULATION), &prior_hash, &pop)
                })(),
            )?;
            pop
        }
        Method::Greedy | Method::Random => Vec::new(),
    };

    let outcome = stage(
        "search",
        trained.with_evaluator(config, &flops, |ev| search_stage(config, &flops, ev, &init)),
    )?;
    stage(
        "search",
        (|| {
            write_history(&p(files::HISTORY), &hash, &outcome.history)?;
            write_artifact(&p(files::BEST), &hash, &outcome.best)
        })(),
    )?;

    let retrained_acc = stage("retrain", retrain_stage(config, &trained, &outcome.best.width))?;
    let report = RunReport {
        config_hash: hash.clone(),
        method: config.method,
        searched_width: outcome.best.width.clone(),
        flops: outcome.best.flops,
        params: config.space.params(&outcome.best.width),
        budget: config.budget,
        supernet_acc: outcome.best.acc_mean,
        retrained_acc,
        evaluations: outcome.evaluations,
        history: outcome.history,
    };
    stage("report", write_report(&p(files::REPORT), &report))?;
    Ok(report)
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Evaluation reports of `widths` on the trained supernet of a run dir.
pub fn evaluate_widths(out: &Path, widths: &[WidthVector]) -> Result<Vec<EvalReport>> {
    let config = load_run_config(out)?;
    let net = read_supernet(&out.join(files::SUPERNET), &config)?;
    let data = SynthDataset::generate(&config.data)?;
    let flops = FlopsTable::dense(&config.space);
    SupernetEvaluator {
        net: &net,
        space: &config.space,
        flops: &flops,
        val: &data.val,
        principle: config.train.principle,
    }
    .evaluate_all(widths)
}
