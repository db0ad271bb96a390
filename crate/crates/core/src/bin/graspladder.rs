use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use graspladder::dataset::{self, read_dataset};
use graspladder::experiments::{self, Experiment, ExperimentConfig, PolicySpec};
use graspladder::imitation::{self, BCConfig, ObsMode};
use graspladder::metrics;
use graspladder::placement::{self, Phase, Regime};
use graspladder::plots;
use graspladder::policies::{OraclePolicy, Policy};
use graspladder::ppo::{self, PPOConfig, PpoPolicy};
use graspladder::recorder::{self, Backoff, RecordingPlan, ServeConfig};
use graspladder::rng;
use graspladder::rollout::EvalProtocol;
use graspladder::{EnvConfig, TaskConfig};

/// Tabletop grasping benchmark: data generation, training, evaluation and reports.
#[derive(Parser)]
#[command(name = "graspladder", version)]
struct Cli {
    /// Environment config (JSON); built-in defaults otherwise.
    #[arg(long, global = true)]
    env: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Record a success-filtered demonstration dataset.
    GenData(GenData),
    /// Train a PPO expert.
    TrainRl(TrainRl),
    /// Train a behavior-cloning policy on a dataset.
    TrainBc(TrainBc),
    /// Sweep chunk size, execution horizon and batch size for behavior cloning.
    GridSearch(GridSearch),
    /// Run an experiment and write outcome logs, reports and a manifest.
    Eval(Eval),
    /// Stream expert episodes to recording clients.
    Serve(Serve),
    /// Record episodes streamed by a server.
    Record(Record),
    /// Reports and figures from earlier runs.
    Report {
        #[command(subcommand)]
        what: ReportCmd,
    },
}

#[derive(Args, Clone)]
struct TaskArgs {
    #[arg(long, default_value = "small_jitter")]
    regime: Regime,
    #[arg(long, default_value_t = 5)]
    objects: usize,
    /// Use the compositional split drawn from this seed (small jitter, 5 objects).
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, default_value = "train")]
    phase: PhaseArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Train,
    Eval,
}

impl TaskArgs {
    fn task(&self) -> TaskConfig {
        match self.split_seed {
            Some(seed) => {
                let phase = match self.phase {
                    PhaseArg::Train => Phase::Train,
                    PhaseArg::Eval => Phase::Eval,
                };
                TaskConfig::compositional(placement::make_pairing_split(seed), phase)
            }
            None => TaskConfig::new(self.regime).with_objects(self.objects),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Via {
    InProcess,
    Network,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    count: u64,
    #[arg(long, env = "GRASPLADDER_OUT")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "in-process")]
    via: Via,
    /// `oracle` or `ppo:<checkpoint dir>`.
    #[arg(long, default_value = "oracle")]
    expert: String,
}

#[derive(Args)]
struct TrainRl {
    #[command(flatten)]
    task: TaskArgs,
    /// PPO config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    timesteps: Option<u64>,
    #[arg(long)]
    num_envs: Option<usize>,
    #[arg(long)]
    stop_at: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Full-scale training budget instead of the desktop one.
    #[arg(long)]
    full: bool,
    #[arg(long, env = "GRASPLADDER_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct BcArgs {
    /// BC config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    obs: Option<ObsMode>,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl BcArgs {
    fn config(&self) -> anyhow::Result<BCConfig> {
        let mut c: BCConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => BCConfig::default(),
        };
        if let Some(v) = self.obs {
            c.obs_mode = v;
        }
        if let Some(v) = self.chunk {
            c.chunk_size = v;
        }
        if let Some(v) = self.horizon {
            c.execution_horizon = v;
        }
        if let Some(v) = self.batch {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainBc {
    #[arg(long)]
    data: PathBuf,
    /// Use only the first N episodes.
    #[arg(long)]
    episodes: Option<u64>,
    #[command(flatten)]
    bc: BcArgs,
    /// Evaluate the trained policy on this many episodes of the dataset's task.
    #[arg(long, default_value_t = 100)]
    eval_episodes: u64,
    #[arg(long, env = "GRASPLADDER_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct GridSearch {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    episodes: Option<u64>,
    #[command(flatten)]
    bc: BcArgs,
    #[arg(long, default_value_t = 100)]
    eval_episodes: u64,
    #[arg(long, default_value_t = 1)]
    eval_seed: u64,
    #[arg(long, env = "GRASPLADDER_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    /// Experiment config or a previous run's manifest.json; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    experiment: Option<Experiment>,
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<Regime>>,
    /// Comma-separated: oracle, shortcut, nearest, random, bc-blind, bc-grounded, ppo:DIR, bc:DIR.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<PolicySpec>>,
    #[arg(long)]
    demos: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    object_counts: Option<Vec<usize>>,
    #[arg(long)]
    eval_episodes: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Fail instead of recording missing datasets.
    #[arg(long)]
    no_auto_generate: bool,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Exit nonzero if any report invariant is violated.
    #[arg(long)]
    self_check: bool,
    #[arg(long, env = "GRASPLADDER_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct Serve {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Stop after serving this many episodes in total.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "oracle")]
    expert: String,
}

#[derive(Args)]
struct Record {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    connect: String,
    #[arg(long)]
    count: u64,
    #[arg(long, env = "GRASPLADDER_OUT")]
    out: PathBuf,
    /// Give up after this many consecutive failed connections (0 = never).
    #[arg(long, default_value_t = 20)]
    max_retries: u32,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Placement scatter plots per regime.
    Figures {
        #[arg(long, value_delimiter = ',', default_value = "small_jitter,medium_jitter,large_jitter,full_random")]
        regime: Vec<Regime>,
        #[arg(long, default_value_t = 500)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "GRASPLADDER_OUT")]
        out: PathBuf,
    },
    /// Rebuild the text/CSV report and bar charts from a run's outcome log.
    Outcomes {
        /// Run directory holding outcomes.ndjson.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        experiment: Option<Experiment>,
        #[arg(long)]
        self_check: bool,
    },
    /// Dataset statistics.
    Dataset {
        #[arg(long)]
        data: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
}

fn expert(spec: &str, env: &EnvConfig) -> anyhow::Result<Box<dyn Fn() -> Box<dyn Policy> + Send + Sync>> {
    if spec == "oracle" {
        let ws = env.workspace.clone();
        return Ok(Box::new(move || Box::new(OraclePolicy::new(&ws)) as Box<dyn Policy>));
    }
    if let Some(dir) = spec.strip_prefix("ppo:") {
        let p = PpoPolicy::load(Path::new(dir), &env.hash())?;
        return Ok(Box::new(move || Box::new(p.clone()) as Box<dyn Policy>));
    }
    bail!("unknown expert {spec:?} (oracle or ppo:DIR)")
}

fn dataset_task(data: &Path) -> anyhow::Result<TaskConfig> {
    Ok(dataset::read_meta(data).with_context(|| format!("reading dataset {}", data.display()))?.task_config)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let env = match &cli.env {
        Some(p) => EnvConfig::load(p)?,
        None => EnvConfig::default(),
    };
    env.validate()?;
    let hash = env.hash();
    match cli.cmd {
        Cmd::GenData(a) => {
            let task = a.task.task();
            let plan = RecordingPlan { env: env.clone(), task: task.clone(), base_seed: a.seed };
            let make = expert(&a.expert, &env)?;
            let stored = match a.via {
                Via::InProcess => recorder::record_in_process(&plan, &a.out, a.count, &mut make())?,
                Via::Network => {
                    let listener = TcpListener::bind("127.0.0.1:0")?;
                    let addr = listener.local_addr()?;
                    let cfg = ServeConfig { plan, budget: None };
                    thread::spawn(move || recorder::serve(listener, &cfg, make));
                    recorder::client_record(addr, &a.out, &env, &task, a.count, &Backoff::default())?
                }
            };
            let ds = read_dataset(&a.out, Some(&hash), None)?;
            println!("stored {stored} episodes in {}", a.out.display());
            println!("{}", ds.stats());
        }
        Cmd::TrainRl(a) => {
            let mut cfg: PPOConfig = match &a.config {
                Some(p) => read_json(p)?,
                None if a.full => PPOConfig::default(),
                None => PPOConfig::desk(),
            };
            if let Some(v) = a.timesteps {
                cfg.total_timesteps = v;
            }
            if let Some(v) = a.num_envs {
                cfg.num_envs = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if a.stop_at.is_some() {
                cfg.stop_at_success = a.stop_at;
            }
            let task = a.task.task();
            let result = ppo::train(&env, &task, &cfg)?;
            std::fs::create_dir_all(&a.out)?;
            result.policy().save(&a.out, &hash, &cfg)?;
            std::fs::write(a.out.join("curve.csv"), ppo::curve_csv(&result.curve))?;
            println!(
                "trained {} steps, final eval success {}; checkpoint in {}",
                result.timesteps,
                result.final_eval_success().map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into()),
                a.out.display()
            );
        }
        Cmd::TrainBc(a) => {
            let cfg = a.bc.config()?;
            let ds = read_dataset(&a.data, Some(&hash), a.episodes)?;
            let set = imitation::build_training_set(&env, &ds.demos()?, cfg.obs_mode, cfg.chunk_size)?;
            let model = imitation::bc_train(&cfg, &set)?;
            model.save(&a.out, &hash)?;
            let task = ds.meta.task_config.clone();
            let mut proto = EvalProtocol::new(env.clone(), task, rng::derive_seed(cfg.seed, 0xE7A1), a.eval_episodes);
            proto.dataset_size = Some(ds.episodes.len() as u64);
            let outcomes = proto.evaluate(&mut model.policy())?;
            let reports = metrics::aggregate(&outcomes);
            let rows: Vec<(String, &metrics::MetricsReport)> =
                reports.iter().map(|r| (r.key.regime.to_string(), r)).collect();
            print!("{}", metrics::text_table(&format!("bc ({})", cfg.obs_mode), "regime", &rows));
            println!("checkpoint in {}", a.out.display());
        }
        Cmd::GridSearch(a) => {
            let base = a.bc.config()?;
            let ds = read_dataset(&a.data, Some(&hash), a.episodes)?;
            let task = dataset_task(&a.data)?;
            let proto = EvalProtocol::new(env.clone(), task, rng::derive_seed(a.eval_seed, 0x6E1D), a.eval_episodes);
            let result = imitation::grid_search(&env, &ds.demos()?, &BCConfig::grid(&base), &proto)?;
            std::fs::create_dir_all(&a.out)?;
            std::fs::write(a.out.join("grid.csv"), result.csv())?;
            result.best_model.save(&a.out.join("best"), &hash)?;
            print!("{}", result.csv());
            let b = result.best_config();
            println!("best: chunk {} horizon {} batch {}", b.chunk_size, b.execution_horizon, b.batch_size);
        }
        Cmd::Eval(a) => {
            let mut cfg = match &a.config {
                Some(p) => experiments::load_config(p)?,
                None => ExperimentConfig::default(),
            };
            if cli.env.is_some() {
                cfg.env = env.clone();
            }
            if let Some(v) = a.experiment {
                cfg.experiment = v;
            }
            if let Some(v) = a.regimes {
                cfg.regimes = v;
            }
            if let Some(v) = a.policies {
                cfg.policies = v;
            }
            if let Some(v) = a.demos {
                cfg.demos = v;
            }
            if let Some(v) = a.object_counts {
                cfg.object_counts = v;
            }
            if let Some(v) = a.eval_episodes {
                cfg.eval_episodes = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(v) = a.workers {
                cfg.workers = v;
            }
            if let Some(v) = a.data_dir {
                cfg.data_dir = Some(v);
            }
            if a.no_auto_generate {
                cfg.auto_generate = false;
            }
            if let Some(s) = a.split_seed {
                cfg.split = Some(placement::make_pairing_split(s));
            }
            let result = experiments::run_experiment(&cfg, &a.out)?;
            plots::report_bars(&result.reports, &a.out.join("figures"))?;
            print!("{}", result.text);
            if a.self_check {
                return Ok(check(&result.outcomes, &result.reports));
            }
        }
        Cmd::Serve(a) => {
            let listener = TcpListener::bind(&a.listen).with_context(|| format!("binding {}", a.listen))?;
            log::info!("listening on {}", listener.local_addr()?);
            let cfg = ServeConfig {
                plan: RecordingPlan { env: env.clone(), task: a.task.task(), base_seed: a.seed },
                budget: a.budget,
            };
            let served = recorder::serve(listener, &cfg, expert(&a.expert, &env)?)?;
            println!("served {served} episodes");
        }
        Cmd::Record(a) => {
            let backoff = Backoff { max_attempts: (a.max_retries > 0).then_some(a.max_retries), ..Backoff::default() };
            let stored = recorder::client_record(a.connect.as_str(), &a.out, &env, &a.task.task(), a.count, &backoff)?;
            println!("dataset holds {stored} episodes");
        }
        Cmd::Report { what } => match what {
            ReportCmd::Figures { regime, n, seed, out } => {
                if n == 0 {
                    bail!("--n must be at least 1");
                }
                for r in regime {
                    let s = plots::scatter_export(&env, r, n, seed, &out)?;
                    println!("{}: {} points -> {}", r, s.points.len(), out.display());
                }
            }
            ReportCmd::Outcomes { input, experiment, self_check } => {
                let f = std::fs::File::open(input.join("outcomes.ndjson"))?;
                let outcomes = metrics::read_outcomes(std::io::BufReader::new(f))?;
                let experiment = match experiment {
                    Some(e) => e,
                    None => experiments::load_config(&input.join("manifest.json")).map(|c| c.experiment)?,
                };
                let reports = metrics::aggregate(&outcomes);
                let text = experiments::render(experiment, &reports);
                std::fs::write(input.join("report.csv"), metrics::reports_csv(&reports))?;
                std::fs::write(input.join("report.txt"), &text)?;
                plots::report_bars(&reports, &input.join("figures"))?;
                print!("{text}");
                if self_check {
                    return Ok(check(&outcomes, &reports));
                }
            }
            ReportCmd::Dataset { data } => {
                let ds = read_dataset(&data, None, None)?;
                println!("{}", ds.stats());
            }
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn check(outcomes: &[metrics::EpisodeOutcome], reports: &[metrics::MetricsReport]) -> ExitCode {
    let problems = experiments::self_check(outcomes, reports);
    if problems.is_empty() {
        println!("self-check: ok");
        ExitCode::SUCCESS
    } else {
        for p in &problems {
            eprintln!("self-check: {p}");
        }
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
