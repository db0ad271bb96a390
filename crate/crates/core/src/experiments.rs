//! Experiment runner: the ladder, compositional, data-scale and object-count
//! studies, with persisted outcomes, reports and a manifest.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::config::EnvConfig;
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::imitation::{self, BCConfig, BcModel, ObsMode};
use crate::metrics::{self, EpisodeOutcome, MetricsReport};
use crate::placement::{self, PairingSplit, Phase, Regime};
use crate::policies::{NearestPolicy, OraclePolicy, Policy, RandomPolicy, ShortcutPolicy};
use crate::ppo::PpoPolicy;
use crate::recorder::{self, RecordingPlan};
use crate::rng;
use crate::rollout::EvalProtocol;
use crate::task::TaskConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Ladder,
    Compositional,
    Scale,
    ObjectCount,
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ladder" => Ok(Experiment::Ladder),
            "compositional" => Ok(Experiment::Compositional),
            "scale" => Ok(Experiment::Scale),
            "object-count" | "object_count" => Ok(Experiment::ObjectCount),
            _ => Err(Error::InvalidConfig(format!("unknown experiment {s:?}"))),
        }
    }
}

/// A policy to evaluate: scripted, loaded from a checkpoint, or behavior
/// cloning trained on demand from oracle demonstrations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicySpec {
    Oracle,
    Shortcut,
    Nearest,
    Random,
    Ppo(PathBuf),
    BcCheckpoint(PathBuf),
    BcTrain(ObsMode),
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Oracle => f.write_str("oracle"),
            PolicySpec::Shortcut => f.write_str("shortcut"),
            PolicySpec::Nearest => f.write_str("nearest"),
            PolicySpec::Random => f.write_str("random"),
            PolicySpec::Ppo(p) => write!(f, "ppo:{}", p.display()),
            PolicySpec::BcCheckpoint(p) => write!(f, "bc:{}", p.display()),
            PolicySpec::BcTrain(ObsMode::IdentityBlind) => f.write_str("bc-blind"),
            PolicySpec::BcTrain(ObsMode::Grounded) => f.write_str("bc-grounded"),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("ppo:") {
            return Ok(PolicySpec::Ppo(p.into()));
        }
        if let Some(p) = s.strip_prefix("bc:") {
            return Ok(PolicySpec::BcCheckpoint(p.into()));
        }
        match s {
            "oracle" => Ok(PolicySpec::Oracle),
            "shortcut" => Ok(PolicySpec::Shortcut),
            "nearest" => Ok(PolicySpec::Nearest),
            "random" => Ok(PolicySpec::Random),
            "bc-blind" => Ok(PolicySpec::BcTrain(ObsMode::IdentityBlind)),
            "bc-grounded" => Ok(PolicySpec::BcTrain(ObsMode::Grounded)),
            _ => Err(Error::InvalidConfig(format!(
                "unknown policy {s:?} (oracle, shortcut, nearest, random, bc-blind, bc-grounded, ppo:DIR, bc:DIR)"
            ))),
        }
    }
}

impl Serialize for PolicySpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PolicySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Before/after dataset sizes for one regime of the scale study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleStep {
    pub regime: Regime,
    pub before: u64,
    pub after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub regimes: Vec<Regime>,
    pub policies: Vec<PolicySpec>,
    /// Demonstrations used when a policy is trained on demand.
    pub demos: u64,
    pub scale_steps: Vec<ScaleStep>,
    pub object_counts: Vec<usize>,
    pub eval_episodes: u64,
    pub seed: u64,
    pub workers: usize,
    pub bc: BCConfig,
    /// Compositional split; a shuffled circulant split from `seed` if absent.
    pub split: Option<PairingSplit>,
    /// Where datasets are looked up and, with `auto_generate`, recorded.
    pub data_dir: Option<PathBuf>,
    pub auto_generate: bool,
    pub env: EnvConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Ladder,
            regimes: Regime::LADDER.to_vec(),
            policies: vec![PolicySpec::Oracle, PolicySpec::Shortcut, PolicySpec::Nearest, PolicySpec::Random],
            demos: 1000,
            scale_steps: vec![
                ScaleStep { regime: Regime::SmallJitter, before: 50, after: 100 },
                ScaleStep { regime: Regime::MediumJitter, before: 100, after: 500 },
                ScaleStep { regime: Regime::LargeJitter, before: 1000, after: 10_000 },
            ],
            object_counts: vec![1, 2, 3, 4, 5],
            eval_episodes: 100,
            seed: 0,
            workers: 1,
            bc: BCConfig::default(),
            split: None,
            data_dir: None,
            auto_generate: true,
            env: EnvConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub env_config_hash: String,
    pub eval_seeds: Vec<EvalSeed>,
    pub datasets: Vec<PathBuf>,
    pub outcome_log: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSeed {
    pub label: String,
    pub base_seed: u64,
    pub episodes: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub outcomes: Vec<EpisodeOutcome>,
    pub reports: Vec<MetricsReport>,
    pub text: String,
    pub csv: String,
    pub manifest: Manifest,
}

const EVAL_STREAM: u64 = 0xE7A1_0000;
const DATA_STREAM: u64 = 0xDA7A_0000;

type Factory = Arc<dyn Fn() -> Box<dyn Policy> + Send + Sync>;

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    datasets: Vec<PathBuf>,
    eval_seeds: Vec<EvalSeed>,
}

fn task_slug(task: &TaskConfig) -> String {
    let mut s = format!("{}-k{}", task.regime, task.object_count);
    if let Some(c) = &task.compositional {
        s.push_str(&format!("-compositional{}-{}", c.split.seed, c.phase.name()));
    }
    s
}

impl<'a> Runner<'a> {
    fn env(&self) -> &EnvConfig {
        &self.cfg.env
    }

    fn data_root(&self) -> PathBuf {
        self.cfg.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    /// Oracle demonstrations for `task`, recorded if needed and allowed.
    fn demos(&mut self, task: &TaskConfig, size: u64) -> Result<Dataset> {
        let dir = self.data_root().join(task_slug(task));
        let have = dataset::read_meta(&dir).map(|m| m.total_episodes).unwrap_or(0);
        if have < size {
            if !self.cfg.auto_generate {
                return Err(Error::InvalidConfig(format!(
                    "dataset {} has {have} of {size} episodes; run `graspladder gen-data --regime {} --objects {} --count {size} --out {}`",
                    dir.display(),
                    task.regime,
                    task.object_count,
                    dir.display()
                )));
            }
            let plan = RecordingPlan {
                env: self.env().clone(),
                task: task.clone(),
                base_seed: rng::derive_seed(self.cfg.seed, DATA_STREAM),
            };
            log::info!("recording {size} oracle demonstrations into {}", dir.display());
            recorder::record_in_process(&plan, &dir, size, &mut OraclePolicy::new(&self.env().workspace))?;
        }
        if !self.datasets.contains(&dir) {
            self.datasets.push(dir.clone());
        }
        dataset::read_dataset(&dir, Some(&self.env().hash()), Some(size))
    }

    fn train_bc(&mut self, mode: ObsMode, task: &TaskConfig, size: u64) -> Result<BcModel> {
        let data = self.demos(task, size)?;
        let demos = data.demos()?;
        let cfg = BCConfig { obs_mode: mode, ..self.cfg.bc.clone() };
        let set = imitation::build_training_set(self.env(), &demos, mode, cfg.chunk_size)?;
        let model = imitation::bc_train(&cfg, &set)?;
        let ckpt = self.out.join("checkpoints").join(format!("bc-{}-{}-n{size}", mode, task_slug(task)));
        model.save(&ckpt, &self.env().hash())?;
        Ok(model)
    }

    /// Builds a policy factory for `spec`, training on `train_task` if needed.
    fn factory(&mut self, spec: &PolicySpec, train_task: &TaskConfig, size: u64) -> Result<(String, Factory)> {
        let ws = self.env().workspace.clone();
        let env = self.env().clone();
        let hash = env.hash();
        Ok(match spec {
            PolicySpec::Oracle => ("oracle".into(), Arc::new(move || Box::new(OraclePolicy::new(&ws)) as Box<dyn Policy>)),
            PolicySpec::Nearest => ("nearest".into(), Arc::new(move || Box::new(NearestPolicy::new(&ws)) as Box<dyn Policy>)),
            PolicySpec::Random => ("random".into(), Arc::new(move || Box::new(RandomPolicy::new(&ws)) as Box<dyn Policy>)),
            PolicySpec::Shortcut => {
                let split = train_task.compositional.as_ref().map(|c| c.split.clone());
                let make: Factory = Arc::new(move || {
                    Box::new(match &split {
                        Some(s) => ShortcutPolicy::from_split(&env.workspace, s),
                        None => ShortcutPolicy::canonical(&env),
                    }) as Box<dyn Policy>
                });
                ("shortcut".into(), make)
            }
            PolicySpec::Ppo(dir) => {
                let p = PpoPolicy::load(dir, &hash)?;
                ("ppo".into(), Arc::new(move || Box::new(p.clone()) as Box<dyn Policy>))
            }
            PolicySpec::BcCheckpoint(dir) => {
                let m = BcModel::load(dir, &hash)?;
                let name = m.policy().name();
                (name, Arc::new(move || Box::new(m.policy()) as Box<dyn Policy>))
            }
            PolicySpec::BcTrain(mode) => {
                let m = self.train_bc(*mode, train_task, size)?;
                let name = m.policy().name();
                (name, Arc::new(move || Box::new(m.policy()) as Box<dyn Policy>))
            }
        })
    }

    fn evaluate(
        &mut self,
        label: &str,
        factory: &Factory,
        task: &TaskConfig,
        dataset_size: Option<u64>,
    ) -> Result<Vec<EpisodeOutcome>> {
        // episodes depend only on the task, so policies are compared on identical scenes
        let base = rng::derive_seed(self.cfg.seed, EVAL_STREAM ^ fnv(&task_slug(task)));
        let mut proto = EvalProtocol::new(self.env().clone(), task.clone(), base, self.cfg.eval_episodes);
        proto.workers = self.cfg.workers;
        proto.dataset_size = dataset_size;
        let seed = EvalSeed { label: format!("{label} {}", task_slug(task)), base_seed: base, episodes: proto.episodes };
        if !self.eval_seeds.contains(&seed) {
            self.eval_seeds.push(seed);
        }
        let f = factory.clone();
        let mut outcomes = proto.evaluate_parallel(move || f())?;
        // name rows after the spec even when the policy reports a generic name
        for o in &mut outcomes {
            o.key.policy = label.to_string();
        }
        Ok(outcomes)
    }

    fn needs_data(spec: &PolicySpec) -> bool {
        matches!(spec, PolicySpec::BcTrain(_))
    }

    fn ladder(&mut self) -> Result<Vec<EpisodeOutcome>> {
        let mut out = Vec::new();
        for &regime in &self.cfg.regimes {
            let task = TaskConfig::new(regime);
            for spec in &self.cfg.policies {
                let size = self.cfg.demos;
                let (name, f) = self.factory(spec, &task, size)?;
                let ds = Self::needs_data(spec).then_some(size);
                out.extend(self.evaluate(&name, &f, &task, ds)?);
            }
        }
        Ok(out)
    }

    fn compositional(&mut self) -> Result<Vec<EpisodeOutcome>> {
        let split = self.cfg.split.clone().unwrap_or_else(|| placement::make_pairing_split(self.cfg.seed));
        let train = TaskConfig::compositional(split.clone(), Phase::Train);
        let eval = TaskConfig::compositional(split, Phase::Eval);
        let mut out = Vec::new();
        for spec in &self.cfg.policies {
            let size = self.cfg.demos;
            let (name, f) = self.factory(spec, &train, size)?;
            let ds = Self::needs_data(spec).then_some(size);
            out.extend(self.evaluate(&name, &f, &train, ds)?);
            out.extend(self.evaluate(&name, &f, &eval, ds)?);
        }
        Ok(out)
    }

    fn scale(&mut self) -> Result<Vec<EpisodeOutcome>> {
        let mut out = Vec::new();
        for step in &self.cfg.scale_steps {
            let task = TaskConfig::new(step.regime);
            for spec in self.cfg.policies.iter().filter(|s| Self::needs_data(s)) {
                for size in [step.before, step.after] {
                    let (name, f) = self.factory(spec, &task, size)?;
                    out.extend(self.evaluate(&name, &f, &task, Some(size))?);
                }
            }
        }
        Ok(out)
    }

    fn object_count(&mut self) -> Result<Vec<EpisodeOutcome>> {
        let mut out = Vec::new();
        for &regime in &self.cfg.regimes {
            for &k in &self.cfg.object_counts {
                let task = TaskConfig::new(regime).with_objects(k);
                for spec in &self.cfg.policies {
                    let size = self.cfg.demos;
                    let (name, f) = self.factory(spec, &task, size)?;
                    let ds = Self::needs_data(spec).then_some(size);
                    out.extend(self.evaluate(&name, &f, &task, ds)?);
                }
            }
        }
        Ok(out)
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Runs one experiment and writes `outcomes.ndjson`, `report.csv`,
/// `report.txt` and `manifest.json` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentResult> {
    cfg.env.validate()?;
    cfg.bc.validate()?;
    fs::create_dir_all(out)?;
    let mut runner = Runner { cfg, out, datasets: Vec::new(), eval_seeds: Vec::new() };
    let outcomes = match cfg.experiment {
        Experiment::Ladder => runner.ladder()?,
        Experiment::Compositional => runner.compositional()?,
        Experiment::Scale => runner.scale()?,
        Experiment::ObjectCount => runner.object_count()?,
    };
    let reports = metrics::aggregate(&outcomes);
    let text = render(cfg.experiment, &reports);
    let csv = metrics::reports_csv(&reports);

    metrics::write_outcomes(BufWriter::new(fs::File::create(out.join("outcomes.ndjson"))?), &outcomes)?;
    fs::write(out.join("report.csv"), &csv)?;
    fs::write(out.join("report.txt"), &text)?;
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        env_config_hash: cfg.env.hash(),
        eval_seeds: runner.eval_seeds,
        datasets: runner.datasets,
        outcome_log: "outcomes.ndjson".into(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(ExperimentResult { outcomes, reports, text, csv, manifest })
}

/// Loads an experiment config from either a bare config file or a manifest.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let value: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
    let inner = match value.get("config") {
        Some(c) if value.get("tool_version").is_some() => c.clone(),
        _ => value,
    };
    Ok(serde_json::from_value(inner)?)
}

/// Renders the text report in the shape of the corresponding study.
pub fn render(experiment: Experiment, reports: &[MetricsReport]) -> String {
    match experiment {
        Experiment::Ladder => metrics::ladder_report(reports).text,
        Experiment::Compositional => {
            let rows: Vec<(String, &MetricsReport)> = reports
                .iter()
                .map(|r| {
                    let phase = match r.key.phase {
                        Some(Phase::Train) => "pairings (ID)",
                        Some(Phase::Eval) => "pairings (OOD)",
                        None => "-",
                    };
                    (format!("{} / {phase}", r.key.policy), r)
                })
                .collect();
            metrics::text_table("compositional hold-out", "policy / split", &rows)
        }
        Experiment::Scale => scale_table(reports),
        Experiment::ObjectCount => {
            let rows: Vec<(String, &MetricsReport)> = reports
                .iter()
                .map(|r| (format!("{} / {} / {} objects", r.key.policy, r.key.regime, r.key.object_count), r))
                .collect();
            metrics::text_table("object count", "policy / regime / count", &rows)
        }
    }
}

/// Before -> after success per regime and policy.
pub fn scale_table(reports: &[MetricsReport]) -> String {
    let mut out = String::from("data scale\nregime           policy               size (before->after)   success (before->after)   delta\n");
    let mut keys: Vec<(Regime, String)> = reports.iter().map(|r| (r.key.regime, r.key.policy.clone())).collect();
    keys.sort_by_key(|(r, p)| (r.ladder_rank(), p.clone()));
    keys.dedup();
    for (regime, policy) in keys {
        let mut rows: Vec<&MetricsReport> =
            reports.iter().filter(|r| r.key.regime == regime && r.key.policy == policy).collect();
        rows.sort_by_key(|r| r.key.dataset_size);
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            let sizes = format!("{}->{}", first.key.dataset_size.unwrap_or(0), last.key.dataset_size.unwrap_or(0));
            let rates = format!("{:.0}->{:.0}", first.success.rate * 100.0, last.success.rate * 100.0);
            out.push_str(&format!(
                "{:<16} {:<20} {:<22} {:<25} {:+.0}\n",
                regime.to_string(),
                policy,
                sizes,
                rates,
                (last.success.rate - first.success.rate) * 100.0
            ));
        }
    }
    out
}

/// Invariant violations in a finished run; empty when all hold.
pub fn self_check(outcomes: &[EpisodeOutcome], reports: &[MetricsReport]) -> Vec<String> {
    let mut problems = Vec::new();
    for r in reports {
        if !r.dominance_holds() {
            problems.push(format!(
                "{} / {}: success {} exceeds grasp-any {} or reach {}",
                r.key.regime, r.key.policy, r.success.count, r.grasp_any.count, r.reach.count
            ));
        }
    }
    let total: u64 = reports.iter().map(|r| r.n).sum();
    if total != outcomes.len() as u64 {
        problems.push(format!("reports cover {total} episodes, log holds {}", outcomes.len()));
    }
    for o in outcomes {
        if o.success && !(o.grasp_any && o.reach) {
            problems.push(format!("episode {} ({}) succeeded without grasp/reach", o.episode_index, o.key.policy));
        }
    }
    problems
}
