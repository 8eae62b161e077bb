//! Command-line workflows: training, evaluation, bound sweeps, task
//! generation and SFT data preparation.
//!
//! Every command prints one JSON summary line on stdout and writes its
//! artifacts under `--out-dir`. Artifacts depend only on the config and
//! seed; wall-clock data goes to the `run_info.json` sidecar.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bounds::{run_sweep, summarize, BoundKind, Direction, SweepConfig};
use crate::chat::{ChatClient, EndpointConfig};
use crate::curriculum::{generate_variations, select_seed_tasks, TaskPool};
use crate::datakit::{annotate_reasoning, build_sft_records, export_jsonl};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::policy::LinearSoftmaxPolicy;
use crate::replay::ReplayBuffer;
use crate::rng::{derive_seed, rng_for, stream_seed, Stream};
use crate::rollout::{collect_groups, EpisodeConfig, FeaturePolicy, Trajectory};
use crate::trainer::{load_policy, TrainConfig, Trainer};

/// Exit status for bad input (config, arguments, files).
pub const EXIT_USER: i32 = 1;
/// Exit status for runtime failures, including bound violations.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "synthex", version, about = "Synthetic-experience RL training and verification")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory [default: runs/<command>].
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads [default: available parallelism]. Results do not
    /// depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy against the configured experience backend.
    Train {
        /// Continue from a checkpoint directory (its config is used when
        /// --config is absent).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the iteration budget.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Evaluate a policy on the evaluation tasks.
    Eval {
        /// Checkpoint directory holding policy.json; untrained policy if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Randomized exact verification of the model-error and policy-improvement bounds.
    VerifyBounds(BoundsArgs),
    /// Generate task variations from feasible-yet-challenging seed tasks.
    GenTasks,
    /// Build experience-model SFT records from trajectory logs.
    PrepSft,
}

#[derive(Debug, Clone, Args)]
pub struct BoundsArgs {
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub min_states: Option<usize>,
    #[arg(long)]
    pub max_states: Option<usize>,
    #[arg(long)]
    pub min_actions: Option<usize>,
    #[arg(long)]
    pub max_actions: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub eps_p: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub eps_r: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum KindArg {
    Simulation,
    Improvement,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum DirectionArg {
    Gaussian,
    Ascent,
}

/// `gen-tasks` parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenTasksConfig {
    pub seed: u64,
    pub env: EnvConfig,
    /// Seed pool; the environment's defaults when empty and `pool` is unset.
    pub tasks: Vec<String>,
    /// Task-pool JSONL with recorded group rewards (e.g. a checkpoint's
    /// `tasks.jsonl`). When set, no rollouts are run.
    pub pool: Option<PathBuf>,
    /// Policy checkpoint used to measure task values; untrained if absent.
    pub checkpoint: Option<PathBuf>,
    pub group_size: usize,
    pub max_turns: usize,
    pub k: usize,
    /// Number of seed tasks.
    pub seeds: usize,
    pub per_seed: usize,
    pub max_depth: u32,
    pub min_observed: u64,
    pub window: usize,
}

impl Default for GenTasksConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvConfig::default(),
            tasks: Vec::new(),
            pool: None,
            checkpoint: None,
            group_size: 8,
            max_turns: 10,
            k: 3,
            seeds: 2,
            per_seed: 2,
            max_depth: 4,
            min_observed: 4,
            window: 8,
        }
    }
}

/// `prep-sft` parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepSftConfig {
    pub seed: u64,
    /// Trajectory JSONL files, read in order.
    pub trajectories: Vec<PathBuf>,
    /// Demonstration pool (buffer JSONL); the trajectories themselves when
    /// unset.
    pub buffer: Option<PathBuf>,
    /// Demonstrations per record.
    pub k: usize,
    /// Replace reasoning traces via the annotator endpoint first.
    pub annotate: bool,
    pub annotator: EndpointConfig,
    /// Annotation requests in flight.
    pub parallelism: usize,
}

impl Default for PrepSftConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trajectories: Vec::new(),
            buffer: None,
            k: 3,
            annotate: false,
            annotator: EndpointConfig::default(),
            parallelism: 4,
        }
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let workers = cli
        .common
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(p) => p,
        Err(e) => return fail(&Error::InvalidArgument(format!("cannot start {workers} workers: {e}"))),
    };
    match pool.install(|| execute(&cli, workers)) {
        Ok(summary) => {
            println!("{summary}");
            if summary.get("status").and_then(Value::as_str) == Some("violations") {
                eprintln!("{}", json!({"status": "error", "kind": "runtime", "message": "bound violations found"}));
                EXIT_RUNTIME
            } else {
                0
            }
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> i32 {
    let (kind, code) = if e.is_user_error() { ("user", EXIT_USER) } else { ("runtime", EXIT_RUNTIME) };
    eprintln!("{}", json!({"status": "error", "kind": kind, "message": e.to_string()}));
    code
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::VerifyBounds(_) => "verify-bounds",
        Command::GenTasks => "gen-tasks",
        Command::PrepSft => "prep-sft",
    }
}

/// Runs the parsed command on the current rayon pool and returns its summary.
pub fn execute(cli: &Cli, workers: usize) -> Result<Value> {
    let name = command_name(&cli.command);
    let out_dir = cli.common.out_dir.clone().unwrap_or_else(|| Path::new("runs").join(name));
    let started = SystemTime::now();
    let clock = Instant::now();
    let mut summary = match &cli.command {
        Command::Train { resume, iterations } => cmd_train(&cli.common, &out_dir, resume.as_deref(), *iterations)?,
        Command::Eval { checkpoint } => cmd_eval(&cli.common, &out_dir, checkpoint.as_deref())?,
        Command::VerifyBounds(args) => cmd_verify_bounds(&cli.common, &out_dir, args)?,
        Command::GenTasks => cmd_gen_tasks(&cli.common, &out_dir)?,
        Command::PrepSft => cmd_prep_sft(&cli.common, &out_dir)?,
    };
    let unix_ms = |t: SystemTime| t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
    write_json(
        &out_dir.join("run_info.json"),
        &json!({
            "command": name,
            "version": env!("CARGO_PKG_VERSION"),
            "workers": workers,
            "started_unix_ms": unix_ms(started),
            "finished_unix_ms": unix_ms(SystemTime::now()),
            "elapsed_secs": clock.elapsed().as_secs_f64(),
        }),
    )?;
    if let Some(m) = summary.as_object_mut() {
        let mut head = serde_json::Map::new();
        head.insert("command".into(), name.into());
        head.entry("status").or_insert_with(|| m.remove("status").unwrap_or_else(|| "ok".into()));
        head.insert("out_dir".into(), out_dir.display().to_string().into());
        head.extend(std::mem::take(m));
        summary = Value::Object(head);
    }
    Ok(summary)
}

/// Reads a TOML config; unknown keys are rejected by the target type.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn config_or_default<T: DeserializeOwned + Default>(common: &Common) -> Result<T> {
    common.config.as_deref().map_or_else(|| Ok(T::default()), load_config)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_value(v: &impl Serialize) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::json("serializing summary", e))
}

fn cmd_train(common: &Common, out_dir: &Path, resume: Option<&Path>, iterations: Option<u64>) -> Result<Value> {
    let mut config: TrainConfig = match (&common.config, resume) {
        (Some(p), _) => load_config(p)?,
        (None, Some(dir)) => {
            let state: crate::trainer::TrainerState = read_json(&dir.join("trainer_state.json"))?;
            state.config
        }
        (None, None) => return Err(Error::Config("train needs --config or --resume".into())),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(n) = iterations {
        config.iterations = n;
    }
    let mut trainer = match resume {
        Some(dir) => Trainer::from_checkpoint(config, dir)?,
        None => Trainer::new(config)?,
    };
    let report = trainer.run(out_dir)?;
    to_value(&report)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn cmd_eval(common: &Common, out_dir: &Path, checkpoint: Option<&Path>) -> Result<Value> {
    let Some(path) = &common.config else {
        return Err(Error::Config("eval needs --config".into()));
    };
    let mut config: TrainConfig = load_config(path)?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(dir) = checkpoint {
        config.init_checkpoint = Some(dir.to_path_buf());
    }
    let trainer = Trainer::new(config)?;
    let episodes = trainer.evaluation_episodes()?;
    let m = episodes.len().max(1) as f64;
    let success_rate = episodes.iter().filter(|t| t.is_success()).count() as f64 / m;
    let mean_return = episodes.iter().map(Trajectory::total_reward).sum::<f64>() / m;
    create_dir(out_dir)?;
    jsonl::write(&out_dir.join("eval_trajectories.jsonl"), &episodes)?;
    let summary = json!({
        "episodes": episodes.len(),
        "success_rate": success_rate,
        "mean_return": mean_return,
    });
    write_json(
        &out_dir.join("eval.json"),
        &json!({"config": trainer.config(), "summary": summary}),
    )?;
    Ok(summary)
}

fn sweep_config(common: &Common, args: &BoundsArgs) -> Result<SweepConfig> {
    let mut cfg: SweepConfig = config_or_default(common)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.kind {
        cfg.kind = match k {
            KindArg::Simulation => BoundKind::Simulation,
            KindArg::Improvement => BoundKind::Improvement,
        };
    }
    if let Some(d) = args.direction {
        cfg.direction = match d {
            DirectionArg::Gaussian => Direction::Gaussian,
            DirectionArg::Ascent => Direction::Ascent,
        };
    }
    macro_rules! set {
        ($($field:ident <- $arg:ident),*) => {
            $(if let Some(v) = &args.$arg { cfg.$field = v.clone(); })*
        };
    }
    set!(n_instances <- instances, min_states <- min_states, max_states <- max_states,
         min_actions <- min_actions, max_actions <- max_actions, gammas <- gammas,
         eps_p_grid <- eps_p, eps_r_grid <- eps_r, deltas <- deltas);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_verify_bounds(common: &Common, out_dir: &Path, args: &BoundsArgs) -> Result<Value> {
    let cfg = sweep_config(common, args)?;
    let reports = run_sweep(&cfg)?;
    let summary = summarize(cfg.kind, &reports);
    create_dir(out_dir)?;
    jsonl::write(&out_dir.join("bounds.jsonl"), &reports)?;
    write_json(&out_dir.join("bounds_summary.json"), &json!({"config": cfg, "summary": summary}))?;
    let mut v = to_value(&summary)?;
    if summary.violations > 0 || summary.trigger_violations > 0 {
        v["status"] = "violations".into();
    }
    Ok(v)
}

fn cmd_gen_tasks(common: &Common, out_dir: &Path) -> Result<Value> {
    let mut cfg: GenTasksConfig = config_or_default(common)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if cfg.group_size < 1 || cfg.max_turns < 1 || cfg.window < 1 {
        return Err(Error::Config("group_size, max_turns and window must be >= 1".into()));
    }
    let env = cfg.env.build()?;
    let Some(generator) = env.generator.as_deref() else {
        return Err(Error::Config("the configured backend has no task generator".into()));
    };
    let mut pool = match &cfg.pool {
        Some(p) => TaskPool::load_jsonl(p)?,
        None => {
            let tasks = if cfg.tasks.is_empty() { env.default_tasks.clone() } else { cfg.tasks.clone() };
            if tasks.is_empty() {
                return Err(Error::Config("no tasks configured".into()));
            }
            let mut pool = TaskPool::from_instructions(&tasks);
            let dim = env.features.dim();
            let policy = match &cfg.checkpoint {
                Some(dir) => load_policy(dir, &env.feature_id, dim)?,
                None => LinearSoftmaxPolicy::zeros(dim),
            };
            let agent = FeaturePolicy {
                features: env.features.as_ref(),
                policy: &policy,
            };
            let base = stream_seed(cfg.seed, Stream::Rollout, &[]);
            let seeds: Vec<u64> = (0..tasks.len() as u64).map(|g| derive_seed(base, &[g])).collect();
            let episode = EpisodeConfig {
                max_turns: cfg.max_turns,
                k: cfg.k,
                append_failed: true,
            };
            let mut buffer = ReplayBuffer::new(4096);
            let groups = collect_groups(&agent, env.model.as_ref(), &mut buffer, &tasks, cfg.group_size, &episode, &seeds)?;
            for (task, group) in tasks.iter().zip(&groups) {
                let rewards: Vec<f64> = group.iter().map(Trajectory::outcome_reward).collect();
                if let Some(r) = pool.get_mut(task) {
                    r.record_group(&rewards, 0, cfg.window)?;
                }
            }
            pool
        }
    };
    let seeds = select_seed_tasks(&pool.eligible(cfg.min_observed), cfg.seeds);
    let generated = if seeds.is_empty() {
        Vec::new()
    } else {
        generate_variations(
            &seeds,
            generator,
            cfg.per_seed,
            cfg.max_depth,
            &pool.instructions(),
            &mut rng_for(cfg.seed, Stream::Curriculum, &[]),
        )?
    };
    for r in &generated {
        pool.insert(r.clone());
    }
    create_dir(out_dir)?;
    jsonl::write(&out_dir.join("generated.jsonl"), &generated)?;
    pool.save_jsonl(&out_dir.join("tasks.jsonl"))?;
    let summary = json!({
        "tasks": pool.len(),
        "seeds": seeds.iter().map(|s| s.instruction.clone()).collect::<Vec<_>>(),
        "generated": generated.len(),
    });
    write_json(&out_dir.join("gen_tasks.json"), &json!({"config": cfg, "summary": summary}))?;
    Ok(summary)
}

fn cmd_prep_sft(common: &Common, out_dir: &Path) -> Result<Value> {
    let Some(path) = &common.config else {
        return Err(Error::Config("prep-sft needs --config".into()));
    };
    let mut cfg: PrepSftConfig = load_config(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if cfg.trajectories.is_empty() {
        return Err(Error::Config("prep-sft needs at least one trajectories file".into()));
    }
    let mut trajs: Vec<Trajectory> = Vec::new();
    for p in &cfg.trajectories {
        trajs.extend(jsonl::read::<Trajectory>(p)?);
    }
    let n_input = trajs.len();
    create_dir(out_dir)?;
    let mut n_errors = 0;
    if cfg.annotate {
        let client = ChatClient::from_config(&cfg.annotator.clone().with_env())?;
        let annotated = annotate_reasoning(&trajs, &client, cfg.parallelism)?;
        jsonl::write(&out_dir.join("annotation_errors.jsonl"), &annotated.errors)?;
        n_errors = annotated.errors.len();
        trajs = annotated.trajectories;
    }
    let buffer = match &cfg.buffer {
        Some(p) => {
            let mut b = ReplayBuffer::new(usize::MAX);
            b.load_jsonl(p)?;
            b
        }
        None => {
            let mut b = ReplayBuffer::new(usize::MAX);
            b.seed(trajs.iter().map(Trajectory::transitions));
            b
        }
    };
    let records = build_sft_records(&trajs, &buffer, cfg.k);
    export_jsonl(&out_dir.join("sft.jsonl"), &records)?;
    let summary = json!({
        "trajectories": n_input,
        "annotation_errors": n_errors,
        "records": records.len(),
    });
    write_json(&out_dir.join("prep_sft.json"), &json!({"config": cfg, "summary": summary}))?;
    Ok(summary)
}
