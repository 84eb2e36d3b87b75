//! `clipmimic`: generate demos, train from ratings, evaluate, serve the
//! rating page and produce the predictor-variant report.
//!
//! Failures print a single `error: ...` line on stderr and exit with 1
//! (2 for unusable arguments).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use clipmimic::env::{rollout, EnvParams, Trajectory};
use clipmimic::feedback::{expand_record, RandomController, SystemClock};
use clipmimic::nn::SgdConfig;
use clipmimic::orchestrator::{self, LoadedDemo, Mode, RaterKind, RunConfig, ANNOTATIONS_FILE};
use clipmimic::render::{rasterize, read_demo, write_demo, DemoVideo, Frame, Viewport};
use clipmimic::simpred::AnnotationSample;
use clipmimic::trpo::GaussianPolicy;
use clipmimic::workflows::{self, GenDemoConfig, Metric, Task};

type CliResult<T = ()> = Result<T, String>;

#[derive(Parser)]
#[command(name = "clipmimic", version, about = "Imitate a single video demonstration from similarity ratings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RaterArg {
    Oracle,
    Human,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sync,
    Async,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline agent on a hand-coded reward and save its best rollout.
    GenDemo {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 240)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        updates: usize,
        /// Also save the policy that produced the demo.
        #[arg(long)]
        policy_out: Option<PathBuf>,
    },
    /// Collect pretraining ratings and train the similarity predictor only.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Pretrain the predictor, then run RL with online ratings.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 150)]
        online: usize,
        #[arg(long, default_value_t = 60)]
        updates: usize,
        #[arg(long, value_enum, default_value = "sync")]
        mode: ModeArg,
        /// Continue the run stored in --run-dir.
        #[arg(long)]
        resume: bool,
        /// Port of the rating service (human rater only).
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Evaluate a policy (a policy directory or a run directory) against a demo.
    Eval {
        #[arg(long, required_unless_present = "random")]
        policy: Option<PathBuf>,
        /// Evaluate the uniform random controller instead of a policy.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        demo: PathBuf,
        #[arg(long)]
        metric: String,
        /// Start state of the evaluation rollout.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the rating API for a run directory.
    Serve {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Render a trajectory (JSON) or demo (.vdm) to numbered PNG files.
    ExportVideo {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all predictor variants and print the accuracy/F1 table.
    VariantsReport {
        /// Run directory whose annotation log is used (default: oracle data from --demo).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, required_unless_present = "dataset")]
        demo: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        seeds: usize,
        #[arg(long, default_value_t = 400)]
        annotations: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    demo: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "oracle")]
    rater: RaterArg,
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pretrain: usize,
    #[arg(long, default_value = "additional-layer")]
    variant: String,
    /// Predictor checkpoint directory to fine-tune instead of training from scratch.
    #[arg(long)]
    init_predictor: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RunArgs {
    fn config(&self) -> CliResult<RunConfig> {
        let demo = self.demo.clone().ok_or("--demo is required")?;
        let mut c = RunConfig::new(demo, &self.run_dir);
        c.rater = match self.rater {
            RaterArg::Oracle => RaterKind::Oracle,
            RaterArg::Human => RaterKind::Human,
        };
        c.pretrain_annotations = self.pretrain;
        c.variant = self.variant.parse().map_err(|e: clipmimic::Error| e.to_string())?;
        c.init_predictor = self.init_predictor.clone();
        c.seed = self.seed;
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::GenDemo { task, steps, out, seed, updates, policy_out } => gen_demo(&task, steps, &out, seed, updates, policy_out.as_deref()),
        Command::Pretrain { run } => {
            let mut c = run.config()?;
            c.online_annotations = 0;
            c.updates = 0;
            let state = execute(&c, false, None)?;
            println!("annotations {}", state.records.len());
            println!("predictor {}", c.run_dir.join("checkpoints").join(format!("predictor_v{}", state.predictor_version)).display());
            Ok(())
        }
        Command::Train { run, online, updates, mode, resume, port } => {
            let mut c = if resume { resumed_config(&run.run_dir)? } else { run.config()? };
            if !resume {
                c.online_annotations = online;
                c.updates = updates;
                c.mode = match mode {
                    ModeArg::Sync => Mode::Sync,
                    ModeArg::Async => Mode::Async,
                };
            }
            let state = execute(&c, resume, Some(port))?;
            println!("annotations {}", state.records.len());
            println!("updates {}", state.updates_done());
            if let Some(last) = state.metrics.last() {
                println!("last_mean_reward {:.6}", last.mean_reward);
            }
            println!("policy {}", orchestrator::latest_policy_dir(&c.run_dir).map_err(err)?.display());
            Ok(())
        }
        Command::Eval { policy, random, demo, metric, seed } => eval(policy.as_deref(), random, &demo, &metric, seed),
        Command::Serve { run_dir, port } => serve(&run_dir, port),
        Command::ExportVideo { traj, out } => export_video(&traj, &out),
        Command::VariantsReport { dataset, demo, seeds, annotations, epochs, seed } => {
            variants_report(dataset.as_deref(), demo.as_deref(), seeds, annotations, epochs, seed)
        }
    }
}

fn gen_demo(task: &str, steps: usize, out: &Path, seed: u64, updates: usize, policy_out: Option<&Path>) -> CliResult {
    let task: Task = task.parse().map_err(err)?;
    if steps == 0 {
        return Err("--steps must be at least 1".into());
    }
    let mut cfg = GenDemoConfig::new(task);
    cfg.steps = steps;
    cfg.seed = seed;
    cfg.updates = updates;
    let r = workflows::gen_demo(&cfg).map_err(err)?;
    write_demo(&r.video, out).map_err(err)?;
    if let Some(dir) = policy_out {
        r.policy.save(dir).map_err(err)?;
    }
    println!("best_reward {:.6}", r.best_reward);
    println!("best_update {}", r.best_update);
    if task == Task::Backflip {
        println!("backflips {}", r.backflips);
    }
    println!("frames {}", r.video.len());
    Ok(())
}

fn resumed_config(run_dir: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(run_dir.join(orchestrator::CONFIG_FILE)).map_err(|e| format!("{}: {e}", run_dir.display()))?;
    serde_json::from_str(&text).map_err(err)
}

/// Runs the orchestrator; with the human rater the rating service runs
/// alongside on `port`.
fn execute(config: &RunConfig, resume: bool, port: Option<u16>) -> CliResult<orchestrator::RunState> {
    let (demo, state) = orchestrator::prepare(config, resume).map_err(err)?;
    let live = Arc::new(orchestrator::open_live(config, &demo, &state, Arc::new(SystemClock)).map_err(err)?);
    if config.rater == RaterKind::Human {
        let port = port.unwrap_or(8080);
        let rt = tokio::runtime::Runtime::new().map_err(err)?;
        let listener = rt.block_on(clipmimic_service::bind(SocketAddr::from(([127, 0, 0, 1], port)))).map_err(|e| format!("port {port}: {e}"))?;
        eprintln!("rating page at http://{}/", listener.local_addr().map_err(err)?);
        rt.spawn(clipmimic_service::serve(listener, live.clone()));
        return orchestrator::drive(config, &demo, state, &live).map_err(err);
    }
    orchestrator::drive(config, &demo, state, &live).map_err(err)
}

fn eval(policy: Option<&Path>, random: bool, demo_path: &Path, metric: &str, seed: u64) -> CliResult {
    let metric: Metric = metric.parse().map_err(err)?;
    let demo = LoadedDemo::load(demo_path).map_err(err)?;
    if matches!(metric, Metric::OracleRating | Metric::Mse) && !demo.video.has_states() {
        return Err(format!("metric needs demo states, but {} is frames-only", demo_path.display()));
    }
    let params = EnvParams::default();
    let steps = demo.video.len();
    let traj = if random {
        rollout(&RandomController, &params, &|_, _, _| 0.0, steps, seed).map_err(err)?.0
    } else {
        let p = policy.expect("clap requires --policy");
        let dir = if p.join(orchestrator::CHECKPOINT_DIR).is_dir() {
            orchestrator::latest_policy_dir(p).map_err(err)?
        } else {
            p.to_path_buf()
        };
        let policy = GaussianPolicy::load(&dir).map_err(err)?;
        workflows::greedy_rollout(&policy, &params, steps, seed).map_err(err)?
    };
    match metric {
        Metric::BackflipReward => println!("backflip-reward {:.6}", workflows::episode_reward(&traj, Task::Backflip, &params)),
        Metric::HopReward => println!("hop-reward {:.6}", workflows::episode_reward(&traj, Task::Hop, &params)),
        Metric::OracleRating => {
            let r = workflows::mean_oracle_rating(&traj, &demo.video, &Default::default()).map_err(err)?;
            println!("oracle-rating {r:.6}");
        }
        Metric::Mse => {
            println!("t,mse");
            for (t, v) in workflows::mse_curve(&traj, &demo.video).map_err(err)?.iter().enumerate() {
                println!("{t},{v:.9e}");
            }
        }
    }
    Ok(())
}

fn serve(run_dir: &Path, port: u16) -> CliResult {
    let (config, state) = orchestrator::load_checkpoint(run_dir).map_err(err)?;
    let mut config = config;
    config.run_dir = run_dir.to_path_buf();
    let demo = LoadedDemo::load(&run_dir.join(orchestrator::DEMO_FILE)).map_err(err)?;
    let live = Arc::new(orchestrator::open_live(&config, &demo, &state, Arc::new(SystemClock)).map_err(err)?);
    let rt = tokio::runtime::Runtime::new().map_err(err)?;
    let listener = rt.block_on(clipmimic_service::bind(SocketAddr::from(([127, 0, 0, 1], port)))).map_err(|e| format!("port {port}: {e}"))?;
    println!("listening http://{}/", listener.local_addr().map_err(err)?);
    let unfinished = state.updates_done() < config.updates || state.online_done(&config) < config.online_annotations;
    if config.rater == RaterKind::Human && unfinished {
        // Keep the run going so the served queue fills up.
        let (_, state) = orchestrator::prepare(&config, true).map_err(err)?;
        let driver = live.clone();
        std::thread::spawn(move || {
            if let Err(e) = orchestrator::drive(&config, &demo, state, &driver) {
                eprintln!("error: {e}");
            }
        });
    }
    rt.block_on(clipmimic_service::serve(listener, live)).map_err(err)
}

fn export_video(traj: &Path, out: &Path) -> CliResult {
    let frames: Vec<Frame> = if traj.extension().is_some_and(|e| e == "vdm") {
        read_demo(traj).map_err(err)?.frames
    } else {
        let text = std::fs::read_to_string(traj).map_err(|e| format!("{}: {e}", traj.display()))?;
        let t: Trajectory = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", traj.display()))?;
        let view = Viewport::default();
        t.steps.iter().map(|(s, _)| rasterize(s, &view)).collect()
    };
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    for (i, f) in frames.iter().enumerate() {
        let path = out.join(format!("frame_{i:05}.png"));
        let png = clipmimic_service::encode_png(f).map_err(err)?;
        std::fs::write(&path, png).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    println!("frames {}", frames.len());
    Ok(())
}

fn variants_report(dataset: Option<&Path>, demo: Option<&Path>, seeds: usize, annotations: usize, epochs: usize, seed: u64) -> CliResult {
    let clips: Vec<Vec<AnnotationSample>> = match dataset {
        Some(dir) => {
            if !dir.join(ANNOTATIONS_FILE).is_file() {
                return Err(format!("{} has no {ANNOTATIONS_FILE}", dir.display()));
            }
            let (_, state) = orchestrator::load_checkpoint(dir).map_err(err)?;
            let demo = LoadedDemo::load(&dir.join(orchestrator::DEMO_FILE)).map_err(err)?;
            state
                .records
                .iter()
                .map(|r| expand_record(&demo.frames, &state.rollouts[&r.pair.agent_rollout_id], r))
                .collect::<Result<_, _>>()
                .map_err(err)?
        }
        None => {
            let demo: DemoVideo = LoadedDemo::load(demo.expect("clap requires --demo")).map_err(err)?.video.as_ref().clone();
            workflows::oracle_clips(&demo, &EnvParams::default(), annotations, clipmimic::feedback::DEFAULT_CLIP_LEN, seed).map_err(err)?
        }
    };
    let rows = workflows::variants_report(&clips, seeds, epochs, &SgdConfig::default()).map_err(err)?;
    print!("{}", workflows::format_report(&rows, seeds));
    Ok(())
}
