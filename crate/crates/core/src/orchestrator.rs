//! Drives an imitation run: policy updates on the predicted reward,
//! interleaved with rating collection and predictor refreshes. Sync mode
//! runs them in a fixed round-robin and is reproducible; async mode runs
//! them as concurrent workers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::env::{EnvAction, EnvParams, EnvState, Trajectory, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::feedback::{
    expand_record, load_annotations, pretrain_collect, sample_clip_pair, AnnotationRecord, AnnotationStore, ClipPair,
    Clock, IdAllocator, OracleConfig, OracleRater, PairQueue, QueueStats, Rater, RatingSource, SystemClock,
    DEFAULT_CLIP_LEN,
};
use crate::nn::{SgdConfig, N_CLASSES};
use crate::render::{rasterize, read_demo, write_atomic, write_demo, DemoVideo, Frame, Viewport};
use crate::seed;
use crate::simpred::{fine_tune, reward_from_rating, train, train_last, AnnotationSample, Observation, SimilarityPredictor, TrainVariant};
use crate::trpo::{collect_batch, read_json, trpo_update, write_json, GaussianPolicy, TrpoConfig, ValueFunction};

pub const CONFIG_FILE: &str = "config.json";
pub const DEMO_FILE: &str = "demo.vdm";
pub const ANNOTATIONS_FILE: &str = "annotations.log";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MANIFEST_FILE: &str = "manifest.json";
const ROLLOUTS_FILE: &str = "rollouts.bin";
const ROLLOUT_MAGIC: &[u8; 4] = b"VRL1";
pub const METRICS_HEADER: &str = "update,mean_reward,kl,surrogate_improvement,backtracks,predictor_version,accepted";

// Seed stream tags.
const TAG_POLICY: u64 = 1;
const TAG_VALUE: u64 = 2;
const TAG_PREDICTOR: u64 = 3;
const TAG_PRETRAIN: u64 = 4;
const TAG_BATCH: u64 = 5;
const TAG_UPDATE: u64 = 6;
const TAG_PAIR: u64 = 7;
const TAG_REFRESH: u64 = 8;
const TAG_SPLIT: u64 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterKind {
    Oracle,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub demo: PathBuf,
    pub run_dir: PathBuf,
    pub rater: RaterKind,
    pub mode: Mode,
    pub pretrain_annotations: usize,
    pub online_annotations: usize,
    /// Clip pairs requested per RL update; also the predictor refresh cadence.
    pub pairs_per_update: usize,
    /// Minimum number of RL updates.
    pub updates: usize,
    pub variant: TrainVariant,
    pub pretrain_epochs: usize,
    pub refresh_epochs: usize,
    pub clip_len: usize,
    /// Fraction of pretraining clips held out to select the predictor.
    pub validation_fraction: f64,
    pub initial_log_std: f64,
    /// Checkpoint after every this many updates (0: only at the end).
    pub checkpoint_every: usize,
    /// Start the predictor from this checkpoint and fine-tune it.
    pub init_predictor: Option<PathBuf>,
    pub trpo: TrpoConfig,
    pub sgd: SgdConfig,
    pub env: EnvParams,
    pub oracle: OracleConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(demo: impl Into<PathBuf>, run_dir: impl Into<PathBuf>) -> Self {
        Self {
            demo: demo.into(),
            run_dir: run_dir.into(),
            rater: RaterKind::Oracle,
            mode: Mode::Sync,
            pretrain_annotations: 200,
            online_annotations: 150,
            pairs_per_update: 5,
            updates: 60,
            variant: TrainVariant::AdditionalLayer,
            pretrain_epochs: 30,
            refresh_epochs: 10,
            clip_len: DEFAULT_CLIP_LEN,
            validation_fraction: 0.15,
            initial_log_std: -0.5,
            checkpoint_every: 10,
            init_predictor: None,
            trpo: TrpoConfig::default(),
            sgd: SgdConfig::default(),
            env: EnvParams::default(),
            oracle: OracleConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trpo.validate()?;
        self.sgd.validate()?;
        self.env.validate()?;
        self.oracle.validate()?;
        if self.clip_len == 0 || self.pairs_per_update == 0 {
            return Err(Error::Config("clip_len and pairs_per_update must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || !self.initial_log_std.is_finite() {
            return Err(Error::Config("validation_fraction must lie in [0, 1) and initial_log_std be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub update: usize,
    pub mean_reward: f64,
    pub accepted: bool,
    pub kl: f64,
    pub surrogate_improvement: f64,
    pub backtracks: usize,
    pub predictor_version: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.update, self.mean_reward, self.kl, self.surrogate_improvement, self.backtracks, self.predictor_version, self.accepted as u8
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return None;
        }
        Some(Self {
            update: f[0].parse().ok()?,
            mean_reward: f[1].parse().ok()?,
            kl: f[2].parse().ok()?,
            surrogate_improvement: f[3].parse().ok()?,
            backtracks: f[4].parse().ok()?,
            predictor_version: f[5].parse().ok()?,
            accepted: match f[6] {
                "1" => true,
                "0" => false,
                _ => return None,
            },
        })
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    /// 0 until the predictor has been trained once.
    pub predictor_version: u64,
    pub predictor: SimilarityPredictor,
    pub rollouts: BTreeMap<u64, Trajectory>,
    pub records: Vec<AnnotationRecord>,
    pub policy: GaussianPolicy,
    pub value: ValueFunction,
    pub metrics: Vec<MetricsRow>,
    pub ids: IdAllocator,
    pub pretrained: bool,
}

impl RunState {
    pub fn fresh(config: &RunConfig) -> Result<Self> {
        let predictor = match &config.init_predictor {
            Some(p) => SimilarityPredictor::load(p)?,
            None => SimilarityPredictor::new(config.variant, seed::derive(config.seed, TAG_PREDICTOR))?,
        };
        Ok(Self {
            predictor_version: 0,
            predictor,
            rollouts: BTreeMap::new(),
            records: Vec::new(),
            policy: GaussianPolicy::new(seed::derive(config.seed, TAG_POLICY), config.initial_log_std)?,
            value: ValueFunction::new(seed::derive(config.seed, TAG_VALUE))?,
            metrics: Vec::new(),
            ids: IdAllocator::default(),
            pretrained: false,
        })
    }

    pub fn updates_done(&self) -> usize {
        self.metrics.len()
    }

    pub fn online_done(&self, config: &RunConfig) -> usize {
        self.records.len().saturating_sub(config.pretrain_annotations)
    }
}

/// An immutable, versioned predictor with the visual embeddings of every
/// demonstration frame precomputed.
#[derive(Debug)]
pub struct PredictorSnapshot {
    pub version: u64,
    pub predictor: SimilarityPredictor,
    embeddings: Vec<Vec<f64>>,
}

impl PredictorSnapshot {
    pub fn new(version: u64, predictor: SimilarityPredictor, frames: &[Arc<Frame>]) -> Result<Self> {
        let embeddings = frames.iter().map(|f| predictor.visual_embedding(f)).collect::<Result<_>>()?;
        Ok(Self { version, predictor, embeddings })
    }

    pub fn distribution(&self, t: usize, state: &EnvState, action: &EnvAction) -> Result<[f64; N_CLASSES]> {
        if self.version == 0 {
            return Ok([1.0 / N_CLASSES as f64; N_CLASSES]);
        }
        let emb = self
            .embeddings
            .get(t)
            .ok_or_else(|| Error::domain(format!("step {t} is past the end of the demonstration")))?;
        self.predictor.predict_embedded(emb, &Observation::new(state, action))
    }

    /// The imitation reward at step t. An untrained predictor (version 0)
    /// is treated as the uniform distribution, i.e. a constant reward.
    pub fn reward(&self, t: usize, state: &EnvState, action: &EnvAction) -> f64 {
        self.distribution(t, state, action)
            .and_then(|d| reward_from_rating(&d))
            .unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunStatus {
    pub rater: RaterKind,
    pub phase: String,
    pub annotations: usize,
    pub predictor_version: u64,
    pub rl_updates: usize,
    pub queue_depth: usize,
    pub outstanding: usize,
    pub enqueued: u64,
    pub rated: u64,
}

#[derive(Debug)]
pub enum SubmitError {
    /// Rating outside 1..=5.
    OutOfRange(i64),
    /// Unknown, expired or already rated pair.
    Gone(u64),
    Internal(Error),
}

impl std::fmt::Display for SubmitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SubmitError::OutOfRange(r) => write!(f, "rating {r} outside 1..=5"),
            SubmitError::Gone(id) => write!(f, "pair {id} is not outstanding"),
            SubmitError::Internal(e) => write!(f, "{e}"),
        }
    }
}

/// Shared state of a live run: what the HTTP service reads and writes.
pub struct LiveRun {
    pub demo: Arc<DemoVideo>,
    pub rater: RaterKind,
    pub queue: PairQueue,
    pub store: AnnotationStore,
    pub viewport: Viewport,
    clock: Arc<dyn Clock>,
    rollouts: RwLock<BTreeMap<u64, Arc<Trajectory>>>,
    predictor_version: AtomicU64,
    rl_updates: AtomicU64,
    phase: Mutex<String>,
    completed: Mutex<Option<mpsc::Sender<AnnotationRecord>>>,
}

impl LiveRun {
    pub fn new(demo: Arc<DemoVideo>, rater: RaterKind, store: AnnotationStore, clock: Arc<dyn Clock>) -> Self {
        Self {
            demo,
            rater,
            queue: PairQueue::new(clock.clone()),
            store,
            viewport: Viewport::default(),
            clock,
            rollouts: RwLock::new(BTreeMap::new()),
            predictor_version: AtomicU64::new(0),
            rl_updates: AtomicU64::new(0),
            phase: Mutex::new("idle".into()),
            completed: Mutex::new(None),
        }
    }

    pub fn register_rollout(&self, id: u64, traj: Trajectory) {
        self.rollouts.write().expect("registry lock").insert(id, Arc::new(traj));
    }

    pub fn rollout(&self, id: u64) -> Option<Arc<Trajectory>> {
        self.rollouts.read().expect("registry lock").get(&id).cloned()
    }

    pub fn set_phase(&self, phase: &str) {
        *self.phase.lock().expect("phase lock") = phase.to_string();
    }

    pub fn set_progress(&self, predictor_version: u64, rl_updates: usize) {
        self.predictor_version.store(predictor_version, Ordering::SeqCst);
        self.rl_updates.store(rl_updates as u64, Ordering::SeqCst);
    }

    fn subscribe(&self) -> mpsc::Receiver<AnnotationRecord> {
        let (tx, rx) = mpsc::channel();
        *self.completed.lock().expect("subscriber lock") = Some(tx);
        rx
    }

    pub fn status(&self) -> RunStatus {
        let QueueStats { enqueued, rated, outstanding, depth } = self.queue.stats();
        RunStatus {
            rater: self.rater,
            phase: self.phase.lock().expect("phase lock").clone(),
            annotations: self.store.len(),
            predictor_version: self.predictor_version.load(Ordering::SeqCst),
            rl_updates: self.rl_updates.load(Ordering::SeqCst) as usize,
            queue_depth: depth,
            outstanding,
            enqueued,
            rated,
        }
    }

    /// Demo frames and freshly rendered agent frames of a pair.
    pub fn pair_frames(&self, pair: &ClipPair) -> Result<(Vec<Frame>, Vec<Frame>)> {
        let traj = self
            .rollout(pair.agent_rollout_id)
            .ok_or_else(|| Error::domain(format!("rollout {} is not registered", pair.agent_rollout_id)))?;
        pair.check_bounds(self.demo.len(), traj.len())?;
        let demo = self.demo.frames[pair.range()].to_vec();
        let agent = traj.steps[pair.range()].iter().map(|(s, _)| rasterize(s, &self.viewport)).collect();
        Ok((demo, agent))
    }

    /// Records a rating for an outstanding pair.
    pub fn submit(&self, pair_id: u64, rating: i64, source: RatingSource) -> std::result::Result<AnnotationRecord, SubmitError> {
        if !(1..=5).contains(&rating) {
            return Err(SubmitError::OutOfRange(rating));
        }
        let pair = self.queue.complete(pair_id).map_err(|_| SubmitError::Gone(pair_id))?;
        self.commit(pair, rating as u8, source, self.clock.now()).map_err(SubmitError::Internal)
    }

    fn commit(&self, pair: ClipPair, rating: u8, source: RatingSource, timestamp: f64) -> Result<AnnotationRecord> {
        let record = AnnotationRecord { pair, rating, source, timestamp };
        self.store.append(&record)?;
        if let Some(tx) = self.completed.lock().expect("subscriber lock").as_ref() {
            let _ = tx.send(record.clone());
        }
        Ok(record)
    }
}

/// Demo loaded for a run: states rounded to file precision so in-memory and
/// on-disk demos behave identically.
pub struct LoadedDemo {
    pub video: Arc<DemoVideo>,
    pub frames: Vec<Arc<Frame>>,
}

impl LoadedDemo {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_video(read_demo(path)?))
    }

    pub fn from_video(video: DemoVideo) -> Self {
        let video = video.quantized();
        let frames = video.frames.iter().cloned().map(Arc::new).collect();
        Self { video: Arc::new(video), frames }
    }
}

fn samples_for(records: &[AnnotationRecord], rollouts: &BTreeMap<u64, Trajectory>, frames: &[Arc<Frame>]) -> Result<Vec<AnnotationSample>> {
    let mut out = Vec::with_capacity(records.len() * DEFAULT_CLIP_LEN);
    for r in records {
        let traj = rollouts
            .get(&r.pair.agent_rollout_id)
            .ok_or_else(|| Error::domain(format!("annotation {} references unknown rollout {}", r.pair.pair_id, r.pair.agent_rollout_id)))?;
        out.extend(expand_record(frames, traj, r)?);
    }
    Ok(out)
}

/// Splits records into (train, validation) by a seeded hash of the pair id,
/// so the split does not depend on arrival order.
fn split_records(records: &[AnnotationRecord], fraction: f64, seed: u64) -> (Vec<AnnotationRecord>, Vec<AnnotationRecord>) {
    let cut = (fraction * u64::MAX as f64) as u64;
    records
        .iter()
        .cloned()
        .partition(|r| seed::derive(seed, r.pair.pair_id) >= cut)
}

fn pretrain_predictor(config: &RunConfig, state: &RunState, frames: &[Arc<Frame>]) -> Result<SimilarityPredictor> {
    let seed = seed::derive(config.seed, TAG_PRETRAIN);
    if config.init_predictor.is_some() {
        let all = samples_for(&state.records, &state.rollouts, frames)?;
        return fine_tune(&state.predictor, &all, &config.sgd, config.pretrain_epochs, seed);
    }
    let (tr, va) = split_records(&state.records, config.validation_fraction, seed::derive(config.seed, TAG_SPLIT));
    let train_set = samples_for(&tr, &state.rollouts, frames)?;
    let val_set = samples_for(&va, &state.rollouts, frames)?;
    let (p, _) = train(&state.predictor, &train_set, &val_set, config.variant, &config.sgd, config.pretrain_epochs, seed)?;
    Ok(p)
}

fn refresh_predictor(config: &RunConfig, predictor: &SimilarityPredictor, records: &[AnnotationRecord], rollouts: &BTreeMap<u64, Trajectory>, frames: &[Arc<Frame>], version: u64) -> Result<SimilarityPredictor> {
    let all = samples_for(records, rollouts, frames)?;
    let (p, _) = train_last(predictor, &all, config.variant, &config.sgd, config.refresh_epochs, seed::derive2(config.seed, TAG_REFRESH, version))?;
    Ok(p)
}

/// Prepares `run_dir` (config, demo copy, annotation log) or, with `resume`,
/// reloads the last checkpoint found there.
pub fn prepare(config: &RunConfig, resume: bool) -> Result<(LoadedDemo, RunState)> {
    config.validate()?;
    let dir = &config.run_dir;
    std::fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
    if resume {
        let (_, state) = load_checkpoint(dir)?;
        let demo = LoadedDemo::load(&dir.join(DEMO_FILE))?;
        return Ok((demo, state));
    }
    let demo = LoadedDemo::load(&config.demo)?;
    if config.rater == RaterKind::Oracle && !demo.video.has_states() {
        return Err(Error::OracleUnavailable);
    }
    if demo.video.len() < config.clip_len {
        return Err(Error::Config(format!(
            "demo has {} frames, shorter than the {}-step clip",
            demo.video.len(),
            config.clip_len
        )));
    }
    write_json(&dir.join(CONFIG_FILE), config)?;
    write_demo(&demo.video, dir.join(DEMO_FILE))?;
    for stale in [ANNOTATIONS_FILE, METRICS_FILE] {
        let p = dir.join(stale);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    std::fs::write(dir.join(METRICS_FILE), format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
    Ok((demo, RunState::fresh(config)?))
}

/// Runs to completion (fresh start).
pub fn run(config: &RunConfig) -> Result<RunState> {
    let (demo, state) = prepare(config, false)?;
    let live = Arc::new(open_live(config, &demo, &state, Arc::new(SystemClock))?);
    drive(config, &demo, state, &live)
}

/// Continues the run stored in `config.run_dir`.
pub fn resume_run(config: &RunConfig) -> Result<RunState> {
    let (demo, state) = prepare(config, true)?;
    let live = Arc::new(open_live(config, &demo, &state, Arc::new(SystemClock))?);
    drive(config, &demo, state, &live)
}

/// Opens the annotation store and live hub for a prepared run.
pub fn open_live(config: &RunConfig, demo: &LoadedDemo, state: &RunState, clock: Arc<dyn Clock>) -> Result<LiveRun> {
    let store = AnnotationStore::open(config.run_dir.join(ANNOTATIONS_FILE))?;
    let live = LiveRun::new(demo.video.clone(), config.rater, store, clock);
    for (id, t) in &state.rollouts {
        live.register_rollout(*id, t.clone());
    }
    live.set_progress(state.predictor_version, state.updates_done());
    Ok(live)
}

/// Runs the prepared state to completion in the configured mode.
pub fn drive(config: &RunConfig, demo: &LoadedDemo, state: RunState, live: &Arc<LiveRun>) -> Result<RunState> {
    let out = match config.mode {
        Mode::Sync => run_sync(config, demo, state, live),
        Mode::Async => run_async(config, demo, state, live),
    };
    live.set_phase(if out.is_ok() { "done" } else { "failed" });
    let state = out?;
    checkpoint(&state, &config.run_dir)?;
    Ok(state)
}

/// Rates pairs: inline with the oracle, or through the queue for humans.
fn rate_pairs(
    config: &RunConfig,
    demo: &LoadedDemo,
    live: &LiveRun,
    pairs: Vec<(ClipPair, Arc<Trajectory>)>,
    first_index: usize,
    inbox: &mpsc::Receiver<AnnotationRecord>,
) -> Result<Vec<AnnotationRecord>> {
    match config.rater {
        RaterKind::Oracle => {
            let mut rater = OracleRater { config: config.oracle.clone() };
            pairs
                .into_iter()
                .enumerate()
                .map(|(k, (pair, traj))| {
                    let rating = rater.rate(&demo.video, &traj, &pair)?;
                    // Logical timestamps keep sync-mode logs reproducible.
                    live.commit(pair, rating, RatingSource::Oracle, (first_index + k) as f64)
                })
                .collect()
        }
        RaterKind::Human => {
            let n = pairs.len();
            for (pair, _) in pairs {
                live.queue.push(pair);
            }
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                out.push(inbox.recv().map_err(|_| Error::Config("rating channel closed".into()))?);
            }
            Ok(out)
        }
    }
}

fn run_pretrain(config: &RunConfig, demo: &LoadedDemo, state: &mut RunState, live: &LiveRun, inbox: &mpsc::Receiver<AnnotationRecord>) -> Result<()> {
    if state.pretrained {
        return Ok(());
    }
    live.set_phase("pretrain");
    if config.pretrain_annotations > 0 {
        let seed = seed::derive(config.seed, TAG_PRETRAIN);
        match config.rater {
            RaterKind::Oracle => {
                let mut rater = OracleRater { config: config.oracle.clone() };
                let mut stamp = |k: usize| k as f64;
                let c = pretrain_collect(&demo.video, &demo.frames, &config.env, config.pretrain_annotations, config.clip_len, &mut rater, &mut state.ids, &mut stamp, seed)?;
                for (id, t) in c.rollouts {
                    live.register_rollout(id, t.clone());
                    state.rollouts.insert(id, t);
                }
                for r in &c.records {
                    live.commit(r.pair, r.rating, r.source, r.timestamp)?;
                }
                state.records.extend(c.records);
            }
            RaterKind::Human => {
                // Same rollouts and pairs as the oracle path, rated through the queue.
                let mut pairs = Vec::new();
                let mut k = 0usize;
                let mut r = 0u64;
                while k < config.pretrain_annotations {
                    let (traj, _) = crate::env::rollout(&crate::feedback::RandomController, &config.env, &|_, _, _| 0.0, demo.video.len(), seed::derive2(seed, 1, r))?;
                    r += 1;
                    let rid = state.ids.rollout();
                    let traj = Arc::new(traj);
                    live.register_rollout(rid, (*traj).clone());
                    state.rollouts.insert(rid, (*traj).clone());
                    for _ in 0..crate::feedback::PRETRAIN_PAIRS_PER_ROLLOUT.min(config.pretrain_annotations - k) {
                        let pid = state.ids.pair();
                        pairs.push((sample_clip_pair(&demo.video, rid, &traj, config.clip_len, pid, seed::derive2(seed, 2, k as u64))?, traj.clone()));
                        k += 1;
                    }
                }
                let recs = rate_pairs(config, demo, live, pairs, 0, inbox)?;
                state.records.extend(recs);
            }
        }
        state.predictor = pretrain_predictor(config, state, &demo.frames)?;
        state.predictor_version += 1;
    }
    state.pretrained = true;
    live.set_progress(state.predictor_version, state.updates_done());
    Ok(())
}

/// One RL update against `snapshot`; returns the episodes it generated.
fn rl_step(config: &RunConfig, demo: &LoadedDemo, state: &mut RunState, snapshot: &PredictorSnapshot) -> Result<Vec<Trajectory>> {
    let u = state.updates_done();
    let reward = |t: usize, s: &EnvState, a: &EnvAction| snapshot.reward(t, s, a);
    let (mut batch, trajs) = collect_batch(&state.policy, &config.env, &reward, demo.video.len(), &config.trpo, seed::derive2(config.seed, TAG_BATCH, u as u64))?;
    batch.compute_advantages(&state.value, &config.trpo)?;
    let (policy, value, stats) = trpo_update(&state.policy, &state.value, &batch, &config.trpo, seed::derive2(config.seed, TAG_UPDATE, u as u64))?;
    state.policy = policy;
    state.value = value;
    state.metrics.push(MetricsRow {
        update: u,
        mean_reward: stats.mean_reward,
        accepted: stats.accepted,
        kl: stats.kl,
        surrogate_improvement: stats.surrogate_improvement,
        backtracks: stats.backtracks,
        predictor_version: snapshot.version,
    });
    Ok(trajs)
}

fn append_metrics(dir: &Path, row: &MetricsRow) -> Result<()> {
    use std::io::Write;
    let path = dir.join(METRICS_FILE);
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(&path, e))
}

/// Registers up to `want` of `trajs` and cuts one clip pair from each.
fn online_pairs(config: &RunConfig, demo: &LoadedDemo, state: &mut RunState, live: &LiveRun, trajs: Vec<Trajectory>, want: usize) -> Result<Vec<(ClipPair, Arc<Trajectory>)>> {
    let mut pairs = Vec::with_capacity(want);
    for traj in trajs.into_iter().take(want) {
        let rid = state.ids.rollout();
        let pid = state.ids.pair();
        let pair = sample_clip_pair(&demo.video, rid, &traj, config.clip_len, pid, seed::derive2(config.seed, TAG_PAIR, pid))?;
        live.register_rollout(rid, traj.clone());
        state.rollouts.insert(rid, traj.clone());
        pairs.push((pair, Arc::new(traj)));
    }
    Ok(pairs)
}

fn run_sync(config: &RunConfig, demo: &LoadedDemo, mut state: RunState, live: &Arc<LiveRun>) -> Result<RunState> {
    let inbox = live.subscribe();
    run_pretrain(config, demo, &mut state, live, &inbox)?;
    let mut snapshot = PredictorSnapshot::new(state.predictor_version, state.predictor.clone(), &demo.frames)?;
    while state.updates_done() < config.updates || state.online_done(config) < config.online_annotations {
        live.set_phase("rl");
        let trajs = rl_step(config, demo, &mut state, &snapshot)?;
        append_metrics(&config.run_dir, state.metrics.last().expect("just pushed"))?;
        let want = config.pairs_per_update.min(config.online_annotations - state.online_done(config));
        if want > 0 {
            live.set_phase("annotate");
            let pairs = online_pairs(config, demo, &mut state, live, trajs, want)?;
            let recs = rate_pairs(config, demo, live, pairs, state.records.len(), &inbox)?;
            state.records.extend(recs);
            live.set_phase("train-predictor");
            state.predictor = refresh_predictor(config, &state.predictor, &state.records, &state.rollouts, &demo.frames, state.predictor_version + 1)?;
            state.predictor_version += 1;
            snapshot = PredictorSnapshot::new(state.predictor_version, state.predictor.clone(), &demo.frames)?;
        }
        live.set_progress(state.predictor_version, state.updates_done());
        if config.checkpoint_every > 0 && state.updates_done() % config.checkpoint_every == 0 {
            checkpoint(&state, &config.run_dir)?;
        }
    }
    Ok(state)
}

/// Async mode: the RL loop runs on the calling thread; a rater worker (oracle
/// mode) and a predictor trainer run alongside, exchanging only queue
/// entries, annotation records and published snapshots.
fn run_async(config: &RunConfig, demo: &LoadedDemo, mut state: RunState, live: &Arc<LiveRun>) -> Result<RunState> {
    let inbox = live.subscribe();
    run_pretrain(config, demo, &mut state, live, &inbox)?;
    // Pretraining records are already in `state`.
    while inbox.try_recv().is_ok() {}
    let published = RwLock::new(Arc::new(PredictorSnapshot::new(state.predictor_version, state.predictor.clone(), &demo.frames)?));
    let stop = AtomicBool::new(false);
    let budget = config.online_annotations;
    // The trainer owns the dataset; the RL loop only sends it new rollouts.
    let (roll_tx, roll_rx) = mpsc::channel::<(u64, Trajectory)>();
    let trainer_state = Mutex::new((state.predictor.clone(), state.predictor_version, state.records.clone(), state.rollouts.clone()));
    let mut requested = state.online_done(config);

    let result: Result<()> = std::thread::scope(|scope| {
        if config.rater == RaterKind::Oracle {
            let live = live.clone();
            let stop = &stop;
            scope.spawn(move || {
                let mut rater = OracleRater { config: config.oracle.clone() };
                while !stop.load(Ordering::SeqCst) {
                    let Some(pair) = live.queue.lease_wait(Duration::from_millis(20)) else { continue };
                    let Some(traj) = live.rollout(pair.agent_rollout_id) else { continue };
                    if let Ok(rating) = rater.rate(&live.demo, &traj, &pair) {
                        if live.queue.complete(pair.pair_id).is_ok() {
                            let _ = live.commit(pair, rating, RatingSource::Oracle, crate::feedback::unix_now());
                        }
                    }
                }
            });
        }
        let trainer = {
            let live = live.clone();
            let (published, stop, trainer_state) = (&published, &stop, &trainer_state);
            scope.spawn(move || -> Result<()> {
                let mut fresh = 0usize;
                loop {
                    while let Ok((id, t)) = roll_rx.try_recv() {
                        trainer_state.lock().expect("trainer lock").3.insert(id, t);
                    }
                    match inbox.recv_timeout(Duration::from_millis(20)) {
                        Ok(r) => {
                            trainer_state.lock().expect("trainer lock").2.push(r);
                            fresh += 1;
                        }
                        Err(mpsc::RecvTimeoutError::Timeout) => {}
                        Err(mpsc::RecvTimeoutError::Disconnected) => std::thread::sleep(Duration::from_millis(20)),
                    }
                    let done = stop.load(Ordering::SeqCst);
                    if fresh >= config.pairs_per_update || (fresh > 0 && done) {
                        while let Ok((id, t)) = roll_rx.try_recv() {
                            trainer_state.lock().expect("trainer lock").3.insert(id, t);
                        }
                        let (pred, version, records, rollouts) = trainer_state.lock().expect("trainer lock").clone();
                        let next = refresh_predictor(config, &pred, &records, &rollouts, &demo.frames, version + 1)?;
                        let snap = Arc::new(PredictorSnapshot::new(version + 1, next.clone(), &demo.frames)?);
                        {
                            let mut g = trainer_state.lock().expect("trainer lock");
                            g.0 = next;
                            g.1 = version + 1;
                        }
                        *published.write().expect("snapshot lock") = snap;
                        live.predictor_version.store(version + 1, Ordering::SeqCst);
                        fresh = 0;
                    }
                    if done && fresh == 0 {
                        return Ok(());
                    }
                }
            })
        };
        let rl = (|| -> Result<()> {
            loop {
                let rated = trainer_state.lock().expect("trainer lock").2.len().saturating_sub(config.pretrain_annotations);
                let updates_left = state.updates_done() < config.updates;
                if !updates_left && rated >= budget {
                    return Ok(());
                }
                if !updates_left && requested >= budget {
                    // Only waiting on raters now.
                    std::thread::sleep(Duration::from_millis(20));
                    continue;
                }
                live.set_phase("rl");
                let snapshot = published.read().expect("snapshot lock").clone();
                let trajs = rl_step(config, demo, &mut state, &snapshot)?;
                append_metrics(&config.run_dir, state.metrics.last().expect("just pushed"))?;
                let want = config.pairs_per_update.min(budget - requested);
                if want > 0 {
                    for (pair, traj) in online_pairs(config, demo, &mut state, live, trajs, want)? {
                        let _ = roll_tx.send((pair.agent_rollout_id, (*traj).clone()));
                        live.queue.push(pair);
                        requested += 1;
                    }
                }
                live.rl_updates.store(state.updates_done() as u64, Ordering::SeqCst);
            }
        })();
        stop.store(true, Ordering::SeqCst);
        let trained = trainer.join().expect("trainer thread panicked");
        rl.and(trained)
    });
    result?;
    let (pred, version, records, _) = trainer_state.into_inner().expect("trainer lock");
    state.predictor = pred;
    state.predictor_version = version;
    state.records = records;
    live.set_progress(state.predictor_version, state.updates_done());
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    predictor_version: u64,
    updates_done: usize,
    records: usize,
    pretrained: bool,
    ids: IdAllocator,
    predictor_dir: String,
    policy_dir: String,
}

/// Writes the resumable state into `run_dir`. Idempotent: the same state
/// produces the same files.
pub fn checkpoint(state: &RunState, run_dir: &Path) -> Result<()> {
    let ck = run_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    let predictor_dir = format!("predictor_v{}", state.predictor_version);
    let policy_dir = format!("policy_u{}", state.updates_done());
    state.predictor.save(ck.join(&predictor_dir))?;
    state.policy.save(ck.join(&policy_dir))?;
    state.value.save(ck.join(&policy_dir))?;
    write_atomic(&ck.join(ROLLOUTS_FILE), &rollouts_to_bytes(&state.rollouts))?;
    let mut csv = format!("{METRICS_HEADER}\n");
    for row in &state.metrics {
        let _ = writeln!(csv, "{}", row.to_csv());
    }
    write_atomic(&run_dir.join(METRICS_FILE), csv.as_bytes())?;
    let manifest = CheckpointManifest {
        predictor_version: state.predictor_version,
        updates_done: state.updates_done(),
        records: state.records.len(),
        pretrained: state.pretrained,
        ids: state.ids,
        predictor_dir: predictor_dir.clone(),
        policy_dir: policy_dir.clone(),
    };
    write_json(&ck.join(MANIFEST_FILE), &manifest)?;
    // Older snapshots are superseded by the manifest.
    for entry in std::fs::read_dir(&ck).map_err(|e| Error::io(&ck, e))?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let stale = (name.starts_with("predictor_v") && name != predictor_dir) || (name.starts_with("policy_u") && name != policy_dir);
        if stale && entry.path().is_dir() {
            std::fs::remove_dir_all(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(())
}

/// Directory of the policy saved by the latest checkpoint in `run_dir`.
pub fn latest_policy_dir(run_dir: &Path) -> Result<PathBuf> {
    let ck = run_dir.join(CHECKPOINT_DIR);
    let manifest = ck.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(Error::MissingRunFiles { dir: run_dir.into(), missing: vec![format!("{CHECKPOINT_DIR}/{MANIFEST_FILE}")] });
    }
    let m: CheckpointManifest = read_json(&manifest)?;
    Ok(ck.join(m.policy_dir))
}

/// Reloads config and state from `run_dir`.
pub fn load_checkpoint(run_dir: &Path) -> Result<(RunConfig, RunState)> {
    let ck = run_dir.join(CHECKPOINT_DIR);
    let required = [
        CONFIG_FILE.to_string(),
        DEMO_FILE.to_string(),
        METRICS_FILE.to_string(),
        ANNOTATIONS_FILE.to_string(),
        format!("{CHECKPOINT_DIR}/{MANIFEST_FILE}"),
        format!("{CHECKPOINT_DIR}/{ROLLOUTS_FILE}"),
    ];
    let missing: Vec<String> = required.iter().filter(|f| !run_dir.join(f).is_file()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingRunFiles { dir: run_dir.into(), missing });
    }
    let config: RunConfig = read_json(&run_dir.join(CONFIG_FILE))?;
    let m: CheckpointManifest = read_json(&ck.join(MANIFEST_FILE))?;
    let predictor = SimilarityPredictor::load(ck.join(&m.predictor_dir))?;
    let policy = GaussianPolicy::load(ck.join(&m.policy_dir))?;
    let value = ValueFunction::load(ck.join(&m.policy_dir))?;
    let rollouts_path = ck.join(ROLLOUTS_FILE);
    let rollouts = rollouts_from_bytes(&std::fs::read(&rollouts_path).map_err(|e| Error::io(&rollouts_path, e))?)?;

    let log = run_dir.join(ANNOTATIONS_FILE);
    let mut records = load_annotations(&log)?;
    if records.len() < m.records {
        return Err(Error::format("annotations", format!("log has {} records, checkpoint expects {}", records.len(), m.records)));
    }
    if records.len() > m.records {
        // Lines written after the checkpoint are discarded so the resumed
        // run re-creates them.
        records.truncate(m.records);
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).map_err(|e| Error::Json { context: "annotation".into(), source: e })?);
            text.push('\n');
        }
        write_atomic(&log, text.as_bytes())?;
    }
    let metrics_path = run_dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        metrics.push(MetricsRow::from_csv(line).ok_or_else(|| Error::format("metrics", format!("bad row at line {}", i + 1)))?);
    }
    if metrics.len() < m.updates_done {
        return Err(Error::format("metrics", format!("{} rows, checkpoint expects {}", metrics.len(), m.updates_done)));
    }
    metrics.truncate(m.updates_done);
    let mut csv = format!("{METRICS_HEADER}\n");
    for row in &metrics {
        let _ = writeln!(csv, "{}", row.to_csv());
    }
    write_atomic(&metrics_path, csv.as_bytes())?;
    for r in &records {
        if !rollouts.contains_key(&r.pair.agent_rollout_id) {
            return Err(Error::format("annotations", format!("pair {} references unknown rollout", r.pair.pair_id)));
        }
    }
    Ok((
        config,
        RunState {
            predictor_version: m.predictor_version,
            predictor,
            rollouts,
            records,
            policy,
            value,
            metrics,
            ids: m.ids,
            pretrained: m.pretrained,
        },
    ))
}

fn rollouts_to_bytes(rollouts: &BTreeMap<u64, Trajectory>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ROLLOUT_MAGIC);
    out.extend_from_slice(&(rollouts.len() as u32).to_le_bytes());
    for (id, t) in rollouts {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&t.seed.to_le_bytes());
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for (s, a) in &t.steps {
            for v in s.to_array().iter().chain(a.to_array().iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn rollouts_from_bytes(bytes: &[u8]) -> Result<BTreeMap<u64, Trajectory>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::format("rollouts", "truncated"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != ROLLOUT_MAGIC {
        return Err(Error::format("rollouts", "bad magic"));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let n = u32_of(take(4)?) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let id = u64_of(take(8)?);
        let seed = u64_of(take(8)?);
        let len = u32_of(take(4)?) as usize;
        let mut steps = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            let raw = take(8 * (STATE_DIM + ACTION_DIM))?;
            let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let s = EnvState::from_array(v[..STATE_DIM].try_into().expect("state"));
            let a = EnvAction::from_array(v[STATE_DIM..].try_into().expect("action"));
            steps.push((s, a));
        }
        out.insert(id, Trajectory { steps, seed });
    }
    if pos != bytes.len() {
        return Err(Error::format("rollouts", "trailing bytes"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::rollout;
    use crate::feedback::ManualClock;

    fn tiny_demo(dir: &Path) -> PathBuf {
        let (traj, _) = rollout(&|_: &EnvState| EnvAction::new(-1.0, 0.0), &EnvParams::default(), &|_, _, _| 0.0, 30, 1).unwrap();
        let path = dir.join("demo.vdm");
        write_demo(&DemoVideo::from_trajectory(&traj, &Viewport::default(), 30), &path).unwrap();
        path
    }

    fn tiny_config(dir: &Path, run: &str) -> RunConfig {
        let mut c = RunConfig::new(tiny_demo(dir), dir.join(run));
        c.pretrain_annotations = 10;
        c.online_annotations = 4;
        c.pairs_per_update = 2;
        c.updates = 3;
        c.pretrain_epochs = 2;
        c.refresh_epochs = 1;
        c.trpo.steps_per_update = 60;
        c.checkpoint_every = 1;
        c.seed = 7;
        c
    }

    #[test]
    fn sync_runs_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let a = run(&tiny_config(dir.path(), "a")).unwrap();
        let b = run(&tiny_config(dir.path(), "b")).unwrap();
        let ma = std::fs::read(dir.path().join("a").join(METRICS_FILE)).unwrap();
        assert_eq!(ma, std::fs::read(dir.path().join("b").join(METRICS_FILE)).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 14);
        assert_eq!(a.updates_done(), 3);
        assert_eq!(a.predictor_version, 3);
        let versions: Vec<u64> = a.metrics.iter().map(|m| m.predictor_version).collect();
        assert!(versions.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(load_annotations(dir.path().join("a").join(ANNOTATIONS_FILE)).unwrap(), a.records);
    }

    #[test]
    fn zero_budget_runs_on_constant_reward() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_config(dir.path(), "z");
        c.pretrain_annotations = 0;
        c.online_annotations = 0;
        let s = run(&c).unwrap();
        assert_eq!(s.predictor_version, 0);
        assert!(s.records.is_empty());
        for m in &s.metrics {
            assert_eq!(m.mean_reward, 0.5);
            assert!(m.kl <= c.trpo.kl_delta);
        }
    }

    #[test]
    fn checkpoint_resume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config(dir.path(), "r");
        let s = run(&c).unwrap();
        let (c2, back) = load_checkpoint(&c.run_dir).unwrap();
        assert_eq!(c2, c);
        assert_eq!(back, s);
        let snapshot = |d: &Path| {
            let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
            let mut stack = vec![d.to_path_buf()];
            while let Some(p) = stack.pop() {
                for e in std::fs::read_dir(&p).unwrap().flatten() {
                    if e.path().is_dir() {
                        stack.push(e.path());
                    } else {
                        files.push((e.path(), std::fs::read(e.path()).unwrap()));
                    }
                }
            }
            files.sort();
            files
        };
        let before = snapshot(&c.run_dir);
        checkpoint(&back, &c.run_dir).unwrap();
        assert_eq!(snapshot(&c.run_dir), before);
    }

    #[test]
    fn resume_continues_identically() {
        let dir = tempfile::tempdir().unwrap();
        let full = tiny_config(dir.path(), "full");
        run(&full).unwrap();
        let mut part = tiny_config(dir.path(), "part");
        part.updates = 1;
        part.online_annotations = 2;
        run(&part).unwrap();
        // Extend the budget and continue from the checkpoint.
        let mut cfg: RunConfig = read_json(&part.run_dir.join(CONFIG_FILE)).unwrap();
        cfg.updates = 3;
        cfg.online_annotations = 4;
        write_json(&part.run_dir.join(CONFIG_FILE), &cfg).unwrap();
        resume_run(&cfg).unwrap();
        assert_eq!(
            std::fs::read_to_string(full.run_dir.join(METRICS_FILE)).unwrap(),
            std::fs::read_to_string(part.run_dir.join(METRICS_FILE)).unwrap()
        );
    }

    #[test]
    fn resume_from_empty_dir_names_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("manifest.json") && err.contains("config.json"), "{err}");
    }

    #[test]
    fn async_oracle_run_spends_budget() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_config(dir.path(), "async");
        c.mode = Mode::Async;
        let s = run(&c).unwrap();
        assert_eq!(s.records.len(), 14);
        assert!(s.updates_done() >= 3);
        assert!(s.predictor_version >= 1);
        assert_eq!(load_annotations(c.run_dir.join(ANNOTATIONS_FILE)).unwrap().len(), 14);
        let ids: Vec<u64> = s.records.iter().map(|r| r.pair.pair_id).collect();
        let mut dedup = ids.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), ids.len());
        for r in &s.records {
            assert!(s.rollouts.contains_key(&r.pair.agent_rollout_id));
        }
    }

    #[test]
    fn human_submissions_flow_through_the_queue() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config(dir.path(), "h");
        let (demo, state) = prepare(&c, false).unwrap();
        let live = LiveRun::new(demo.video.clone(), RaterKind::Human, AnnotationStore::open(c.run_dir.join(ANNOTATIONS_FILE)).unwrap(), Arc::new(ManualClock::new(0.0)));
        let (traj, _) = rollout(&crate::feedback::RandomController, &c.env, &|_, _, _| 0.0, 30, 3).unwrap();
        live.register_rollout(0, traj.clone());
        let pair = sample_clip_pair(&demo.video, 0, &traj, 9, 0, 1).unwrap();
        live.queue.push(pair);
        assert!(matches!(live.submit(0, 3, RatingSource::Human), Err(SubmitError::Gone(0))));
        assert_eq!(live.queue.lease(), Some(pair));
        let (d, a) = live.pair_frames(&pair).unwrap();
        assert_eq!((d.len(), a.len()), (9, 9));
        assert!(matches!(live.submit(0, 6, RatingSource::Human), Err(SubmitError::OutOfRange(6))));
        let rec = live.submit(0, 4, RatingSource::Human).unwrap();
        assert_eq!((rec.rating, rec.source), (4, RatingSource::Human));
        assert!(matches!(live.submit(0, 4, RatingSource::Human), Err(SubmitError::Gone(0))));
        assert_eq!(live.status().annotations, 1);
        drop(state);
    }

    #[test]
    fn rollout_registry_round_trips() {
        let mut m = BTreeMap::new();
        for k in 0..3u64 {
            let (t, _) = rollout(&crate::feedback::RandomController, &EnvParams::default(), &|_, _, _| 0.0, 12, k).unwrap();
            m.insert(k * 10, t);
        }
        let bytes = rollouts_to_bytes(&m);
        assert_eq!(rollouts_from_bytes(&bytes).unwrap(), m);
        assert!(rollouts_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn metrics_rows_round_trip() {
        let row = MetricsRow { update: 3, mean_reward: 0.1 + 0.2, accepted: true, kl: 1e-17, surrogate_improvement: -0.0, backtracks: 2, predictor_version: 9 };
        assert_eq!(MetricsRow::from_csv(&row.to_csv()), Some(row));
    }
}
