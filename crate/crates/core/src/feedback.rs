//! Clip pairs, the oracle rater, the append-only annotation log and the
//! lease-based queue through which human raters receive pairs.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{rollout, Controller, EnvAction, EnvParams, EnvState, Trajectory, STATE_DIM};
use crate::error::{Error, Result};
use crate::render::{DemoVideo, Frame};
use crate::seed;
use crate::simpred::{AnnotationSample, Observation};

/// 0.3 s at 30 fps.
pub const DEFAULT_CLIP_LEN: usize = 9;
pub const LEASE_SECONDS: f64 = 120.0;
/// Clip pairs cut from each random rollout during pretraining.
pub const PRETRAIN_PAIRS_PER_ROLLOUT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipPair {
    pub pair_id: u64,
    pub demo_start: usize,
    pub agent_rollout_id: u64,
    pub agent_start: usize,
    pub length: usize,
}

impl ClipPair {
    pub fn check_bounds(&self, demo_len: usize, rollout_len: usize) -> Result<()> {
        if self.length == 0
            || self.demo_start != self.agent_start
            || self.demo_start + self.length > demo_len
            || self.agent_start + self.length > rollout_len
        {
            return Err(Error::domain(format!(
                "clip pair {} out of bounds (demo {demo_len}, rollout {rollout_len} steps)",
                self.pair_id
            )));
        }
        Ok(())
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.agent_start..self.agent_start + self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingSource {
    Oracle,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    #[serde(flatten)]
    pub pair: ClipPair,
    pub rating: u8,
    pub source: RatingSource,
    pub timestamp: f64,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.rating) {
            return Err(Error::InvalidRating(self.rating as i64));
        }
        if self.pair.length == 0 || self.pair.demo_start != self.pair.agent_start {
            return Err(Error::domain("clip pair must be aligned and non-empty"));
        }
        if !self.timestamp.is_finite() {
            return Err(Error::NonFinite("annotation timestamp"));
        }
        Ok(())
    }
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub weights: [f64; STATE_DIM],
    pub sigma: f64,
    pub thresholds: [f64; 4],
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            // x, y, theta, vx, vy, omega, leg, leg_vel
            weights: [1.0, 2.0, 3.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            sigma: 1.0,
            thresholds: [0.8, 0.6, 0.4, 0.2],
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let w_ok = self.weights.iter().all(|w| w.is_finite() && *w >= 0.0) && self.weights.iter().sum::<f64>() > 0.0;
        let t = &self.thresholds;
        let t_ok = t.iter().all(|v| *v > 0.0 && *v < 1.0) && t.windows(2).all(|p| p[0] > p[1]);
        if !w_ok || !t_ok || !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("invalid oracle configuration {self:?}")));
        }
        Ok(())
    }

    /// Weighted RMS deviation between two equally long state sequences.
    pub fn error(&self, demo: &[EnvState], agent: &[EnvState]) -> Result<f64> {
        if demo.len() != agent.len() || demo.is_empty() {
            return Err(Error::domain(format!(
                "oracle needs equal non-empty clips, got {} and {}",
                demo.len(),
                agent.len()
            )));
        }
        let wsum: f64 = self.weights.iter().sum();
        let mut total = 0.0;
        for (d, a) in demo.iter().zip(agent) {
            let (d, a) = (d.to_array(), a.to_array());
            for i in 0..STATE_DIM {
                total += self.weights[i] * (d[i] - a[i]).powi(2);
            }
        }
        Ok((total / (demo.len() as f64 * wsum)).sqrt())
    }

    pub fn similarity(&self, demo: &[EnvState], agent: &[EnvState]) -> Result<f64> {
        Ok((-self.error(demo, agent)? / self.sigma).exp())
    }

    pub fn rating_for_similarity(&self, s: f64) -> u8 {
        self.thresholds.iter().position(|&t| s >= t).map_or(1, |k| 5 - k as u8)
    }
}

/// Rates two aligned state clips with the oracle.
pub fn oracle_rate(demo_states: &[EnvState], agent_states: &[EnvState], cfg: &OracleConfig) -> Result<u8> {
    Ok(cfg.rating_for_similarity(cfg.similarity(demo_states, agent_states)?))
}

/// Something that turns a clip pair into a 1–5 rating.
pub trait Rater {
    fn rate(&mut self, demo: &DemoVideo, rollout: &Trajectory, pair: &ClipPair) -> Result<u8>;
    fn source(&self) -> RatingSource;
}

#[derive(Debug, Clone, Default)]
pub struct OracleRater {
    pub config: OracleConfig,
}

impl Rater for OracleRater {
    fn rate(&mut self, demo: &DemoVideo, rollout: &Trajectory, pair: &ClipPair) -> Result<u8> {
        let states = demo.states.as_ref().ok_or(Error::OracleUnavailable)?;
        pair.check_bounds(demo.len(), rollout.len())?;
        let agent: Vec<EnvState> = rollout.steps[pair.range()].iter().map(|(s, _)| *s).collect();
        oracle_rate(&states[pair.range()], &agent, &self.config)
    }

    fn source(&self) -> RatingSource {
        RatingSource::Oracle
    }
}

/// Draws an aligned clip start uniformly from the range that fits both.
pub fn sample_clip_pair(
    demo: &DemoVideo,
    rollout_id: u64,
    rollout: &Trajectory,
    length: usize,
    pair_id: u64,
    seed: u64,
) -> Result<ClipPair> {
    let fit = demo.len().min(rollout.len());
    if length == 0 || length > fit {
        return Err(Error::domain(format!(
            "clip of {length} steps does not fit demo ({}) and rollout ({})",
            demo.len(),
            rollout.len()
        )));
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..=fit - length);
    Ok(ClipPair {
        pair_id,
        demo_start: start,
        agent_rollout_id: rollout_id,
        agent_start: start,
        length,
    })
}

/// Per-step samples of a rated clip: demo frame t with the agent's state and
/// action at t, all carrying the clip's rating.
pub fn expand_record(frames: &[Arc<Frame>], rollout: &Trajectory, record: &AnnotationRecord) -> Result<Vec<AnnotationSample>> {
    record.validate()?;
    record.pair.check_bounds(frames.len(), rollout.len())?;
    record
        .pair
        .range()
        .map(|t| {
            let (s, a) = &rollout.steps[t];
            AnnotationSample::new(frames[t].clone(), Observation::new(s, a), record.rating)
        })
        .collect()
}

/// Uniform actions in [-1, 1]².
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomController;

impl Controller for RandomController {
    fn act(&self, _: &EnvState, rng: &mut ChaCha8Rng) -> EnvAction {
        EnvAction::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0))
    }
}

/// Output of a collection round: the rollouts the clips came from, the
/// rated records and their per-step expansion.
#[derive(Debug, Clone, Default)]
pub struct Collected {
    pub rollouts: Vec<(u64, Trajectory)>,
    pub records: Vec<AnnotationRecord>,
    pub samples: Vec<AnnotationSample>,
}

/// Ids for rollouts and pairs; persisted with the run so ids never repeat.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdAllocator {
    pub next_rollout: u64,
    pub next_pair: u64,
}

impl IdAllocator {
    pub fn rollout(&mut self) -> u64 {
        self.next_rollout += 1;
        self.next_rollout - 1
    }

    pub fn pair(&mut self) -> u64 {
        self.next_pair += 1;
        self.next_pair - 1
    }
}

/// Random-policy rollouts cut into `n_annotations` rated clips.
/// `timestamp` supplies the record time for the k-th annotation.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_collect(
    demo: &DemoVideo,
    frames: &[Arc<Frame>],
    params: &EnvParams,
    n_annotations: usize,
    clip_len: usize,
    rater: &mut dyn Rater,
    ids: &mut IdAllocator,
    timestamp: &mut dyn FnMut(usize) -> f64,
    seed: u64,
) -> Result<Collected> {
    if n_annotations == 0 {
        return Err(Error::domain("pretrain_collect needs at least one annotation"));
    }
    let mut out = Collected::default();
    let n_rollouts = n_annotations.div_ceil(PRETRAIN_PAIRS_PER_ROLLOUT);
    for r in 0..n_rollouts {
        let (traj, _) = rollout(&RandomController, params, &|_, _, _| 0.0, demo.len(), seed::derive2(seed, 1, r as u64))?;
        let rid = ids.rollout();
        let here = PRETRAIN_PAIRS_PER_ROLLOUT.min(n_annotations - out.records.len());
        for _ in 0..here {
            let k = out.records.len();
            let pid = ids.pair();
            let pair = sample_clip_pair(demo, rid, &traj, clip_len, pid, seed::derive2(seed, 2, k as u64))?;
            let rating = rater.rate(demo, &traj, &pair)?;
            let record = AnnotationRecord {
                pair,
                rating,
                source: rater.source(),
                timestamp: timestamp(k),
            };
            out.samples.extend(expand_record(frames, &traj, &record)?);
            out.records.push(record);
        }
        out.rollouts.push((rid, traj));
    }
    Ok(out)
}

enum StoreMsg {
    Append(AnnotationRecord, mpsc::Sender<Result<()>>),
}

/// Append-only annotation log. All writes go through one writer thread, so
/// concurrent appenders can never interleave partial lines.
pub struct AnnotationStore {
    path: PathBuf,
    tx: Mutex<Option<mpsc::Sender<StoreMsg>>>,
    writer: Mutex<Option<JoinHandle<()>>>,
    count: Arc<AtomicUsize>,
}

impl AnnotationStore {
    /// Opens (creating if needed) the log at `path`; existing lines are kept
    /// and counted.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let existing = if path.exists() { load_annotations(&path)?.len() } else { 0 };
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let (tx, rx) = mpsc::channel::<StoreMsg>();
        let count = Arc::new(AtomicUsize::new(existing));
        let writer = {
            let count = count.clone();
            let path = path.clone();
            std::thread::Builder::new()
                .name("annotation-writer".into())
                .spawn(move || writer_loop(file, &path, rx, &count))
                .map_err(|e| Error::io("annotation-writer thread", e))?
        };
        Ok(Self {
            path,
            tx: Mutex::new(Some(tx)),
            writer: Mutex::new(Some(writer)),
            count,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Validates, appends and waits until the line is on disk.
    pub fn append(&self, record: &AnnotationRecord) -> Result<()> {
        record.validate()?;
        let (ack_tx, ack_rx) = mpsc::channel();
        {
            let guard = self.tx.lock().expect("store lock");
            let tx = guard.as_ref().ok_or_else(|| Error::Config("annotation store is closed".into()))?;
            tx.send(StoreMsg::Append(record.clone(), ack_tx))
                .map_err(|_| Error::Config("annotation writer stopped".into()))?;
        }
        ack_rx.recv().map_err(|_| Error::Config("annotation writer stopped".into()))?
    }

    pub fn len(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn close(&self) {
        self.tx.lock().expect("store lock").take();
        if let Some(h) = self.writer.lock().expect("store lock").take() {
            let _ = h.join();
        }
    }
}

impl Drop for AnnotationStore {
    fn drop(&mut self) {
        self.close();
    }
}

fn writer_loop(mut file: File, path: &Path, rx: mpsc::Receiver<StoreMsg>, count: &AtomicUsize) {
    for StoreMsg::Append(record, ack) in rx {
        let result = serde_json::to_string(&record)
            .map_err(|e| Error::Json {
                context: "annotation record".into(),
                source: e,
            })
            .and_then(|line| {
                file.write_all(format!("{line}\n").as_bytes())
                    .and_then(|_| file.flush())
                    .map_err(|e| Error::io(path, e))
            });
        if result.is_ok() {
            count.fetch_add(1, Ordering::SeqCst);
        }
        let _ = ack.send(result);
    }
}

/// Reads the log in append order; a bad line is reported with its number.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        rec.validate().map_err(|e| bad(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Time source for leases; tests substitute a manual clock.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        unix_now()
    }
}

#[derive(Debug, Default)]
pub struct ManualClock(Mutex<f64>);

impl ManualClock {
    pub fn new(t: f64) -> Self {
        Self(Mutex::new(t))
    }

    pub fn advance(&self, seconds: f64) {
        *self.0.lock().expect("clock lock") += seconds;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        *self.0.lock().expect("clock lock")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub enqueued: u64,
    pub rated: u64,
    pub outstanding: usize,
    pub depth: usize,
}

#[derive(Debug, Default)]
struct QueueState {
    pending: VecDeque<ClipPair>,
    outstanding: HashMap<u64, (ClipPair, f64)>,
    enqueued: u64,
    rated: u64,
}

impl QueueState {
    fn reclaim(&mut self, now: f64) {
        let mut expired: Vec<(u64, ClipPair)> = self
            .outstanding
            .iter()
            .filter(|(_, (_, deadline))| *deadline <= now)
            .map(|(id, (p, _))| (*id, *p))
            .collect();
        expired.sort_by_key(|(id, _)| *id);
        for (id, pair) in expired {
            self.outstanding.remove(&id);
            self.pending.push_back(pair);
        }
    }
}

/// Pending clip pairs. Each pair is leased to one consumer at a time; an
/// expired lease puts the pair back in the queue; completion is single-use.
pub struct PairQueue {
    state: Mutex<QueueState>,
    clock: Arc<dyn Clock>,
    lease: f64,
    notify: std::sync::Condvar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompleteError {
    /// Unknown pair, already rated, or lease expired.
    Gone,
}

impl PairQueue {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self::with_lease(clock, LEASE_SECONDS)
    }

    pub fn with_lease(clock: Arc<dyn Clock>, lease_seconds: f64) -> Self {
        Self {
            state: Mutex::new(QueueState::default()),
            clock,
            lease: lease_seconds,
            notify: std::sync::Condvar::new(),
        }
    }

    pub fn push(&self, pair: ClipPair) {
        let mut s = self.state.lock().expect("queue lock");
        s.pending.push_back(pair);
        s.enqueued += 1;
        self.notify.notify_all();
    }

    /// Leases the oldest pending pair, if any.
    pub fn lease(&self) -> Option<ClipPair> {
        let now = self.clock.now();
        let mut s = self.state.lock().expect("queue lock");
        s.reclaim(now);
        let pair = s.pending.pop_front()?;
        s.outstanding.insert(pair.pair_id, (pair, now + self.lease));
        Some(pair)
    }

    /// Like [`PairQueue::lease`] but waits up to `timeout` for a pair.
    pub fn lease_wait(&self, timeout: Duration) -> Option<ClipPair> {
        if let Some(p) = self.lease() {
            return Some(p);
        }
        let s = self.state.lock().expect("queue lock");
        let (s, _) = self
            .notify
            .wait_timeout_while(s, timeout, |s| s.pending.is_empty())
            .expect("queue lock");
        drop(s);
        self.lease()
    }

    /// The pair currently leased under `pair_id`, if the lease is live.
    pub fn outstanding(&self, pair_id: u64) -> Option<ClipPair> {
        let now = self.clock.now();
        let mut s = self.state.lock().expect("queue lock");
        s.reclaim(now);
        s.outstanding.get(&pair_id).map(|(p, _)| *p)
    }

    /// Ends a live lease; the pair will not be served again.
    pub fn complete(&self, pair_id: u64) -> std::result::Result<ClipPair, CompleteError> {
        let now = self.clock.now();
        let mut s = self.state.lock().expect("queue lock");
        s.reclaim(now);
        let (pair, _) = s.outstanding.remove(&pair_id).ok_or(CompleteError::Gone)?;
        s.rated += 1;
        Ok(pair)
    }

    pub fn stats(&self) -> QueueStats {
        let now = self.clock.now();
        let mut s = self.state.lock().expect("queue lock");
        s.reclaim(now);
        QueueStats {
            enqueued: s.enqueued,
            rated: s.rated,
            outstanding: s.outstanding.len(),
            depth: s.pending.len(),
        }
    }
}
