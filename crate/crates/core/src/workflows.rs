//! The experiment workflows behind the command-line tools: demo generation
//! with the hand-coded rewards, policy evaluation and the training-variant
//! comparison report.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{backflip_reward, count_backflips, hop_reward, rollout, EnvAction, EnvParams, EnvState, Trajectory};
use crate::error::{Error, Result};
use crate::feedback::{pretrain_collect, Collected, IdAllocator, OracleConfig, OracleRater};
use crate::nn::SgdConfig;
use crate::render::{DemoVideo, Frame, Viewport, DEFAULT_FPS};
use crate::seed;
use crate::simpred::{evaluate, train, AnnotationSample, EvalMetrics, SimilarityPredictor, TrainVariant};
use crate::trpo::{collect_batch, trpo_update, ActionMode, GaussianPolicy, TrpoConfig, ValueFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Backflip,
    Hop,
}

impl Task {
    pub fn reward(self, state: &EnvState, action: &EnvAction, params: &EnvParams) -> f64 {
        match self {
            Task::Backflip => backflip_reward(state, action, params),
            Task::Hop => hop_reward(state, action, params),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backflip" => Ok(Task::Backflip),
            "hop" => Ok(Task::Hop),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected backflip or hop)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenDemoConfig {
    pub task: Task,
    pub steps: usize,
    pub updates: usize,
    pub seed: u64,
    pub initial_log_std: f64,
    pub trpo: TrpoConfig,
    pub env: EnvParams,
}

impl GenDemoConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            steps: 240,
            updates: 200,
            seed: 0,
            initial_log_std: -0.5,
            trpo: TrpoConfig::default(),
            env: EnvParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenDemoResult {
    pub video: DemoVideo,
    pub trajectory: Trajectory,
    pub best_reward: f64,
    pub best_update: usize,
    pub backflips: u32,
    /// The policy whose greedy rollout was saved.
    pub policy: GaussianPolicy,
}

/// Trains the baseline agent on the task's hand-coded reward and keeps the
/// greedy rollout (from `reset(seed)`) with the highest episode reward.
pub fn gen_demo(cfg: &GenDemoConfig) -> Result<GenDemoResult> {
    if cfg.steps == 0 || cfg.updates == 0 {
        return Err(Error::Config("gen-demo needs --steps >= 1 and --updates >= 1".into()));
    }
    cfg.trpo.validate()?;
    cfg.env.validate()?;
    let mut policy = GaussianPolicy::new(seed::derive(cfg.seed, 1), cfg.initial_log_std)?;
    let mut value = ValueFunction::new(seed::derive(cfg.seed, 2))?;
    let reward = |_: usize, s: &EnvState, a: &EnvAction| cfg.task.reward(s, a, &cfg.env);
    let mut best: Option<(f64, usize, Trajectory, GaussianPolicy)> = None;
    for u in 0..cfg.updates {
        let (mut batch, _) = collect_batch(&policy, &cfg.env, &reward, cfg.steps, &cfg.trpo, seed::derive2(cfg.seed, 3, u as u64))?;
        batch.compute_advantages(&value, &cfg.trpo)?;
        let (p, v, _) = trpo_update(&policy, &value, &batch, &cfg.trpo, seed::derive2(cfg.seed, 4, u as u64))?;
        policy = p;
        value = v;
        let (traj, rewards) = rollout(&policy.controller(ActionMode::Greedy), &cfg.env, &reward, cfg.steps, cfg.seed)?;
        let total: f64 = rewards.iter().sum();
        if best.as_ref().is_none_or(|b| total > b.0) {
            best = Some((total, u, traj, policy.clone()));
        }
    }
    let (best_reward, best_update, trajectory, policy) = best.expect("at least one update");
    Ok(GenDemoResult {
        video: DemoVideo::from_trajectory(&trajectory, &Viewport::default(), DEFAULT_FPS),
        backflips: count_backflips(&trajectory)?,
        trajectory,
        best_reward,
        best_update,
        policy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    BackflipReward,
    HopReward,
    OracleRating,
    Mse,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backflip-reward" => Ok(Metric::BackflipReward),
            "hop-reward" => Ok(Metric::HopReward),
            "oracle-rating" => Ok(Metric::OracleRating),
            "mse" => Ok(Metric::Mse),
            _ => Err(Error::Config(format!(
                "unknown metric {s:?} (expected backflip-reward, hop-reward, oracle-rating or mse)"
            ))),
        }
    }
}

/// Greedy rollout as long as the demonstration, from `reset(seed)`.
pub fn greedy_rollout(policy: &GaussianPolicy, params: &EnvParams, steps: usize, seed: u64) -> Result<Trajectory> {
    Ok(rollout(&policy.controller(ActionMode::Greedy), params, &|_, _, _| 0.0, steps, seed)?.0)
}

pub fn episode_reward(traj: &Trajectory, task: Task, params: &EnvParams) -> f64 {
    traj.steps.iter().map(|(s, a)| task.reward(s, a, params)).sum()
}

fn demo_states(demo: &DemoVideo) -> Result<&[EnvState]> {
    demo.states.as_deref().ok_or(Error::OracleUnavailable)
}

/// Mean over steps of the oracle rating of each single step against the
/// aligned demo step.
pub fn mean_oracle_rating(traj: &Trajectory, demo: &DemoVideo, oracle: &OracleConfig) -> Result<f64> {
    let states = demo_states(demo)?;
    let n = states.len().min(traj.len());
    if n == 0 {
        return Err(Error::domain("nothing to compare"));
    }
    let mut total = 0.0;
    for (d, a) in states.iter().zip(traj.states()).take(n) {
        total += crate::feedback::oracle_rate(std::slice::from_ref(d), std::slice::from_ref(a), oracle)? as f64;
    }
    Ok(total / n as f64)
}

fn round_f32(s: &EnvState) -> [f64; crate::env::STATE_DIM] {
    s.to_array().map(|v| v as f32 as f64)
}

/// Per-step mean squared state error against the demo. Agent states are
/// rounded to the demo's storage precision first, so a policy replaying
/// the demonstration scores exactly zero.
pub fn mse_curve(traj: &Trajectory, demo: &DemoVideo) -> Result<Vec<f64>> {
    let states = demo_states(demo)?;
    Ok(states
        .iter()
        .zip(traj.states())
        .map(|(d, a)| {
            let (d, a) = (round_f32(d), round_f32(a));
            d.iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / d.len() as f64
        })
        .collect())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Oracle-labeled clips from random-policy rollouts, as per-clip sample groups.
pub fn oracle_clips(demo: &DemoVideo, params: &EnvParams, n: usize, clip_len: usize, seed: u64) -> Result<Vec<Vec<AnnotationSample>>> {
    let frames: Vec<Arc<Frame>> = demo.frames.iter().cloned().map(Arc::new).collect();
    let Collected { samples, .. } = pretrain_collect(
        demo,
        &frames,
        params,
        n,
        clip_len,
        &mut OracleRater::default(),
        &mut IdAllocator::default(),
        &mut |k| k as f64,
        seed,
    )?;
    Ok(samples.chunks(clip_len).map(<[AnnotationSample]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantRow {
    pub variant: TrainVariant,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub f1_345: f64,
    pub f1_45: f64,
}

pub const REPORT_SPLIT: (usize, usize, usize) = (200, 100, 100);

/// Trains every variant on a 200/100/100 clip split for each of `seeds`
/// seeds and averages validation/test accuracy and test F1 scores.
pub fn variants_report(clips: &[Vec<AnnotationSample>], seeds: usize, epochs: usize, sgd: &SgdConfig) -> Result<Vec<VariantRow>> {
    let (a, b, c) = REPORT_SPLIT;
    if clips.len() < a + b + c {
        return Err(Error::Config(format!("dataset has {} clips; the report needs {}", clips.len(), a + b + c)));
    }
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let mut rows: Vec<VariantRow> = TrainVariant::ALL
        .iter()
        .map(|&variant| VariantRow { variant, val_accuracy: 0.0, test_accuracy: 0.0, f1_345: 0.0, f1_45: 0.0 })
        .collect();
    for s in 0..seeds as u64 {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(s, 100)));
        let gather = |idx: &[usize]| idx.iter().flat_map(|&i| clips[i].iter().cloned()).collect::<Vec<_>>();
        let train_set = gather(&order[..a]);
        let val_set = gather(&order[a..a + b]);
        let test_set = gather(&order[a + b..a + b + c]);
        for row in rows.iter_mut() {
            let m = variant_metrics(row.variant, &train_set, &val_set, &test_set, epochs, sgd, s)?;
            row.val_accuracy += m.0.accuracy;
            row.test_accuracy += m.1.accuracy;
            row.f1_345 += m.1.f1_345;
            row.f1_45 += m.1.f1_45;
        }
    }
    let k = seeds as f64;
    for row in rows.iter_mut() {
        row.val_accuracy /= k;
        row.test_accuracy /= k;
        row.f1_345 /= k;
        row.f1_45 /= k;
    }
    Ok(rows)
}

/// Validation and test metrics of one variant trained with one seed.
pub fn variant_metrics(
    variant: TrainVariant,
    train_set: &[AnnotationSample],
    val_set: &[AnnotationSample],
    test_set: &[AnnotationSample],
    epochs: usize,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<(EvalMetrics, EvalMetrics)> {
    let init = SimilarityPredictor::new(variant, seed::derive(seed, 200))?;
    let (p, _) = train(&init, train_set, val_set, variant, sgd, epochs, seed::derive(seed, 300))?;
    Ok((evaluate(&p, val_set)?, evaluate(&p, test_set)?))
}

pub fn format_report(rows: &[VariantRow], seeds: usize) -> String {
    let mut out = format!("# averaged over {seeds} run(s)\n");
    let _ = writeln!(out, "{:<20} {:>8} {:>8} {:>10} {:>8}", "variant", "val_acc", "test_acc", "F1-3,4,5", "F1-4,5");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<20} {:>8.2} {:>8.2} {:>10.2} {:>8.2}",
            r.variant.name(),
            100.0 * r.val_accuracy,
            100.0 * r.test_accuracy,
            100.0 * r.f1_345,
            100.0 * r.f1_45
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::nominal_state;
    use crate::simpred::Observation;

    #[test]
    fn stationary_trajectory_earns_alive_bonus_only() {
        let p = EnvParams::default();
        let s = nominal_state(&p);
        let traj = Trajectory { steps: vec![(s, EnvAction::default()); 240], seed: 0 };
        assert_eq!(episode_reward(&traj, Task::Backflip, &p), 240.0);
    }

    #[test]
    fn gen_demo_is_deterministic() {
        let mut cfg = GenDemoConfig::new(Task::Backflip);
        cfg.steps = 30;
        cfg.updates = 2;
        cfg.trpo.steps_per_update = 120;
        let a = gen_demo(&cfg).unwrap();
        let b = gen_demo(&cfg).unwrap();
        assert_eq!(a.video.to_bytes().unwrap(), b.video.to_bytes().unwrap());
        assert_eq!(a.video.len(), 30);
        assert!(a.video.has_states());
        cfg.steps = 0;
        assert!(gen_demo(&cfg).is_err());
    }

    #[test]
    fn replaying_policy_has_zero_mse_and_top_rating() {
        let mut cfg = GenDemoConfig::new(Task::Backflip);
        cfg.steps = 40;
        cfg.updates = 1;
        cfg.trpo.steps_per_update = 80;
        cfg.seed = 3;
        let r = gen_demo(&cfg).unwrap();
        let video = DemoVideo::from_bytes(&r.video.to_bytes().unwrap()).unwrap();
        let traj = greedy_rollout(&r.policy, &cfg.env, 40, 3).unwrap();
        assert!(mse_curve(&traj, &video).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(mean_oracle_rating(&traj, &video, &OracleConfig::default()).unwrap(), 5.0);
    }

    #[test]
    fn separable_dataset_is_learned_by_every_variant() {
        // Rating is a step function of one observation coordinate.
        let frame = Arc::new(crate::render::rasterize(&nominal_state(&EnvParams::default()), &Viewport::default()));
        let clips: Vec<Vec<AnnotationSample>> = (0..400)
            .map(|k| {
                let rating = (k % 5) as u8 + 1;
                let mut v = [0.0; crate::simpred::OBS_DIM];
                v[1] = rating as f64 * 0.4;
                vec![AnnotationSample::new(frame.clone(), Observation { values: v }, rating).unwrap()]
            })
            .collect();
        let sgd = SgdConfig { learning_rate: 0.05, batch_size: 20 };
        let rows = variants_report(&clips, 1, 40, &sgd).unwrap();
        for r in &rows {
            assert_eq!(r.test_accuracy, 1.0, "{r:?}");
        }
        assert!(format_report(&rows, 1).contains("additional-layer"));
        assert!(variants_report(&clips[..399], 1, 1, &sgd).is_err());
    }
}
