//! Trust-region policy optimisation for a diagonal Gaussian policy.
//!
//! The natural-gradient direction is obtained with conjugate gradient on
//! Fisher-vector products; the step is scaled to the KL radius and then
//! backtracked until both the KL constraint and surrogate improvement hold.
//! The Fisher-vector product is the Hessian of the mean KL at `new == old`,
//! evaluated as `Jᵀ M J v` with a forward-mode pass (`J v`) followed by a
//! reverse-mode pass (`Jᵀ ·`); at `new == old` the KL has zero gradient so
//! this equals the exact Hessian-vector product.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{self, Controller, EnvAction, EnvParams, EnvState, RewardFn, Trajectory, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, GradientSet, SgdConfig};
use crate::seed;

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    crate::render::write_atomic(path, text.as_bytes())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrpoConfig {
    pub kl_delta: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    pub steps_per_update: usize,
    pub value_epochs: usize,
    pub value_lr: f64,
    pub value_batch: usize,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        Self {
            kl_delta: 0.01,
            gamma: 0.99,
            gae_lambda: 0.97,
            cg_iters: 10,
            cg_damping: 0.1,
            backtrack_ratio: 0.8,
            max_backtracks: 10,
            steps_per_update: 2048,
            value_epochs: 5,
            value_lr: 1e-3,
            value_batch: 64,
        }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !(self.kl_delta > 0.0) || !unit(self.gamma) || !unit(self.gae_lambda) || self.cg_iters == 0 {
            return Err(Error::Config(format!("invalid TRPO configuration: {self:?}")));
        }
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) || self.steps_per_update == 0 {
            return Err(Error::Config(format!("invalid TRPO configuration: {self:?}")));
        }
        Ok(())
    }
}

/// Whether a rollout samples from the policy or follows its mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// State-conditioned Gaussian with a state-independent diagonal std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean_net: DenseNet,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(seed: u64, log_std: f64) -> Result<Self> {
        let mut mean_net = DenseNet::new(
            &[STATE_DIM, 64, 64, ACTION_DIM],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            seed,
        )?;
        // Start close to a zero-mean policy.
        let last = mean_net.layers.last_mut().expect("three layers");
        last.weights.iter_mut().for_each(|w| *w *= 0.01);
        Ok(Self {
            mean_net,
            log_std: vec![log_std; ACTION_DIM],
        })
    }

    /// Writes `policy.vnn` and the `log_std.json` sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.mean_net.save(dir.join("policy.vnn"))?;
        write_json(&dir.join("log_std.json"), &self.log_std)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mean_net = DenseNet::load(dir.join("policy.vnn"))?;
        let log_std: Vec<f64> = read_json(&dir.join("log_std.json"))?;
        if mean_net.input_dim() != STATE_DIM || mean_net.output_dim() != ACTION_DIM || log_std.len() != ACTION_DIM {
            return Err(Error::format("policy", "checkpoint shapes do not match the hopper"));
        }
        Ok(Self { mean_net, log_std })
    }

    pub fn mean(&self, state: &EnvState) -> Vec<f64> {
        self.mean_net.predict(&state.policy_input()).expect("state dim matches policy")
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// Raw (unclamped) action sample.
    pub fn sample(&self, state: &EnvState, rng: &mut ChaCha8Rng) -> [f64; ACTION_DIM] {
        let mean = self.mean(state);
        std::array::from_fn(|d| {
            let z: f64 = StandardNormal.sample(rng);
            mean[d] + self.log_std[d].exp() * z
        })
    }

    pub fn log_prob(&self, state: &EnvState, action: &[f64]) -> f64 {
        log_prob(&self.mean(state), &self.log_std, action)
    }

    pub fn num_params(&self) -> usize {
        self.mean_net.num_params() + self.log_std.len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.mean_net.params_flat();
        p.extend_from_slice(&self.log_std);
        p
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.mean_net.num_params();
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "GaussianPolicy::set_params_flat",
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        self.mean_net.set_params_flat(&flat[..n])?;
        self.log_std.copy_from_slice(&flat[n..]);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.mean_net.is_finite() && self.log_std.iter().all(|v| v.is_finite())
    }

    /// Policy acting in `mode`; clamping happens in the environment.
    pub fn controller(&self, mode: ActionMode) -> PolicyController<'_> {
        PolicyController { policy: self, mode }
    }
}

pub struct PolicyController<'a> {
    policy: &'a GaussianPolicy,
    mode: ActionMode,
}

impl Controller for PolicyController<'_> {
    fn act(&self, state: &EnvState, rng: &mut ChaCha8Rng) -> EnvAction {
        match self.mode {
            ActionMode::Greedy => {
                let m = self.policy.mean(state);
                EnvAction::new(m[0], m[1])
            }
            ActionMode::Sample => EnvAction::from_array(self.policy.sample(state, rng)),
        }
    }
}

fn log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Closed-form KL(old ‖ new) between diagonal Gaussians.
pub fn gaussian_kl(mean_old: &[f64], log_std_old: &[f64], mean_new: &[f64], log_std_new: &[f64]) -> f64 {
    (0..mean_old.len())
        .map(|d| {
            let var_old = (2.0 * log_std_old[d]).exp();
            let var_new = (2.0 * log_std_new[d]).exp();
            let dm = mean_old[d] - mean_new[d];
            log_std_new[d] - log_std_old[d] + (var_old + dm * dm) / (2.0 * var_new) - 0.5
        })
        .sum()
}

/// Mean over `states` of KL(old ‖ new).
pub fn mean_kl(old: &GaussianPolicy, new: &GaussianPolicy, states: &[EnvState]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    states
        .iter()
        .map(|s| gaussian_kl(&old.mean(s), &old.log_std, &new.mean(s), &new.log_std))
        .sum::<f64>()
        / states.len() as f64
}

/// Gradient of [`mean_kl`] with respect to the parameters of `new`.
pub fn mean_kl_grad(old: &GaussianPolicy, new: &GaussianPolicy, states: &[EnvState]) -> Vec<f64> {
    let n = states.len().max(1) as f64;
    let mut g = GradientSet::zeros_like(&new.mean_net);
    let mut g_log_std = vec![0.0; new.log_std.len()];
    let var_new: Vec<f64> = new.log_std.iter().map(|l| (2.0 * l).exp()).collect();
    let var_old: Vec<f64> = old.log_std.iter().map(|l| (2.0 * l).exp()).collect();
    for s in states {
        let mo = old.mean(s);
        let (mn, cache) = new.mean_net.forward(&s.policy_input()).expect("state dim");
        let dmean: Vec<f64> = (0..mn.len()).map(|d| (mn[d] - mo[d]) / var_new[d] / n).collect();
        new.mean_net.backward_into(&cache, &dmean, &mut g).expect("shapes");
        for d in 0..mn.len() {
            let dm = mo[d] - mn[d];
            g_log_std[d] += (1.0 - (var_old[d] + dm * dm) / var_new[d]) / n;
        }
    }
    let mut flat = g.to_flat();
    flat.extend(g_log_std);
    flat
}

/// `(H + damping·I) v` where `H` is the Hessian of the mean KL between the
/// policy and a perturbed copy, taken at zero perturbation.
pub fn fisher_vector_product(policy: &GaussianPolicy, states: &[EnvState], v: &[f64], damping: f64) -> Result<Vec<f64>> {
    let n_net = policy.mean_net.num_params();
    if v.len() != policy.num_params() {
        return Err(Error::Dimension {
            context: "fisher_vector_product",
            expected: policy.num_params(),
            actual: v.len(),
        });
    }
    let tangent = GradientSet::from_flat(&policy.mean_net, &v[..n_net])?;
    let inv_var: Vec<f64> = policy.log_std.iter().map(|l| (-2.0 * l).exp()).collect();
    let n = states.len().max(1) as f64;
    let mut acc = GradientSet::zeros_like(&policy.mean_net);
    for s in states {
        let (_, cache) = policy.mean_net.forward(&s.policy_input())?;
        let jv = policy.mean_net.jvp(&cache, &tangent)?;
        let weighted: Vec<f64> = jv.iter().zip(&inv_var).map(|(a, w)| a * w / n).collect();
        policy.mean_net.backward_into(&cache, &weighted, &mut acc)?;
    }
    let mut out = acc.to_flat();
    // d²KL/d(log_std)² = 2 per dimension at equality, no cross terms.
    out.extend(v[n_net..].iter().map(|x| 2.0 * x));
    for (o, x) in out.iter_mut().zip(v) {
        *o += damping * x;
    }
    Ok(out)
}

/// State-value baseline. Targets are standardised with running statistics
/// so that plain SGD at a small learning rate stays stable whatever the
/// reward scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub net: DenseNet,
    pub target_mean: f64,
    pub target_std: f64,
    pub fitted: bool,
}

impl ValueFunction {
    pub fn new(seed: u64) -> Result<Self> {
        Ok(Self {
            net: DenseNet::new(
                &[STATE_DIM, 64, 64, 1],
                &[Activation::Relu, Activation::Relu, Activation::Identity],
                seed,
            )?,
            target_mean: 0.0,
            target_std: 1.0,
            fitted: false,
        })
    }

    /// Writes `value.vnn` and the target statistics to `value.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.net.save(dir.join("value.vnn"))?;
        write_json(&dir.join("value.json"), &(self.target_mean, self.target_std, self.fitted))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let net = DenseNet::load(dir.join("value.vnn"))?;
        let (target_mean, target_std, fitted): (f64, f64, bool) = read_json(&dir.join("value.json"))?;
        if net.input_dim() != STATE_DIM || net.output_dim() != 1 {
            return Err(Error::format("value", "checkpoint shapes do not match the hopper"));
        }
        Ok(Self { net, target_mean, target_std, fitted })
    }

    pub fn value(&self, state: &EnvState) -> f64 {
        self.net.predict(&state.policy_input()).expect("state dim")[0] * self.target_std + self.target_mean
    }

    /// Regression of the values onto `returns` by minibatch SGD on the
    /// squared error of standardised targets.
    pub fn fit(&mut self, states: &[EnvState], returns: &[f64], cfg: &TrpoConfig, seed: u64) -> Result<f64> {
        if states.len() != returns.len() {
            return Err(Error::Dimension {
                context: "ValueFunction::fit",
                expected: states.len(),
                actual: returns.len(),
            });
        }
        if states.is_empty() {
            return Ok(0.0);
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-3);
        if self.fitted {
            // Blend so that the baseline does not jump between updates.
            self.target_mean = 0.9 * self.target_mean + 0.1 * mean;
            self.target_std = (0.9 * self.target_std + 0.1 * std).max(1e-3);
        } else {
            self.target_mean = mean;
            self.target_std = std;
            self.fitted = true;
        }
        let targets: Vec<f64> = returns.iter().map(|r| (r - self.target_mean) / self.target_std).collect();
        let inputs: Vec<[f64; STATE_DIM]> = states.iter().map(EnvState::policy_input).collect();
        let sgd = SgdConfig {
            learning_rate: cfg.value_lr,
            batch_size: cfg.value_batch.max(1),
        };
        let mut order: Vec<usize> = (0..states.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last_loss = 0.0;
        for _ in 0..cfg.value_epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(sgd.batch_size) {
                let mut g = GradientSet::zeros_like(&self.net);
                let k = chunk.len() as f64;
                for &i in chunk {
                    let (out, cache) = self.net.forward(&inputs[i])?;
                    let err = out[0] - targets[i];
                    epoch_loss += 0.5 * err * err;
                    self.net.backward_into(&cache, &[err / k], &mut g)?;
                }
                self.net.sgd_step(&g, &sgd)?;
            }
            last_loss = epoch_loss / n;
        }
        Ok(last_loss)
    }
}

/// One episode's extent within a flat batch, `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub start: usize,
    pub end: usize,
}

/// Generalised advantage estimation. `values` holds, for each episode in
/// order, one value per step followed by one bootstrap value for the state
/// after the last step (0 for a terminal state), so
/// `values.len() == rewards.len() + episodes.len()`.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    episodes: &[Episode],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() + episodes.len() {
        return Err(Error::Dimension {
            context: "gae_advantages values",
            expected: rewards.len() + episodes.len(),
            actual: values.len(),
        });
    }
    let covered: usize = episodes.iter().map(|e| e.end.saturating_sub(e.start)).sum();
    if covered != rewards.len() || episodes.iter().any(|e| e.end < e.start || e.end > rewards.len()) {
        return Err(Error::domain("episode boundaries do not tile the reward sequence"));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut ret = vec![0.0; rewards.len()];
    for (k, ep) in episodes.iter().enumerate() {
        let v = &values[ep.start + k..ep.end + k + 1];
        let mut running = 0.0;
        for t in (ep.start..ep.end).rev() {
            let i = t - ep.start;
            let delta = rewards[t] + gamma * v[i + 1] - v[i];
            running = delta + gamma * lambda * running;
            adv[t] = running;
            ret[t] = running + v[i];
        }
    }
    Ok((adv, ret))
}

/// Shift and scale to zero mean and unit variance (no-op for one element).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

/// Conjugate gradient for `A x = b` with `A` given as an operator. Stops
/// once the residual norm drops to `tol` or after `iters` iterations.
pub fn conjugate_gradient(
    apply_a: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    iters: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    Ok(conjugate_gradient_trace(apply_a, b, iters, tol)?.pop().expect("initial iterate"))
}

/// Like [`conjugate_gradient`] but returns every iterate, starting from 0.
pub fn conjugate_gradient_trace(
    apply_a: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    iters: usize,
    tol: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    let mut trace = vec![x.clone()];
    for _ in 0..iters {
        if rr.sqrt() <= tol {
            break;
        }
        let ap = apply_a(&p)?;
        let pap = dot(&p, &ap);
        if !pap.is_finite() || !rr.is_finite() {
            return Err(Error::NonFinite("conjugate gradient"));
        }
        if pap <= 0.0 {
            return Err(Error::domain("conjugate gradient: operator is not positive definite"));
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        trace.push(x.clone());
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conjugate gradient"));
    }
    Ok(trace)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flattened on-policy experience for one update.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub states: Vec<EnvState>,
    /// Raw (pre-clamp) sampled actions; log-probabilities refer to these.
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub rewards: Vec<f64>,
    pub episodes: Vec<Episode>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.states.len();
        for (name, len) in [
            ("actions", self.actions.len()),
            ("rewards", self.rewards.len()),
            ("old_log_probs", self.old_log_probs.len()),
            ("advantages", self.advantages.len()),
        ] {
            if len != n {
                return Err(Error::domain(format!("batch field {name} has {len} entries, expected {n}")));
            }
        }
        Ok(())
    }

    /// Fills advantages (normalised) and returns from the current value
    /// function. Episodes end at the demonstration length, so the state
    /// after the last step is terminal.
    pub fn compute_advantages(&mut self, value: &ValueFunction, cfg: &TrpoConfig) -> Result<()> {
        let mut values = Vec::with_capacity(self.len() + self.episodes.len());
        for ep in &self.episodes {
            values.extend(self.states[ep.start..ep.end].iter().map(|s| value.value(s)));
            values.push(0.0);
        }
        let (mut adv, ret) = gae_advantages(&self.rewards, &values, &self.episodes, cfg.gamma, cfg.gae_lambda)?;
        normalize_advantages(&mut adv);
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }
}

/// Samples whole episodes of `episode_len` steps until at least
/// `cfg.steps_per_update` steps are collected. Episode `k` starts from
/// `reset(derive(seed, k))`.
pub fn collect_batch(
    policy: &GaussianPolicy,
    params: &EnvParams,
    reward_fn: &RewardFn<'_>,
    episode_len: usize,
    cfg: &TrpoConfig,
    seed: u64,
) -> Result<(RolloutBatch, Vec<Trajectory>)> {
    if episode_len == 0 {
        return Err(Error::domain("episode length must be positive"));
    }
    let n_episodes = cfg.steps_per_update.div_ceil(episode_len);
    let mut batch = RolloutBatch::default();
    let mut trajectories = Vec::with_capacity(n_episodes);
    for k in 0..n_episodes {
        let ep_seed = seed::derive(seed, k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(ep_seed, 0xac71));
        let mut state = env::reset_with(ep_seed, params);
        let start = batch.len();
        let mut steps = Vec::with_capacity(episode_len);
        for t in 0..episode_len {
            let mean = policy.mean(&state);
            let raw: [f64; ACTION_DIM] = std::array::from_fn(|d| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean[d] + policy.log_std[d].exp() * z
            });
            let action = EnvAction::from_array(raw).clamped();
            batch.rewards.push(reward_fn(t, &state, &action));
            batch.old_log_probs.push(log_prob(&mean, &policy.log_std, &raw));
            batch.states.push(state);
            batch.actions.push(raw);
            let next = env::step(&state, &action, params)?;
            steps.push((state, action));
            state = next;
        }
        batch.episodes.push(Episode { start, end: batch.len() });
        trajectories.push(Trajectory { steps, seed: ep_seed });
    }
    if batch.rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards"));
    }
    Ok((batch, trajectories))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub accepted: bool,
    /// Measured KL(old ‖ new) of the returned policy.
    pub kl: f64,
    /// Surrogate objective gain of the returned policy over the old one.
    pub surrogate_improvement: f64,
    /// Number of step shrinks before acceptance (or the limit when rejected).
    pub backtracks: usize,
    pub mean_reward: f64,
    pub value_loss: f64,
}

fn surrogate(policy: &GaussianPolicy, batch: &RolloutBatch) -> f64 {
    let n = batch.len() as f64;
    batch
        .states
        .iter()
        .zip(&batch.actions)
        .zip(batch.old_log_probs.iter().zip(&batch.advantages))
        .map(|((s, a), (lp_old, adv))| (policy.log_prob(s, a) - lp_old).exp() * adv)
        .sum::<f64>()
        / n
}

/// Gradient of the surrogate at the data-collecting policy (ratio 1).
fn surrogate_grad(policy: &GaussianPolicy, batch: &RolloutBatch) -> Result<Vec<f64>> {
    let n = batch.len() as f64;
    let var: Vec<f64> = policy.log_std.iter().map(|l| (2.0 * l).exp()).collect();
    let mut g = GradientSet::zeros_like(&policy.mean_net);
    let mut g_log_std = vec![0.0; policy.log_std.len()];
    for ((s, a), adv) in batch.states.iter().zip(&batch.actions).zip(&batch.advantages) {
        if *adv == 0.0 {
            continue;
        }
        let (mean, cache) = policy.mean_net.forward(&s.policy_input())?;
        let dmean: Vec<f64> = (0..mean.len()).map(|d| adv * (a[d] - mean[d]) / var[d] / n).collect();
        policy.mean_net.backward_into(&cache, &dmean, &mut g)?;
        for d in 0..mean.len() {
            let z2 = (a[d] - mean[d]).powi(2) / var[d];
            g_log_std[d] += adv * (z2 - 1.0) / n;
        }
    }
    let mut flat = g.to_flat();
    flat.extend(g_log_std);
    Ok(flat)
}

/// One TRPO step on `batch` (advantages must already be computed), then a
/// value-function fit to the batch returns.
pub fn trpo_update(
    policy: &GaussianPolicy,
    value: &ValueFunction,
    batch: &RolloutBatch,
    cfg: &TrpoConfig,
    seed: u64,
) -> Result<(GaussianPolicy, ValueFunction, UpdateStats)> {
    batch.check()?;
    if batch.is_empty() {
        return Err(Error::domain("empty rollout batch"));
    }
    let mut stats = UpdateStats {
        mean_reward: batch.rewards.iter().sum::<f64>() / batch.len() as f64,
        ..UpdateStats::default()
    };
    let g = surrogate_grad(policy, batch)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("surrogate gradient"));
    }
    let mut new_policy = policy.clone();
    if g.iter().any(|&v| v != 0.0) {
        let mut fvp = |v: &[f64]| fisher_vector_product(policy, &batch.states, v, cfg.cg_damping);
        let dir = conjugate_gradient(&mut fvp, &g, cfg.cg_iters, 1e-10)?;
        let shs = dot(&dir, &fvp(&dir)?);
        if !(shs.is_finite() && shs > 0.0) {
            return Err(Error::NonFinite("natural gradient curvature"));
        }
        let step_scale = (2.0 * cfg.kl_delta / shs).sqrt();
        let theta0 = policy.params_flat();
        let base = surrogate(policy, batch);
        let mut frac = 1.0;
        for k in 0..=cfg.max_backtracks {
            let candidate: Vec<f64> = theta0.iter().zip(&dir).map(|(t, d)| t + frac * step_scale * d).collect();
            let mut trial = policy.clone();
            trial.set_params_flat(&candidate)?;
            let improvement = surrogate(&trial, batch) - base;
            let kl = mean_kl(policy, &trial, &batch.states);
            if !improvement.is_finite() || !kl.is_finite() {
                return Err(Error::NonFinite("line search"));
            }
            if kl <= cfg.kl_delta && improvement > 0.0 {
                stats.accepted = true;
                stats.kl = kl;
                stats.surrogate_improvement = improvement;
                stats.backtracks = k;
                new_policy = trial;
                break;
            }
            stats.backtracks = k;
            frac *= cfg.backtrack_ratio;
        }
    }
    let mut new_value = value.clone();
    stats.value_loss = new_value.fit(&batch.states, &batch.returns, cfg, seed::derive(seed, 0x7a1))?;
    Ok((new_policy, new_value, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn gae_examples() {
        let (a, r) = gae_advantages(&[1.0], &[0.0, 0.0], &[Episode { start: 0, end: 1 }], 1.0, 0.97).unwrap();
        assert_eq!((a[0], r[0]), (1.0, 1.0));

        let rewards = [0.5, -1.0, 2.0, 0.25];
        let values = [0.3, 0.1, -0.4, 0.8, 0.0];
        let ep = [Episode { start: 0, end: 4 }];
        let (a, _) = gae_advantages(&rewards, &values, &ep, 0.9, 0.0).unwrap();
        for t in 0..4 {
            assert_eq!(a[t], rewards[t] + 0.9 * values[t + 1] - values[t]);
        }

        let (a, _) = gae_advantages(&rewards, &[0.0; 5], &ep, 1.0, 1.0).unwrap();
        for t in 0..4 {
            let suffix: f64 = rewards[t..].iter().sum();
            assert!((a[t] - suffix).abs() < 1e-12);
        }
        assert!(gae_advantages(&rewards, &[0.0; 4], &ep, 1.0, 1.0).is_err());
    }

    #[test]
    fn gae_keeps_episodes_separate() {
        let rewards = [1.0, 1.0, 1.0];
        let eps = [Episode { start: 0, end: 2 }, Episode { start: 2, end: 3 }];
        let (a, _) = gae_advantages(&rewards, &[0.0; 5], &eps, 1.0, 1.0).unwrap();
        assert_eq!(a, vec![2.0, 1.0, 1.0]);
    }

    #[test]
    fn normalized_advantages_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut adv: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..10.0)).collect();
        normalize_advantages(&mut adv);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cg_examples() {
        let b = [1.0, -2.0, 0.5];
        let mut ident = |v: &[f64]| Ok(v.to_vec());
        let trace = conjugate_gradient_trace(&mut ident, &b, 10, 1e-12).unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace[1], b.to_vec());

        let mut diag = |v: &[f64]| Ok(vec![v[0], 2.0 * v[1], 4.0 * v[2]]);
        let x = conjugate_gradient(&mut diag, &[1.0, 2.0, 4.0], 10, 1e-12).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_rejects_non_finite() {
        let mut bad = |v: &[f64]| Ok(v.iter().map(|_| f64::NAN).collect());
        assert!(conjugate_gradient(&mut bad, &[1.0, 1.0], 5, 1e-10).is_err());
    }

    fn test_states(n: usize, seed: u64) -> Vec<EnvState> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| EnvState::from_array(std::array::from_fn(|_| rng.random_range(-2.0..2.0))))
            .collect()
    }

    fn perturbed(policy: &GaussianPolicy, seed: u64, scale: f64) -> GaussianPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = policy.clone();
        let flat: Vec<f64> = policy.params_flat().iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
        p.set_params_flat(&flat).unwrap();
        p
    }

    #[test]
    fn kl_examples() {
        let policy = perturbed(&GaussianPolicy::new(1, -0.3).unwrap(), 9, 0.1);
        let states = test_states(20, 2);
        assert_eq!(mean_kl(&policy, &policy, &states), 0.0);

        let per_dim = gaussian_kl(&[0.4], &[0.1], &[0.4], &[0.1 + 2f64.ln()]);
        assert!((per_dim - 0.31815).abs() < 5e-6, "{per_dim}");
        assert!((per_dim - (2f64.ln() + 0.125 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // KL(p ‖ q) = E_p[log p - log q], estimated with 10^6 samples.
        let (mo, so, mn, sn) = ([0.3, -0.5], [-0.2, 0.4], [0.1, 0.2], [0.1, 0.0]);
        let closed = gaussian_kl(&mo, &so, &mn, &sn);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let x: Vec<f64> = (0..2)
                .map(|d| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mo[d] + so[d].exp() * z
                })
                .collect();
            let v = log_prob(&mo, &so, &x) - log_prob(&mn, &sn, &x);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - closed).abs() < 3.0 * se, "mc {mean} closed {closed} se {se}");
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let old = GaussianPolicy::new(3, -0.5).unwrap();
        let new = perturbed(&old, 4, 0.05);
        let states = test_states(6, 5);
        let g = mean_kl_grad(&old, &new, &states);
        let base = new.params_flat();
        let eps = 1e-5;
        for i in (0..base.len()).step_by(97).chain(base.len() - 2..base.len()) {
            let eval = |s: f64| {
                let mut p = new.clone();
                let mut f = base.clone();
                f[i] += s;
                p.set_params_flat(&f).unwrap();
                mean_kl(&old, &p, &states)
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn fvp_matches_differentiated_kl_gradient() {
        // H v ≈ (∇KL(θ + εv) - ∇KL(θ - εv)) / 2ε at θ_new = θ_old.
        let policy = perturbed(&GaussianPolicy::new(6, -0.4).unwrap(), 7, 0.05);
        let states = test_states(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..policy.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hv = fisher_vector_product(&policy, &states, &v, 0.0).unwrap();
        let eps = 1e-5;
        let shifted = |s: f64| {
            let mut p = policy.clone();
            let f: Vec<f64> = policy.params_flat().iter().zip(&v).map(|(a, b)| a + s * b).collect();
            p.set_params_flat(&f).unwrap();
            mean_kl_grad(&policy, &p, &states)
        };
        let (up, down) = (shifted(eps), shifted(-eps));
        let scale = hv.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for i in 0..hv.len() {
            let fd = (up[i] - down[i]) / (2.0 * eps);
            assert!((fd - hv[i]).abs() < 1e-5 * scale.max(1.0), "param {i}: fd {fd} fvp {}", hv[i]);
        }
    }

    #[test]
    fn fvp_is_linear_and_positive_definite() {
        let policy = GaussianPolicy::new(10, -0.5).unwrap();
        let states = test_states(10, 11);
        let n = policy.num_params();
        let zero = fisher_vector_product(&policy, &states, &vec![0.0; n], 0.1).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut rand_vec = || -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (v1, v2) = (rand_vec(), rand_vec());
        let sum: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
        let f1 = fisher_vector_product(&policy, &states, &v1, 0.1).unwrap();
        let f2 = fisher_vector_product(&policy, &states, &v2, 0.1).unwrap();
        let fs = fisher_vector_product(&policy, &states, &sum, 0.1).unwrap();
        for i in 0..n {
            assert!((fs[i] - f1[i] - f2[i]).abs() < 1e-8);
        }
        for _ in 0..50 {
            let v = rand_vec();
            let fv = fisher_vector_product(&policy, &states, &v, 0.1).unwrap();
            assert!(dot(&v, &fv) > 0.0);
        }
        assert!(fisher_vector_product(&policy, &states, &[1.0], 0.1).is_err());
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let policy = GaussianPolicy::new(1, 0.0).unwrap();
        let value = ValueFunction::new(2).unwrap();
        let p = EnvParams::default();
        let cfg = TrpoConfig {
            steps_per_update: 50,
            ..TrpoConfig::default()
        };
        let (mut batch, _) = collect_batch(&policy, &p, &|_, _, _| 0.0, 50, &cfg, 3).unwrap();
        batch.compute_advantages(&value, &cfg).unwrap();
        batch.advantages.iter_mut().for_each(|a| *a = 0.0);
        let (new_policy, _, stats) = trpo_update(&policy, &value, &batch, &cfg, 4).unwrap();
        assert_eq!(new_policy, policy);
        assert!(!stats.accepted);
    }

    #[test]
    fn bandit_mean_converges_to_optimum() {
        // Single state, reward -(a - 0.5)² on the torque channel.
        let mut policy = GaussianPolicy::new(21, -0.5).unwrap();
        let mut value = ValueFunction::new(22).unwrap();
        let cfg = TrpoConfig::default();
        let state = env::nominal_state(&EnvParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for u in 0..50 {
            let n = 256;
            let mut batch = RolloutBatch::default();
            for i in 0..n {
                let raw = policy.sample(&state, &mut rng);
                let a = EnvAction::from_array(raw).clamped();
                batch.rewards.push(-(a.torque - 0.5).powi(2) - a.thrust.powi(2));
                batch.old_log_probs.push(policy.log_prob(&state, &raw));
                batch.states.push(state);
                batch.actions.push(raw);
                batch.episodes.push(Episode { start: i, end: i + 1 });
            }
            batch.compute_advantages(&value, &cfg).unwrap();
            let (p, v, stats) = trpo_update(&policy, &value, &batch, &cfg, u).unwrap();
            if stats.accepted {
                assert!(stats.kl <= cfg.kl_delta && stats.surrogate_improvement > 0.0);
            }
            policy = p;
            value = v;
        }
        let m = policy.mean(&state);
        assert!((m[0] - 0.5).abs() < 0.05, "torque mean {}", m[0]);
    }

    #[test]
    fn collection_is_deterministic() {
        let policy = GaussianPolicy::new(1, 0.0).unwrap();
        let p = EnvParams::default();
        let cfg = TrpoConfig {
            steps_per_update: 100,
            ..TrpoConfig::default()
        };
        let reward = |_: usize, s: &EnvState, a: &EnvAction| env::backflip_reward(s, a, &p);
        let (a, ta) = collect_batch(&policy, &p, &reward, 40, &cfg, 5).unwrap();
        let (b, tb) = collect_batch(&policy, &p, &reward, 40, &cfg, 5).unwrap();
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(ta, tb);
        assert_eq!(a.len(), 120);
        assert_eq!(a.episodes.len(), 3);
    }
}
