//! Planar hopper: a torso with a telescoping leg, a reaction torque about
//! the torso, and thrust along the body axis while the foot is planted.
//! Ground contact is a penalty spring-damper at the foot and at the torso's
//! contact circle.
//!
//! Conventions: `y` is up, the ground is the line `y = 0`, and `theta` is
//! measured clockwise from upright so that a backward rotation (head moving
//! toward `-x`) decreases `theta`. `theta` is never wrapped.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 8;
pub const ACTION_DIM: usize = 2;

/// Component names in `EnvState::to_array` order.
pub const STATE_NAMES: [&str; STATE_DIM] = ["x", "y", "theta", "vx", "vy", "omega", "leg", "leg_vel"];

/// Half-width of the uniform perturbation applied by [`reset`].
pub const RESET_NOISE: f64 = 0.005;

/// Fixed per-component divisors bringing states to roughly unit scale
/// before they enter a network.
pub const STATE_SCALE: [f64; STATE_DIM] = [5.0, 1.0, 10.0, 5.0, 5.0, 10.0, 0.5, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
    pub leg: f64,
    pub leg_vel: f64,
}

impl EnvState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.x,
            self.y,
            self.theta,
            self.vx,
            self.vy,
            self.omega,
            self.leg,
            self.leg_vel,
        ]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            theta: a[2],
            vx: a[3],
            vy: a[4],
            omega: a[5],
            leg: a[6],
            leg_vel: a[7],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Network input form of the state (see [`STATE_SCALE`]).
    pub fn scaled(&self) -> [f64; STATE_DIM] {
        let a = self.to_array();
        std::array::from_fn(|i| a[i] / STATE_SCALE[i])
    }

    /// Policy and value network input: like [`EnvState::scaled`] but with
    /// the heading wrapped to (-π, π] and divided by π, so that behaviour
    /// learned in one rotation carries over to the next.
    pub fn policy_input(&self) -> [f64; STATE_DIM] {
        let mut a = self.scaled();
        a[2] = wrap_angle(self.theta) / PI;
        a
    }

    /// Unit vector from the foot toward the torso.
    pub fn body_axis(&self) -> (f64, f64) {
        (self.theta.sin(), self.theta.cos())
    }

    pub fn foot(&self) -> (f64, f64) {
        let (ux, uy) = self.body_axis();
        (self.x - self.leg * ux, self.y - self.leg * uy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvAction {
    pub torque: f64,
    pub thrust: f64,
}

impl EnvAction {
    pub fn new(torque: f64, thrust: f64) -> Self {
        Self { torque, thrust }
    }

    /// Both components clamped to `[-1, 1]`. NaN commands are treated as 0.
    pub fn clamped(&self) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Self {
            torque: c(self.torque),
            thrust: c(self.thrust),
        }
    }

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [self.torque, self.thrust]
    }

    pub fn from_array(a: [f64; ACTION_DIM]) -> Self {
        Self {
            torque: a[0],
            thrust: a[1],
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.torque * self.torque + self.thrust * self.thrust
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub dt: f64,
    pub g: f64,
    pub mass: f64,
    pub inertia: f64,
    pub leg_min: f64,
    pub leg_max: f64,
    /// Rest extension of the leg spring.
    pub leg_rest: f64,
    pub leg_stiffness: f64,
    pub leg_damping: f64,
    /// Extension acceleration per unit thrust command.
    pub leg_gain: f64,
    pub torque_max: f64,
    pub thrust_max: f64,
    pub ground_stiffness: f64,
    pub ground_damping: f64,
    pub friction: f64,
    /// Radius of the torso's contact circle about its centre.
    pub torso_radius: f64,
    pub y_alive_max: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            dt: 1.0 / 30.0,
            g: 9.81,
            mass: 1.0,
            inertia: 0.2,
            leg_min: 0.15,
            leg_max: 0.7,
            leg_rest: 0.5,
            leg_stiffness: 100.0,
            leg_damping: 10.0,
            leg_gain: 40.0,
            torque_max: 0.25,
            thrust_max: 25.0,
            ground_stiffness: 500.0,
            ground_damping: 10.0,
            friction: 0.8,
            torso_radius: 0.1,
            y_alive_max: 3.0,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("mass", self.mass),
            ("inertia", self.inertia),
            ("leg_min", self.leg_min),
            ("leg_max", self.leg_max),
            ("torque_max", self.torque_max),
            ("thrust_max", self.thrust_max),
            ("ground_stiffness", self.ground_stiffness),
            ("ground_damping", self.ground_damping),
            ("y_alive_max", self.y_alive_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.leg_min >= self.leg_max || !(self.leg_min..=self.leg_max).contains(&self.leg_rest) {
            return Err(Error::Config(
                "leg limits must satisfy leg_min <= leg_rest <= leg_max with leg_min < leg_max".into(),
            ));
        }
        Ok(())
    }

    pub fn is_alive(&self, state: &EnvState) -> bool {
        (0.0..=self.y_alive_max).contains(&state.y)
    }

    /// Torso height with the leg at rest extension, standing upright in
    /// static equilibrium on the foot spring.
    pub fn standing_height(&self) -> f64 {
        self.leg_rest - self.mass * self.g / self.ground_stiffness
    }
}

/// Penalty spring-damper contact for a point at height `py` moving with
/// velocity `v`. Returns the force on the torso, or `None` when the point is
/// above ground.
fn contact_force(p: &EnvParams, py: f64, v: (f64, f64)) -> Option<(f64, f64)> {
    if py >= 0.0 {
        return None;
    }
    let depth = -py;
    let normal = (p.ground_stiffness * depth - p.ground_damping * v.1).max(0.0);
    // Friction is capped both by the Coulomb cone and by the force that would
    // cancel the tangential slip within one step.
    let cancel = v.0.abs() * p.mass / p.dt;
    let tangent = -v.0.signum() * (p.friction * normal).min(cancel);
    Some((tangent, normal))
}

/// Advance the hopper by one control step of `params.dt` seconds.
pub fn step(state: &EnvState, action: &EnvAction, params: &EnvParams) -> Result<EnvState> {
    if !state.is_finite() {
        return Err(Error::domain(format!("non-finite state passed to step: {state:?}")));
    }
    let a = action.clamped();
    let p = params;
    let (ux, uy) = state.body_axis();
    let s = state;

    let mut fx = 0.0;
    let mut fy = -p.mass * p.g;
    // Clockwise torque about the torso centre.
    let torque = a.torque * p.torque_max;

    // Rotation is clockwise-positive, so a point at offset r from the centre
    // moves with (omega * r.y, -omega * r.x).
    let (rx, ry) = (-s.leg * ux, -s.leg * uy);
    let foot_v = (
        s.vx + s.omega * ry - s.leg_vel * ux,
        s.vy - s.omega * rx - s.leg_vel * uy,
    );
    // The leg is a prismatic strut: it transmits only the axial part of the
    // ground force, which acts through the torso centre and so exerts no
    // torque. Spin therefore comes from the body torque alone.
    if let Some((cx, cy)) = contact_force(p, s.y + ry, foot_v) {
        let axial = (cx * ux + cy * uy).max(0.0) + a.thrust * p.thrust_max;
        fx += axial * ux;
        fy += axial * uy;
    }
    // The torso also rests on the ground when the hopper topples.
    if let Some((cx, cy)) = contact_force(p, s.y - p.torso_radius, (s.vx, s.vy)) {
        fx += cx;
        fy += cy;
    }

    let leg_acc = p.leg_stiffness * (p.leg_rest - s.leg) - p.leg_damping * s.leg_vel + p.leg_gain * a.thrust;

    let vx = s.vx + fx / p.mass * p.dt;
    let vy = s.vy + fy / p.mass * p.dt;
    let omega = s.omega + torque / p.inertia * p.dt;
    let mut leg_vel = s.leg_vel + leg_acc * p.dt;
    let mut leg = s.leg + leg_vel * p.dt;
    if leg <= p.leg_min {
        leg = p.leg_min;
        leg_vel = leg_vel.max(0.0);
    } else if leg >= p.leg_max {
        leg = p.leg_max;
        leg_vel = leg_vel.min(0.0);
    }

    let next = EnvState {
        x: s.x + vx * p.dt,
        y: s.y + vy * p.dt,
        theta: s.theta + omega * p.dt,
        vx,
        vy,
        omega,
        leg,
        leg_vel,
    };
    if !next.is_finite() {
        return Err(Error::NonFinite("hopper dynamics"));
    }
    Ok(next)
}

/// Nominal standing pose before perturbation.
pub fn nominal_state(params: &EnvParams) -> EnvState {
    EnvState {
        x: 0.0,
        y: params.standing_height(),
        theta: 0.0,
        vx: 0.0,
        vy: 0.0,
        omega: 0.0,
        leg: params.leg_rest,
        leg_vel: 0.0,
    }
}

/// Standing at rest on the ground with every field perturbed uniformly
/// within `±RESET_NOISE`.
pub fn reset(seed: u64) -> EnvState {
    reset_with(seed, &EnvParams::default())
}

pub fn reset_with(seed: u64, params: &EnvParams) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = nominal_state(params).to_array();
    for v in a.iter_mut() {
        *v += rng.random_range(-RESET_NOISE..=RESET_NOISE);
    }
    EnvState::from_array(a)
}

/// Hand-coded per-step reward for spinning backward while alive.
pub fn backflip_reward(state: &EnvState, action: &EnvAction, params: &EnvParams) -> f64 {
    (-state.omega).clamp(-10.0, 10.0) + alive_bonus(state, params) - 0.05 * action.norm_sq()
}

/// Hand-coded per-step reward for forward travel while alive.
pub fn hop_reward(state: &EnvState, action: &EnvAction, params: &EnvParams) -> f64 {
    state.vx + alive_bonus(state, params) - 0.05 * action.norm_sq()
}

fn alive_bonus(state: &EnvState, params: &EnvParams) -> f64 {
    if params.is_alive(state) {
        1.0
    } else {
        0.0
    }
}

/// A sequence of visited states with the (clamped) action taken in each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(EnvState, EnvAction)>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &EnvState> + '_ {
        self.steps.iter().map(|(s, _)| s)
    }

    /// Re-simulates every transition and checks each stored successor.
    pub fn replays_exactly(&self, params: &EnvParams) -> bool {
        self.steps.windows(2).all(|w| match step(&w[0].0, &w[0].1, params) {
            Ok(next) => next == w[1].0,
            Err(_) => false,
        })
    }
}

/// Completed backward rotations between the first and last state.
pub fn count_backflips(traj: &Trajectory) -> Result<u32> {
    let first = traj
        .steps
        .first()
        .ok_or_else(|| Error::domain("count_backflips on an empty trajectory"))?;
    let last = traj.steps.last().expect("non-empty");
    Ok(count_rotations(first.0.theta, last.0.theta))
}

/// Angle in (-π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

pub(crate) fn count_rotations(theta_first: f64, theta_last: f64) -> u32 {
    ((theta_first - theta_last).max(0.0) / TAU).floor() as u32
}

/// Anything that maps a state to an action command.
pub trait Controller {
    fn act(&self, state: &EnvState, rng: &mut ChaCha8Rng) -> EnvAction;
}

impl<F> Controller for F
where
    F: Fn(&EnvState) -> EnvAction,
{
    fn act(&self, state: &EnvState, _rng: &mut ChaCha8Rng) -> EnvAction {
        self(state)
    }
}

/// Per-step reward given the step index, the state acted in and the
/// effective action.
pub type RewardFn<'a> = dyn Fn(usize, &EnvState, &EnvAction) -> f64 + 'a;

/// Run `controller` for `n_steps` from `reset(seed)`. Action noise is drawn
/// from a generator derived from the same seed, so equal seeds give equal
/// trajectories.
pub fn rollout(
    controller: &dyn Controller,
    params: &EnvParams,
    reward_fn: &RewardFn<'_>,
    n_steps: usize,
    seed: u64,
) -> Result<(Trajectory, Vec<f64>)> {
    if n_steps == 0 {
        return Err(Error::domain("rollout needs n_steps >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = reset_with(seed, params);
    let mut steps = Vec::with_capacity(n_steps);
    let mut rewards = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        let action = controller.act(&state, &mut rng).clamped();
        rewards.push(reward_fn(t, &state, &action));
        let next = step(&state, &action, params)?;
        steps.push((state, action));
        state = next;
    }
    Ok((Trajectory { steps, seed }, rewards))
}
