//! In-browser playground for the hopper and the rating pipeline.
//!
//! Three operations are exported to JavaScript: simulate a rollout and
//! rasterize it, rate a perturbed copy of a rollout with the scripted
//! oracle, and map a 5-class rating distribution to a reward. The plain
//! Rust functions carry the logic so they can be tested natively.

use wasm_bindgen::prelude::*;

use clipmimic::env::{rollout, EnvAction, EnvParams, EnvState, Trajectory};
use clipmimic::feedback::{OracleConfig, RandomController};
use clipmimic::nn::N_CLASSES;
use clipmimic::render::{rasterize, Viewport, FRAME_SIZE};
use clipmimic::simpred::{expected_rating, reward_from_rating};

/// Rollout with a constant action, or uniform random actions when
/// `random` is set.
pub fn simulate(seed: u64, steps: usize, torque: f64, thrust: f64, random: bool) -> Result<Trajectory, String> {
    let params = EnvParams::default();
    let zero = |_: usize, _: &EnvState, _: &EnvAction| 0.0;
    let result = if random {
        rollout(&RandomController, &params, &zero, steps, seed)
    } else {
        let a = EnvAction::new(torque, thrust);
        rollout(&move |_: &EnvState| a, &params, &zero, steps, seed)
    };
    result.map(|(t, _)| t).map_err(|e| e.to_string())
}

/// Concatenated `FRAME_SIZE`² grayscale frames of a trajectory.
pub fn render_frames(traj: &Trajectory) -> Vec<u8> {
    let view = Viewport::default();
    traj.steps.iter().flat_map(|(s, _)| rasterize(s, &view).pixels).collect()
}

/// Oracle rating of `traj` against itself with `offset` added to the
/// height and `angle` added to the orientation of every state.
pub fn perturbed_rating(traj: &Trajectory, offset: f64, angle: f64) -> Result<u8, String> {
    let demo: Vec<EnvState> = traj.states().copied().collect();
    let agent: Vec<EnvState> = demo
        .iter()
        .map(|s| {
            let mut a = s.to_array();
            a[1] += offset;
            a[2] += angle;
            EnvState::from_array(a)
        })
        .collect();
    clipmimic::feedback::oracle_rate(&demo, &agent, &OracleConfig::default()).map_err(|e| e.to_string())
}

/// (expected rating, reward) of a rating distribution over 1..=5.
pub fn rating_reward(dist: &[f64]) -> Result<(f64, f64), String> {
    let d: [f64; N_CLASSES] = dist.try_into().map_err(|_| format!("expected {N_CLASSES} probabilities, got {}", dist.len()))?;
    let r = expected_rating(&d).map_err(|e| e.to_string())?;
    Ok((r, reward_from_rating(&d).map_err(|e| e.to_string())?))
}

#[wasm_bindgen]
pub fn frame_size() -> usize {
    FRAME_SIZE
}

/// Frames of a simulated rollout, `frame_size()`² bytes each.
#[wasm_bindgen(js_name = simulateFrames)]
pub fn simulate_frames(seed: u32, steps: u32, torque: f64, thrust: f64, random: bool) -> Result<Vec<u8>, JsError> {
    let t = simulate(seed as u64, steps as usize, torque, thrust, random).map_err(|e| JsError::new(&e))?;
    Ok(render_frames(&t))
}

#[wasm_bindgen(js_name = rateOffset)]
pub fn rate_offset(seed: u32, steps: u32, offset: f64, angle: f64) -> Result<u8, JsError> {
    let t = simulate(seed as u64, steps as usize, 0.0, 0.0, true).map_err(|e| JsError::new(&e))?;
    perturbed_rating(&t, offset, angle).map_err(|e| JsError::new(&e))
}

/// `[expected rating, reward]`.
#[wasm_bindgen(js_name = ratingReward)]
pub fn rating_reward_js(dist: &[f64]) -> Result<Vec<f64>, JsError> {
    let (r, w) = rating_reward(dist).map_err(|e| JsError::new(&e))?;
    Ok(vec![r, w])
}
