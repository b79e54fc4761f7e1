//! Cart-pole swing-up with randomized starts.
//!
//! Uniform rod of full length `l` hinged on a cart; `theta = 0` is upright. The episode
//! ends after `max_steps` or when the cart leaves `[-x_limit, x_limit]`.

use serde::{Deserialize, Serialize};

use crate::numerics::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartpoleConfig {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub gravity: f64,
    pub force_mag: f64,
    /// Viscous friction on the cart.
    pub friction: f64,
    pub dt: f64,
    pub substeps: usize,
    pub x_limit: f64,
    pub max_steps: usize,
    /// Width of the Gaussian position term of the reward.
    pub reward_sigma_x: f64,
}

impl Default for CartpoleConfig {
    fn default() -> Self {
        Self {
            cart_mass: 0.5,
            pole_mass: 0.5,
            pole_length: 0.6,
            gravity: 9.82,
            force_mag: 10.0,
            friction: 0.1,
            dt: 0.01,
            substeps: 2,
            x_limit: 2.4,
            max_steps: 1000,
            reward_sigma_x: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartpoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub step_count: usize,
}

impl CartpoleState {
    /// `[x, ẋ, cos θ, sin θ, θ̇]`.
    pub fn observation(&self) -> [f64; 5] {
        [
            self.x,
            self.x_dot,
            self.theta.cos(),
            self.theta.sin(),
            self.theta_dot,
        ]
    }
}

/// Randomized start: `x ~ U(−2.2, 2.2)`, `ẋ ~ U(−3, 3)`, `θ ~ U(−π, π)`, `θ̇ ~ U(−3, 3)`.
pub fn cartpole_reset(rng: &mut SeededRng) -> CartpoleState {
    use std::f64::consts::PI;
    CartpoleState {
        x: rng.uniform(-2.2, 2.2),
        x_dot: rng.uniform(-3.0, 3.0),
        theta: rng.uniform(-PI, PI),
        theta_dot: rng.uniform(-3.0, 3.0),
        step_count: 0,
    }
}

pub fn cartpole_reward(cfg: &CartpoleConfig, state: &CartpoleState) -> f64 {
    let s = cfg.reward_sigma_x;
    0.5 * (1.0 + state.theta.cos()) * (-state.x * state.x / (2.0 * s * s)).exp()
}

/// Advances one control step. Returns `(reward, done)`; the reward is computed on the
/// post-step state.
pub fn cartpole_step(cfg: &CartpoleConfig, state: &mut CartpoleState, action: f64) -> (f64, bool) {
    let a = if action.is_finite() {
        action.clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let force = a * cfg.force_mag;
    let m = cfg.pole_mass;
    let l = cfg.pole_length;
    let total = cfg.cart_mass + m;
    let h = cfg.dt / cfg.substeps as f64;
    for _ in 0..cfg.substeps {
        let (s, c) = state.theta.sin_cos();
        let w2 = state.theta_dot * state.theta_dot;
        let drive = force - cfg.friction * state.x_dot;
        let x_acc = (-2.0 * m * l * w2 * s + 3.0 * m * cfg.gravity * s * c + 4.0 * drive)
            / (4.0 * total - 3.0 * m * c * c);
        let theta_acc = (-3.0 * m * l * w2 * s * c + 6.0 * total * cfg.gravity * s + 6.0 * drive * c)
            / (4.0 * l * total - 3.0 * m * l * c * c);
        state.x_dot += x_acc * h;
        state.theta_dot += theta_acc * h;
        state.x += state.x_dot * h;
        state.theta += state.theta_dot * h;
    }
    state.step_count += 1;
    let reward = cartpole_reward(cfg, state);
    let done = state.step_count >= cfg.max_steps || state.x.abs() > cfg.x_limit;
    (reward, done)
}

#[derive(Clone, Debug)]
pub struct Cartpole {
    pub config: CartpoleConfig,
    pub state: CartpoleState,
    done: bool,
}

impl Cartpole {
    pub fn new(config: CartpoleConfig) -> Self {
        Self {
            config,
            state: CartpoleState {
                x: 0.0,
                x_dot: 0.0,
                theta: 0.0,
                theta_dot: 0.0,
                step_count: 0,
            },
            done: false,
        }
    }

    pub fn reset(&mut self, seed: u64) {
        let mut rng = SeededRng::new(seed);
        self.state = cartpole_reset(&mut rng);
        self.done = false;
    }

    pub fn step(&mut self, action: f64) -> (f64, bool) {
        let (r, d) = cartpole_step(&self.config, &mut self.state, action);
        self.done = d;
        (r, d)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64, theta: f64) -> CartpoleState {
        CartpoleState {
            x,
            x_dot: 0.0,
            theta,
            theta_dot: 0.0,
            step_count: 0,
        }
    }

    #[test]
    fn upright_reward_is_one() {
        let cfg = CartpoleConfig::default();
        assert_eq!(cartpole_reward(&cfg, &at(0.0, 0.0)), 1.0);
        let mut s = at(0.0, 0.0);
        let (r, done) = cartpole_step(&cfg, &mut s, 0.0);
        assert_eq!(r, 1.0);
        assert!(!done);
    }

    #[test]
    fn hanging_reward_is_zero() {
        let cfg = CartpoleConfig::default();
        assert!(cartpole_reward(&cfg, &at(0.0, std::f64::consts::PI)) < 1e-15);
    }

    #[test]
    fn leaves_track_ends_episode() {
        let cfg = CartpoleConfig::default();
        let mut s = at(2.39, std::f64::consts::PI);
        s.x_dot = 3.0;
        let (_, done) = cartpole_step(&cfg, &mut s, 1.0);
        assert!(done);
    }

    #[test]
    fn nan_action_treated_as_zero() {
        let cfg = CartpoleConfig::default();
        let mut a = at(0.3, 1.0);
        let mut b = a;
        cartpole_step(&cfg, &mut a, f64::NAN);
        cartpole_step(&cfg, &mut b, 0.0);
        assert_eq!(a, b);
    }
}
