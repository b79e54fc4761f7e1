//! Grayscale frames for replays.

use pinn_core::envs::{unpatchify, CartpoleConfig, EnvConfig};
use pinn_core::numerics::RealMat;
use pinn_core::attention::ObservationSet;

const HEIGHT: usize = 96;
const WIDTH: usize = 192;
const TRACK_ROW: usize = 64;

/// Side view of the cart-pole from an unshuffled `[x, ẋ, cos θ, sin θ, θ̇]` observation.
/// Track at half intensity, cart and pole at full.
pub fn cartpole_frame(cfg: &CartpoleConfig, obs: &[f64]) -> RealMat {
    let mut img = RealMat::zeros(HEIGHT, WIDTH);
    let span = if cfg.x_limit.is_finite() { cfg.x_limit } else { 2.4 } + cfg.pole_length;
    let scale = WIDTH as f64 / (2.0 * span);
    let to_col = |x: f64| ((x + span) * scale).round() as i64;
    let mut put = |r: i64, c: i64, v: f64| {
        if (0..HEIGHT as i64).contains(&r) && (0..WIDTH as i64).contains(&c) {
            img.set(r as usize, c as usize, v);
        }
    };
    for c in 0..WIDTH as i64 {
        put(TRACK_ROW as i64 + 5, c, 0.5);
    }
    let (x, cos, sin) = (obs[0], obs[2], obs[3]);
    let cart = to_col(x);
    for dr in -4..=4 {
        for dc in -10..=10 {
            put(TRACK_ROW as i64 + dr, cart + dc, 1.0);
        }
    }
    // θ = 0 is upright; the tip sits at x − l·sin θ.
    let len = cfg.pole_length * scale;
    for k in 0..=200 {
        let s = k as f64 / 200.0 * len;
        let r = TRACK_ROW as f64 - 4.0 - s * cos;
        let c = cart as f64 - s * sin;
        put(r.round() as i64, c.round() as i64, 1.0);
    }
    img
}

/// Frame for one step of a trace, from the unperturbed observation.
pub fn frame(env: &EnvConfig, raw: &ObservationSet) -> anyhow::Result<RealMat> {
    match env {
        EnvConfig::Cartpole(cfg) => {
            let obs: Vec<f64> = (0..raw.len()).map(|i| raw.component(i)[0]).collect();
            Ok(cartpole_frame(cfg, &obs))
        }
        EnvConfig::Minipong(cfg) => Ok(unpatchify(
            raw,
            cfg.size,
            cfg.size,
            cfg.patch,
            cfg.frames,
            cfg.frames - 1,
        )?),
    }
}
