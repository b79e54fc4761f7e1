//! Small student fixtures for loss gradient checks.

use pinn_core::agents::{AgentConfig, MinipongHeadConfig, PiMinipongConfig};
use pinn_core::attention::{ObservationSet, VisualConfig};
use pinn_core::numerics::{RealMat, SeededRng, Tape, Var};

/// Scaled-down visual student for 4×4 frames split into 2×2 patches.
pub fn tiny_visual() -> AgentConfig {
    AgentConfig::PiMinipong(PiMinipongConfig {
        layer: VisualConfig {
            num_latents: 4,
            pe_dim: 4,
            attn_dim: 4,
            latent_dim: 3,
            patch: 2,
            frames: 2,
            num_actions: 3,
        },
        head: MinipongHeadConfig {
            conv1_channels: 2,
            conv1_kernel: 1,
            conv1_stride: 1,
            conv2_channels: 2,
            conv2_kernel: 2,
            conv2_stride: 1,
            hidden: 4,
        },
    })
}

pub fn param_values(params: &[Var], tape: &Tape) -> Vec<RealMat> {
    params.iter().map(|&v| tape.value(v).clone()).collect()
}

pub fn random_patches(rng: &mut SeededRng, n: usize, width: usize) -> ObservationSet {
    let rows = RealMat::from_fn(n, width, |_, _| if rng.coin() { 1.0 } else { 0.0 });
    ObservationSet::from_rows(rows).unwrap()
}
