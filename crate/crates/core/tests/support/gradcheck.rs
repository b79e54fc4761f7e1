//! Central finite-difference oracle for tape gradients.

use pinn_core::numerics::{RealMat, Tape, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor for gradients that are both ~0.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn loss_value(params: &[RealMat], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).get(0, 0)
}

/// Largest relative error between tape gradients and central differences. At most
/// `max_entries` coordinates per parameter are probed (evenly strided).
pub fn max_rel_error(
    params: &[RealMat],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    max_entries: usize,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.grad(loss).expect("gradient");

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let g = grads.get(vars[pi]).expect("param gradient");
        let stride = (p.len() / max_entries.max(1)).max(1);
        for idx in (0..p.len()).step_by(stride) {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[idx] += FD_STEP;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[idx] -= FD_STEP;
            let numeric =
                (loss_value(&plus, build) - loss_value(&minus, build)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[idx], numeric));
        }
    }
    worst
}
