//! Randomized scalar-loss instances exercising each tape primitive.

use pinn_core::numerics::{ConvGeom, RealMat, SeededRng, Tape, Var};

pub type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct Case {
    pub name: &'static str,
    pub params: Vec<RealMat>,
    pub build: Builder,
}

pub fn rand_mat(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> RealMat {
    RealMat::from_fn(rows, cols, |_, _| rng.uniform(-scale, scale))
}

/// Entries with magnitude in `[0.05, scale]`, away from the ReLU kink.
fn rand_away_from_zero(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> RealMat {
    RealMat::from_fn(rows, cols, |_, _| {
        let m = rng.uniform(0.05, scale);
        if rng.coin() {
            m
        } else {
            -m
        }
    })
}

pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();

    let t_mm = rand_mat(&mut rng, 3, 2, 1.0);
    out.push(Case {
        name: "matmul",
        params: vec![rand_mat(&mut rng, 3, 4, 1.0), rand_mat(&mut rng, 4, 2, 1.0)],
        build: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1]);
            let target = t.constant(t_mm.clone());
            t.mse(y, target)
        }),
    });

    let t_mmt = rand_mat(&mut rng, 3, 5, 1.0);
    out.push(Case {
        name: "matmul_t",
        params: vec![rand_mat(&mut rng, 3, 4, 1.0), rand_mat(&mut rng, 5, 4, 1.0)],
        build: Box::new(move |t, v| {
            let y = t.matmul_t(v[0], v[1]);
            let target = t.constant(t_mmt.clone());
            t.mse(y, target)
        }),
    });

    let t_add = rand_mat(&mut rng, 3, 3, 1.0);
    out.push(Case {
        name: "add",
        params: vec![
            rand_mat(&mut rng, 3, 3, 1.0),
            rand_mat(&mut rng, 3, 3, 1.0),
            rand_mat(&mut rng, 1, 3, 1.0),
        ],
        build: Box::new(move |t, v| {
            let s = t.add(v[0], v[1]);
            let y = t.add_bias(s, v[2]);
            let target = t.constant(t_add.clone());
            t.mse(y, target)
        }),
    });

    let t_mul = rand_mat(&mut rng, 2, 4, 1.0);
    out.push(Case {
        name: "mul",
        params: vec![rand_mat(&mut rng, 2, 4, 1.5), rand_mat(&mut rng, 2, 4, 1.5)],
        build: Box::new(move |t, v| {
            let y = t.mul(v[0], v[1]);
            let target = t.constant(t_mul.clone());
            t.mse(y, target)
        }),
    });

    for (name, which) in [("tanh", 0), ("sigmoid", 1), ("relu", 2)] {
        let target = rand_mat(&mut rng, 3, 3, 1.0);
        let x = rand_away_from_zero(&mut rng, 3, 3, 2.0);
        out.push(Case {
            name,
            params: vec![x],
            build: Box::new(move |t, v| {
                let y = match which {
                    0 => t.tanh(v[0]),
                    1 => t.sigmoid(v[0]),
                    _ => t.relu(v[0]),
                };
                let tg = t.constant(target.clone());
                t.mse(y, tg)
            }),
        });
    }

    let t_sm = rand_mat(&mut rng, 3, 5, 0.5);
    out.push(Case {
        name: "softmax_rows",
        params: vec![rand_mat(&mut rng, 3, 5, 2.0)],
        build: Box::new(move |t, v| {
            let y = t.softmax_rows(v[0]);
            let target = t.constant(t_sm.clone());
            t.mse(y, target)
        }),
    });

    let t_ln = rand_mat(&mut rng, 2, 6, 1.0);
    out.push(Case {
        name: "layer_norm_rows",
        params: vec![rand_mat(&mut rng, 2, 6, 2.0)],
        build: Box::new(move |t, v| {
            let y = t.layer_norm_rows(v[0], 1e-5);
            let target = t.constant(t_ln.clone());
            t.mse(y, target)
        }),
    });

    let geom = ConvGeom {
        in_h: 5,
        in_w: 5,
        in_c: 2,
        out_c: 3,
        kernel: 3,
        stride: 2,
    };
    let t_conv = rand_mat(&mut rng, 4, 3, 1.0);
    out.push(Case {
        name: "conv2d",
        params: vec![
            rand_mat(&mut rng, 25, 2, 1.0),
            rand_mat(&mut rng, 18, 3, 0.5),
            rand_mat(&mut rng, 1, 3, 0.5),
        ],
        build: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], geom);
            let target = t.constant(t_conv.clone());
            t.mse(y, target)
        }),
    });

    let t_lstm = rand_mat(&mut rng, 3, 8, 0.5);
    out.push(Case {
        name: "lstm_cell",
        params: vec![
            rand_mat(&mut rng, 3, 2, 1.0),  // x
            rand_mat(&mut rng, 3, 4, 0.8),  // h
            rand_mat(&mut rng, 3, 4, 0.8),  // c
            rand_mat(&mut rng, 6, 16, 0.7), // w
            rand_mat(&mut rng, 1, 16, 0.3), // b
        ],
        build: Box::new(move |t, v| {
            let y = t.lstm_cell(v[0], v[1], v[2], v[3], v[4]);
            let target = t.constant(t_lstm.clone());
            t.mse(y, target)
        }),
    });

    out.push(Case {
        name: "mse",
        params: vec![rand_mat(&mut rng, 4, 2, 1.0), rand_mat(&mut rng, 4, 2, 1.0)],
        build: Box::new(|t, v| t.mse(v[0], v[1])),
    });

    let t_struct = rand_mat(&mut rng, 3, 4, 1.0);
    out.push(Case {
        name: "structural",
        params: vec![rand_mat(&mut rng, 2, 3, 1.0), rand_mat(&mut rng, 2, 3, 1.0)],
        build: Box::new(move |t, v| {
            let s = t.scale(v[0], 0.7);
            let c = t.concat_rows(&[s, v[1]]);
            let sl = t.slice_cols(c, 1, 2);
            let r = t.reshape(sl, 2, 4);
            let r2 = t.concat_rows(&[r, r]);
            let r3 = t.reshape(r2, 4, 4);
            let r4 = t.slice_cols(r3, 0, 3);
            let r5 = t.reshape(r4, 3, 4);
            let target = t.constant(t_struct.clone());
            t.mse(r5, target)
        }),
    });

    // composite from the module examples: MSE(tanh(W x), y), 3×3
    let y = rand_mat(&mut rng, 3, 1, 1.0);
    let x = rand_mat(&mut rng, 3, 1, 1.0);
    out.push(Case {
        name: "mse_tanh_wx",
        params: vec![rand_mat(&mut rng, 3, 3, 1.0)],
        build: Box::new(move |t, v| {
            let xv = t.constant(x.clone());
            let wx = t.matmul(v[0], xv);
            let h = t.tanh(wx);
            let yv = t.constant(y.clone());
            t.mse(h, yv)
        }),
    });

    out
}
