//! Scalar reference implementations of the attention building blocks.

use pinn_core::numerics::RealMat;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar reference LSTM: one sensor, explicit gate formulas.
pub fn oracle_lstm(
    w: &RealMat,
    b: &[f64],
    input: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hid = h.len();
    let mut z = vec![0.0; 4 * hid];
    for (g, zg) in z.iter_mut().enumerate() {
        let mut s = b[g];
        for (k, &x) in input.iter().chain(h.iter()).enumerate() {
            s += x * w.get(k, g);
        }
        *zg = s;
    }
    let mut h2 = vec![0.0; hid];
    let mut c2 = vec![0.0; hid];
    for j in 0..hid {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[hid + j]);
        let g = z[2 * hid + j].tanh();
        let o = sigmoid(z[3 * hid + j]);
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

/// Brute-force attention: every entry by nested scalar loops.
pub fn oracle_attend(
    q: &RealMat,
    w_q: &RealMat,
    w_k: &RealMat,
    w_v: Option<&RealMat>,
    keys: &RealMat,
    values: &RealMat,
    softmax: bool,
) -> (RealMat, RealMat) {
    let (m, n, d) = (q.rows(), keys.rows(), w_q.cols());
    let proj = |x: &RealMat, r: usize, w: &RealMat, c: usize| -> f64 {
        (0..x.cols()).map(|k| x.get(r, k) * w.get(k, c)).sum()
    };
    let mut scores = RealMat::zeros(m, n);
    for j in 0..m {
        for i in 0..n {
            let mut s = 0.0;
            for a in 0..d {
                s += proj(q, j, w_q, a) * proj(keys, i, w_k, a);
            }
            scores.set(j, i, s / (d as f64).sqrt());
        }
    }
    let mut att = RealMat::zeros(m, n);
    for j in 0..m {
        if softmax {
            let mx = (0..n).map(|i| scores.get(j, i)).fold(f64::MIN, f64::max);
            let z: f64 = (0..n).map(|i| (scores.get(j, i) - mx).exp()).sum();
            for i in 0..n {
                att.set(j, i, (scores.get(j, i) - mx).exp() / z);
            }
        } else {
            for i in 0..n {
                att.set(j, i, scores.get(j, i).tanh());
            }
        }
    }
    let dv = w_v.map_or(values.cols(), |w| w.cols());
    let mut out = RealMat::zeros(m, dv);
    for j in 0..m {
        for c in 0..dv {
            let mut s = 0.0;
            for i in 0..n {
                let v = match w_v {
                    Some(w) => proj(values, i, w, c),
                    None => values.get(i, c),
                };
                s += att.get(j, i) * v;
            }
            out.set(j, c, s);
        }
        if softmax {
            let row: Vec<f64> = (0..dv).map(|c| out.get(j, c)).collect();
            let mean = row.iter().sum::<f64>() / dv as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / dv as f64;
            for c in 0..dv {
                out.set(j, c, (row[c] - mean) / (var + 1e-5).sqrt());
            }
        }
    }
    (out, att)
}
