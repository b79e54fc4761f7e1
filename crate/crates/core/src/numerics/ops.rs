//! Pure numeric kernels shared by the inference path and the tape.

use super::{NumericsError, RealMat};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `C = alpha · op(A) · op(B) + beta · C` with `op(A)` of shape `m×k` and `op(B)` of shape `k×n`.
///
/// Operands are row-major; a transposed operand is stored in its untransposed shape
/// (`k×m` for A, `n×k` for B).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong length");
    assert_eq!(b.len(), k * n, "gemm: B has wrong length");
    assert_eq!(c.len(), m * n, "gemm: C has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe in-bounds row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sinusoidal positional encoding; row `p` uses position `p`.
pub fn positional_encoding(num_rows: usize, dim: usize) -> Result<RealMat, NumericsError> {
    if dim % 2 != 0 || dim == 0 {
        return Err(NumericsError::OddEncodingDim(dim));
    }
    if num_rows == 0 {
        return Err(NumericsError::EmptyInput("positional_encoding"));
    }
    Ok(RealMat::from_fn(num_rows, dim, |p, col| {
        let i = col / 2;
        let angle = p as f64 / 10000f64.powf((2 * i) as f64 / dim as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &RealMat) -> RealMat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Layer normalization without affine parameters: `(x − mean) / sqrt(var + eps)`.
pub fn layer_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    layer_norm_in_place(&mut out, eps);
    out
}

pub fn layer_norm_in_place(x: &mut [f64], eps: f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

/// Layer norm applied to every row independently.
pub fn layer_norm_rows(x: &RealMat, eps: f64) -> RealMat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        layer_norm_in_place(out.row_mut(r), eps);
    }
    out
}

/// Sum whose result does not depend on the order of `values`: terms are summed in
/// ascending order. Reorders the slice.
pub fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Result of one LSTM cell step over a batch of rows.
#[derive(Clone, Debug)]
pub struct LstmStep {
    pub h: RealMat,
    pub c: RealMat,
    /// Activated gates `[i, f, g, o]`, `rows × 4H`.
    pub gates: RealMat,
}

/// One LSTM step. `w` is `(in + H) × 4H` acting on `[x, h]`, `b` has `4H` entries;
/// gate order is input, forget, cell candidate, output.
pub fn lstm_cell(x: &RealMat, h: &RealMat, c: &RealMat, w: &RealMat, b: &[f64]) -> LstmStep {
    let n = x.rows();
    let hidden = h.cols();
    let input = x.cols();
    assert_eq!(h.rows(), n);
    assert_eq!(c.shape(), h.shape());
    assert_eq!(w.shape(), (input + hidden, 4 * hidden), "lstm weight shape");
    assert_eq!(b.len(), 4 * hidden);

    // Row-by-row so each sensor's result is independent of its position in the batch.
    let mut gates = RealMat::zeros(n, 4 * hidden);
    for r in 0..n {
        let g = gates.row_mut(r);
        g.copy_from_slice(&b[..4 * hidden]);
        for (k, &xv) in x.row(r).iter().chain(h.row(r)).enumerate() {
            for (gv, wv) in g.iter_mut().zip(w.row(k)) {
                *gv += xv * wv;
            }
        }
    }
    let mut h_out = RealMat::zeros(n, hidden);
    let mut c_out = RealMat::zeros(n, hidden);
    for r in 0..n {
        let g = gates.row_mut(r);
        for (j, v) in g.iter_mut().enumerate() {
            let z = *v;
            *v = if j / hidden == 2 { z.tanh() } else { sigmoid(z) };
        }
        let c_prev = c.row(r);
        for j in 0..hidden {
            let (ig, fg, gg, og) = (g[j], g[hidden + j], g[2 * hidden + j], g[3 * hidden + j]);
            let cn = fg * c_prev[j] + ig * gg;
            c_out.set(r, j, cn);
            h_out.set(r, j, og * cn.tanh());
        }
    }
    LstmStep {
        h: h_out,
        c: c_out,
        gates,
    }
}

/// Geometry of a valid (unpadded) 2-D convolution over a channels-last image stored as
/// a `(height·width) × channels` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }

    /// Rows of the weight matrix: `kernel · kernel · in_c`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.kernel == 0
            || self.stride == 0
            || self.kernel > self.in_h
            || self.kernel > self.in_w
            || self.in_c == 0
            || self.out_c == 0
        {
            return Err(NumericsError::InvalidGeometry(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Unfold input windows into rows: `(out_h·out_w) × (k·k·in_c)`, window order `(kr, kc, ci)`.
pub fn im2col(x: &RealMat, g: &ConvGeom) -> RealMat {
    assert_eq!(x.shape(), (g.in_h * g.in_w, g.in_c), "im2col input shape");
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = RealMat::zeros(oh * ow, g.patch_len());
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = cols.row_mut(oy * ow + ox);
            let mut off = 0;
            for kr in 0..g.kernel {
                let iy = oy * g.stride + kr;
                for kc in 0..g.kernel {
                    let ix = ox * g.stride + kc;
                    dst[off..off + g.in_c].copy_from_slice(x.row(iy * g.in_w + ix));
                    off += g.in_c;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add window rows back into an image.
pub fn col2im(cols: &RealMat, g: &ConvGeom) -> RealMat {
    let (oh, ow) = (g.out_h(), g.out_w());
    assert_eq!(cols.shape(), (oh * ow, g.patch_len()), "col2im shape");
    let mut x = RealMat::zeros(g.in_h * g.in_w, g.in_c);
    for oy in 0..oh {
        for ox in 0..ow {
            let src = cols.row(oy * ow + ox);
            let mut off = 0;
            for kr in 0..g.kernel {
                let iy = oy * g.stride + kr;
                for kc in 0..g.kernel {
                    let ix = ox * g.stride + kc;
                    let dst = x.row_mut(iy * g.in_w + ix);
                    for (d, s) in dst.iter_mut().zip(&src[off..off + g.in_c]) {
                        *d += s;
                    }
                    off += g.in_c;
                }
            }
        }
    }
    x
}

/// Valid convolution; `w` is `(k·k·in_c) × out_c`, `b` has `out_c` entries.
pub fn conv2d(x: &RealMat, w: &RealMat, b: &[f64], g: &ConvGeom) -> RealMat {
    assert_eq!(w.shape(), (g.patch_len(), g.out_c), "conv weight shape");
    assert_eq!(b.len(), g.out_c);
    let mut out = im2col(x, g).matmul(w);
    add_row_bias(&mut out, b);
    out
}

pub fn add_row_bias(x: &mut RealMat, b: &[f64]) {
    assert_eq!(x.cols(), b.len());
    for r in 0..x.rows() {
        for (v, bias) in x.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
}

/// Mean squared error over all entries.
pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}
