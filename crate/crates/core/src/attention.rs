//! Attention-neuron layer.
//!
//! Every observation component is fed to an identical sensory neuron that emits a key
//! (from the component and the previous action) and a value (from the component alone).
//! A fixed bank of positional-encoding queries attends over those messages:
//!
//! ```text
//! m = σ( (Q·W_q) (K·W_k)ᵀ / √d_attn ) · (V·W_v)
//! ```
//!
//! Permuting the components permutes the rows of `K` and `V` together, which only
//! reorders the sum over components, so `m` is permutation invariant and its shape
//! `(M, d_m)` never depends on the number of components `N`.
//!
//! Two variants are provided:
//! * [`ContinuousLayer`]: scalar components, shared LSTM key encoder, pass-through
//!   values (`W_v = I`), `σ = tanh`.
//! * [`VisualLayer`]: `P×P×k` patch stacks, layer-normalized per patch; keys are the
//!   flattened frame differences plus the one-hot previous action; `σ` is a row softmax
//!   and the latent rows are layer-normalized.

use serde::{Deserialize, Serialize};

use crate::numerics::{
    canonical_sum, ops, positional_encoding, NumericsError, RealMat, SeededRng, Tape, Var,
    LAYER_NORM_EPS,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AttentionError {
    #[error("observation set is empty")]
    EmptyObservation,
    #[error("observation components must have {expected} values, got {actual}")]
    ComponentShape { expected: usize, actual: usize },
    #[error("previous action has {actual} entries, expected {expected}")]
    ActionDim { expected: usize, actual: usize },
    #[error("neuron states sized for {states} components, observation has {components}")]
    StateCount { states: usize, components: usize },
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Ordered list of `N ≥ 1` same-shaped sensor readings, one per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    components: RealMat,
}

impl ObservationSet {
    /// One scalar reading per component.
    pub fn scalars(values: &[f64]) -> Result<Self, AttentionError> {
        Self::from_rows(RealMat::column_vector(values))
    }

    /// One flattened patch stack per row.
    pub fn from_rows(components: RealMat) -> Result<Self, AttentionError> {
        if components.rows() == 0 {
            return Err(AttentionError::EmptyObservation);
        }
        Ok(Self { components })
    }

    pub fn len(&self) -> usize {
        self.components.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.components.rows() == 0
    }

    pub fn component_len(&self) -> usize {
        self.components.cols()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        self.components.row(i)
    }

    pub fn as_mat(&self) -> &RealMat {
        &self.components
    }

    /// Scalar readings, for single-value components.
    pub fn values(&self) -> &[f64] {
        self.components.data()
    }

    /// `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            components: self.components.select_rows(perm),
        }
    }

    /// Components at `indices`, in that order. Fails if nothing would remain.
    pub fn select(&self, indices: &[usize]) -> Result<Self, AttentionError> {
        Self::from_rows(self.components.select_rows(indices))
    }
}

/// Fixed (non-learnable) positional-encoding query matrix `Q ∈ R^{M×d_pe}`.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBank {
    q: RealMat,
}

impl QueryBank {
    pub fn new(num_rows: usize, dim: usize) -> Result<Self, AttentionError> {
        Ok(Self {
            q: positional_encoding(num_rows, dim)?,
        })
    }

    pub fn matrix(&self) -> &RealMat {
        &self.q
    }

    pub fn num_rows(&self) -> usize {
        self.q.rows()
    }
}

/// Post-attention activation and the summation mode that goes with it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Elementwise tanh; sums over components use an order-free canonical summation so
    /// the latent is bit-identical under any permutation.
    Tanh,
    /// Row softmax followed by layer-norm of every latent row.
    Softmax,
}

/// Latent code plus the `M×N` post-activation attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub latent: RealMat,
    pub attention: RealMat,
}

/// `σ((Q·W_q)(K·W_k)ᵀ/√d_attn)·(V·W_v)`; `w_v = None` means the identity.
pub fn attend(
    queries: &QueryBank,
    w_q: &RealMat,
    w_k: &RealMat,
    w_v: Option<&RealMat>,
    keys: &RealMat,
    values: &RealMat,
    variant: Variant,
) -> Result<AttentionOutput, AttentionError> {
    let q_proj = project_queries(queries, w_q)?;
    attend_projected(&q_proj, w_k, w_v, keys, values, variant)
}

/// `Q·W_q / √d_attn`, constant for a fixed parameter set.
fn project_queries(queries: &QueryBank, w_q: &RealMat) -> Result<RealMat, AttentionError> {
    let q = queries.matrix();
    if w_q.rows() != q.cols() {
        return Err(AttentionError::ParamShape {
            name: "w_q",
            expected: (q.cols(), w_q.cols()),
            actual: w_q.shape(),
        });
    }
    Ok(q.matmul(w_q).scale(1.0 / (w_q.cols() as f64).sqrt()))
}

fn attend_projected(
    q_proj: &RealMat,
    w_k: &RealMat,
    w_v: Option<&RealMat>,
    keys: &RealMat,
    values: &RealMat,
    variant: Variant,
) -> Result<AttentionOutput, AttentionError> {
    let n = keys.rows();
    if n == 0 {
        return Err(AttentionError::EmptyObservation);
    }
    if values.rows() != n {
        return Err(AttentionError::StateCount {
            states: values.rows(),
            components: n,
        });
    }
    if w_k.rows() != keys.cols() || w_k.cols() != q_proj.cols() {
        return Err(AttentionError::ParamShape {
            name: "w_k",
            expected: (keys.cols(), q_proj.cols()),
            actual: w_k.shape(),
        });
    }
    if let Some(w_v) = w_v {
        if w_v.rows() != values.cols() {
            return Err(AttentionError::ParamShape {
                name: "w_v",
                expected: (values.cols(), w_v.cols()),
                actual: w_v.shape(),
            });
        }
    }

    let out = match variant {
        Variant::Tanh => {
            // Per-entry loops: each score depends only on its own key row.
            let k_proj = rowwise_matmul(keys, w_k);
            let v_proj = match w_v {
                Some(w) => rowwise_matmul(values, w),
                None => values.clone(),
            };
            let m = q_proj.rows();
            let mut attention = RealMat::zeros(m, n);
            for j in 0..m {
                let qj = q_proj.row(j);
                for i in 0..n {
                    let s: f64 = qj.iter().zip(k_proj.row(i)).map(|(a, b)| a * b).sum();
                    attention.set(j, i, s.tanh());
                }
            }
            let d_m = v_proj.cols();
            let mut latent = RealMat::zeros(m, d_m);
            let mut terms = vec![0.0; n];
            for j in 0..m {
                for c in 0..d_m {
                    for (i, t) in terms.iter_mut().enumerate() {
                        *t = attention.get(j, i) * v_proj.get(i, c);
                    }
                    latent.set(j, c, canonical_sum(&mut terms));
                }
            }
            AttentionOutput { latent, attention }
        }
        Variant::Softmax => {
            let k_proj = keys.matmul(w_k);
            let v_proj = match w_v {
                Some(w) => values.matmul(w),
                None => values.clone(),
            };
            let mut attention = q_proj.matmul_t(&k_proj);
            for j in 0..attention.rows() {
                ops::softmax_in_place(attention.row_mut(j));
            }
            let latent = ops::layer_norm_rows(&attention.matmul(&v_proj), LAYER_NORM_EPS);
            AttentionOutput { latent, attention }
        }
    };
    if !out.latent.is_finite() {
        return Err(AttentionError::NonFinite("attention latent"));
    }
    Ok(out)
}

fn rowwise_matmul(a: &RealMat, b: &RealMat) -> RealMat {
    let mut out = RealMat::zeros(a.rows(), b.cols());
    for r in 0..a.rows() {
        let dst = out.row_mut(r);
        for (k, &av) in a.row(r).iter().enumerate() {
            for (d, bv) in dst.iter_mut().zip(b.row(k)) {
                *d += av * bv;
            }
        }
    }
    out
}

fn check_shape(name: &'static str, m: &RealMat, expected: (usize, usize)) -> Result<(), AttentionError> {
    if m.shape() != expected {
        return Err(AttentionError::ParamShape {
            name,
            expected,
            actual: m.shape(),
        });
    }
    Ok(())
}

/// Uniform `±1/√fan_in` initialization, fan-in = rows.
pub fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut SeededRng) -> RealMat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    RealMat::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

// ---------------------------------------------------------------------------
// Continuous variant
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousConfig {
    /// Query rows `M` (latent length).
    pub num_latents: usize,
    pub pe_dim: usize,
    pub attn_dim: usize,
    /// LSTM hidden width, which is also the key width `d_fk`.
    pub hidden: usize,
    pub action_dim: usize,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        Self {
            num_latents: 16,
            pe_dim: 8,
            attn_dim: 32,
            hidden: 8,
            action_dim: 1,
        }
    }
}

impl ContinuousConfig {
    pub fn lstm_input(&self) -> usize {
        1 + self.action_dim
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        (self.lstm_input() + h) * 4 * h + 4 * h + self.pe_dim * self.attn_dim + h * self.attn_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousParams {
    /// `(1 + |A| + H) × 4H`, gate order input/forget/cell/output.
    pub lstm_w: RealMat,
    /// `1 × 4H`.
    pub lstm_b: RealMat,
    pub w_q: RealMat,
    pub w_k: RealMat,
}

impl ContinuousParams {
    pub fn zeros(cfg: &ContinuousConfig) -> Self {
        let h = cfg.hidden;
        Self {
            lstm_w: RealMat::zeros(cfg.lstm_input() + h, 4 * h),
            lstm_b: RealMat::zeros(1, 4 * h),
            w_q: RealMat::zeros(cfg.pe_dim, cfg.attn_dim),
            w_k: RealMat::zeros(h, cfg.attn_dim),
        }
    }

    pub fn random(cfg: &ContinuousConfig, rng: &mut SeededRng) -> Self {
        let h = cfg.hidden;
        let fan = cfg.lstm_input() + h;
        Self {
            lstm_w: uniform_init(fan, 4 * h, fan, rng),
            lstm_b: uniform_init(1, 4 * h, fan, rng),
            w_q: uniform_init(cfg.pe_dim, cfg.attn_dim, cfg.pe_dim, rng),
            w_k: uniform_init(h, cfg.attn_dim, h, rng),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &RealMat); 4] {
        [
            ("lstm_w", &self.lstm_w),
            ("lstm_b", &self.lstm_b),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut RealMat); 4] {
        [
            ("lstm_w", &mut self.lstm_w),
            ("lstm_b", &mut self.lstm_b),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
        ]
    }

    fn validate(&self, cfg: &ContinuousConfig) -> Result<(), AttentionError> {
        let h = cfg.hidden;
        check_shape("lstm_w", &self.lstm_w, (cfg.lstm_input() + h, 4 * h))?;
        check_shape("lstm_b", &self.lstm_b, (1, 4 * h))?;
        check_shape("w_q", &self.w_q, (cfg.pe_dim, cfg.attn_dim))?;
        check_shape("w_k", &self.w_k, (h, cfg.attn_dim))
    }
}

/// Per-slot recurrent state `(h, c)` of the shared key-encoder LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronStates {
    pub h: RealMat,
    pub c: RealMat,
}

impl NeuronStates {
    pub fn zeros(slots: usize, hidden: usize) -> Self {
        Self {
            h: RealMat::zeros(slots, hidden),
            c: RealMat::zeros(slots, hidden),
        }
    }

    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.rows() == 0
    }

    pub fn reset(&mut self) {
        self.h.data_mut().fill(0.0);
        self.c.data_mut().fill(0.0);
    }

    /// `out[i] = self[perm[i]]`, matching [`ObservationSet::permuted`].
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            h: self.h.select_rows(perm),
            c: self.c.select_rows(perm),
        }
    }
}

/// Tape handles for the continuous layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ContinuousVars {
    pub lstm_w: Var,
    pub lstm_b: Var,
    pub w_q: Var,
    pub w_k: Var,
}

#[derive(Clone, Debug)]
pub struct ContinuousLayer {
    config: ContinuousConfig,
    params: ContinuousParams,
    queries: QueryBank,
    q_proj: RealMat,
}

impl ContinuousLayer {
    pub fn new(config: ContinuousConfig, params: ContinuousParams) -> Result<Self, AttentionError> {
        params.validate(&config)?;
        let queries = QueryBank::new(config.num_latents, config.pe_dim)?;
        let q_proj = project_queries(&queries, &params.w_q)?;
        Ok(Self {
            config,
            params,
            queries,
            q_proj,
        })
    }

    pub fn config(&self) -> &ContinuousConfig {
        &self.config
    }

    pub fn params(&self) -> &ContinuousParams {
        &self.params
    }

    pub fn queries(&self) -> &QueryBank {
        &self.queries
    }

    pub fn zero_states(&self, slots: usize) -> NeuronStates {
        NeuronStates::zeros(slots, self.config.hidden)
    }

    fn check_inputs(
        &self,
        obs: &ObservationSet,
        prev_action: &[f64],
    ) -> Result<(), AttentionError> {
        if obs.component_len() != 1 {
            return Err(AttentionError::ComponentShape {
                expected: 1,
                actual: obs.component_len(),
            });
        }
        if prev_action.len() != self.config.action_dim {
            return Err(AttentionError::ActionDim {
                expected: self.config.action_dim,
                actual: prev_action.len(),
            });
        }
        Ok(())
    }

    /// Keys are the LSTM hidden states after consuming `[o_t[i], a_{t−1}]`.
    pub fn encode_keys(
        &self,
        obs: &ObservationSet,
        prev_action: &[f64],
        states: &NeuronStates,
    ) -> Result<(RealMat, NeuronStates), AttentionError> {
        self.check_inputs(obs, prev_action)?;
        if states.len() != obs.len() {
            return Err(AttentionError::StateCount {
                states: states.len(),
                components: obs.len(),
            });
        }
        let n = obs.len();
        let x = RealMat::from_fn(n, self.config.lstm_input(), |i, j| {
            if j == 0 {
                obs.component(i)[0]
            } else {
                prev_action[j - 1]
            }
        });
        let step = ops::lstm_cell(
            &x,
            &states.h,
            &states.c,
            &self.params.lstm_w,
            self.params.lstm_b.data(),
        );
        let next = NeuronStates {
            h: step.h.clone(),
            c: step.c,
        };
        Ok((step.h, next))
    }

    /// Pass-through values: `V` is the `N×1` column of readings.
    pub fn encode_values(&self, obs: &ObservationSet) -> RealMat {
        obs.as_mat().clone()
    }

    /// One step of the layer; advances `states` in place.
    pub fn forward(
        &self,
        obs: &ObservationSet,
        prev_action: &[f64],
        states: &mut NeuronStates,
    ) -> Result<AttentionOutput, AttentionError> {
        let (keys, next) = self.encode_keys(obs, prev_action, states)?;
        let values = self.encode_values(obs);
        let out = attend_projected(&self.q_proj, &self.params.w_k, None, &keys, &values, Variant::Tanh)?;
        *states = next;
        Ok(out)
    }

    /// Records one step on a tape. `obs` is `N×1`, `prev_action` is `N×|A|` (one row
    /// per slot); returns `(latent M×1, h', c')`.
    pub fn tape_step(
        &self,
        tape: &mut Tape,
        vars: &ContinuousVars,
        obs: &RealMat,
        prev_action: &RealMat,
        h: Var,
        c: Var,
    ) -> (Var, Var, Var) {
        let hidden = self.config.hidden;
        let n = obs.rows();
        let x = RealMat::from_fn(n, self.config.lstm_input(), |i, j| {
            if j == 0 {
                obs.get(i, 0)
            } else {
                prev_action.get(i, j - 1)
            }
        });
        let x = tape.constant(x);
        let hc = tape.lstm_cell(x, h, c, vars.lstm_w, vars.lstm_b);
        let h_next = tape.slice_cols(hc, 0, hidden);
        let c_next = tape.slice_cols(hc, hidden, hidden);

        let q = tape.constant(self.queries.matrix().clone());
        let qw = tape.matmul(q, vars.w_q);
        let qw = tape.scale(qw, 1.0 / (self.config.attn_dim as f64).sqrt());
        let kw = tape.matmul(h_next, vars.w_k);
        let scores = tape.matmul_t(qw, kw);
        let att = tape.tanh(scores);
        let v = tape.constant(obs.clone());
        let latent = tape.matmul(att, v);
        (latent, h_next, c_next)
    }
}

// ---------------------------------------------------------------------------
// Visual variant
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualConfig {
    pub num_latents: usize,
    pub pe_dim: usize,
    pub attn_dim: usize,
    /// Latent width `d_m`.
    pub latent_dim: usize,
    /// Patch side `P`.
    pub patch: usize,
    /// Stacked frames `k`.
    pub frames: usize,
    pub num_actions: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            num_latents: 400,
            pe_dim: 8,
            attn_dim: 32,
            latent_dim: 32,
            patch: 6,
            frames: 4,
            num_actions: 3,
        }
    }
}

impl VisualConfig {
    /// `P·P·k`.
    pub fn value_dim(&self) -> usize {
        self.patch * self.patch * self.frames
    }

    /// `P·P·(k−1) + |A|`.
    pub fn key_dim(&self) -> usize {
        self.patch * self.patch * (self.frames - 1) + self.num_actions
    }

    /// Side of the square latent grid, if `M` is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let g = (self.num_latents as f64).sqrt().round() as usize;
        (g * g == self.num_latents).then_some(g)
    }

    pub fn param_count(&self) -> usize {
        self.pe_dim * self.attn_dim
            + self.key_dim() * self.attn_dim
            + self.value_dim() * self.latent_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualParams {
    pub w_q: RealMat,
    pub w_k: RealMat,
    pub w_v: RealMat,
}

impl VisualParams {
    pub fn zeros(cfg: &VisualConfig) -> Self {
        Self {
            w_q: RealMat::zeros(cfg.pe_dim, cfg.attn_dim),
            w_k: RealMat::zeros(cfg.key_dim(), cfg.attn_dim),
            w_v: RealMat::zeros(cfg.value_dim(), cfg.latent_dim),
        }
    }

    pub fn random(cfg: &VisualConfig, rng: &mut SeededRng) -> Self {
        Self {
            w_q: uniform_init(cfg.pe_dim, cfg.attn_dim, cfg.pe_dim, rng),
            w_k: uniform_init(cfg.key_dim(), cfg.attn_dim, cfg.key_dim(), rng),
            w_v: uniform_init(cfg.value_dim(), cfg.latent_dim, cfg.value_dim(), rng),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &RealMat); 3] {
        [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut RealMat); 3] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
        ]
    }

    fn validate(&self, cfg: &VisualConfig) -> Result<(), AttentionError> {
        check_shape("w_q", &self.w_q, (cfg.pe_dim, cfg.attn_dim))?;
        check_shape("w_k", &self.w_k, (cfg.key_dim(), cfg.attn_dim))?;
        check_shape("w_v", &self.w_v, (cfg.value_dim(), cfg.latent_dim))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VisualVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Parameter-free per-patch preprocessing: normalized values and frame-difference keys.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualMessages {
    pub keys: RealMat,
    pub values: RealMat,
}

#[derive(Clone, Debug)]
pub struct VisualLayer {
    config: VisualConfig,
    params: VisualParams,
    queries: QueryBank,
    q_proj: RealMat,
}

impl VisualLayer {
    pub fn new(config: VisualConfig, params: VisualParams) -> Result<Self, AttentionError> {
        if config.frames < 2 {
            return Err(AttentionError::ComponentShape {
                expected: 2,
                actual: config.frames,
            });
        }
        params.validate(&config)?;
        let queries = QueryBank::new(config.num_latents, config.pe_dim)?;
        let q_proj = project_queries(&queries, &params.w_q)?;
        Ok(Self {
            config,
            params,
            queries,
            q_proj,
        })
    }

    pub fn config(&self) -> &VisualConfig {
        &self.config
    }

    pub fn params(&self) -> &VisualParams {
        &self.params
    }

    pub fn queries(&self) -> &QueryBank {
        &self.queries
    }

    fn check_obs(&self, obs: &ObservationSet) -> Result<(), AttentionError> {
        if obs.component_len() != self.config.value_dim() {
            return Err(AttentionError::ComponentShape {
                expected: self.config.value_dim(),
                actual: obs.component_len(),
            });
        }
        Ok(())
    }

    /// Values: each patch stack flattened and layer-normalized (`N × P·P·k`).
    pub fn encode_values(&self, obs: &ObservationSet) -> Result<RealMat, AttentionError> {
        self.check_obs(obs)?;
        Ok(ops::layer_norm_rows(obs.as_mat(), LAYER_NORM_EPS))
    }

    /// Keys from already-normalized values: differences of consecutive frames for every
    /// pixel, flattened `(row, col, frame)`, followed by the previous action.
    pub fn keys_from_values(
        &self,
        values: &RealMat,
        prev_action: &[f64],
    ) -> Result<RealMat, AttentionError> {
        let cfg = &self.config;
        if prev_action.len() != cfg.num_actions {
            return Err(AttentionError::ActionDim {
                expected: cfg.num_actions,
                actual: prev_action.len(),
            });
        }
        let k = cfg.frames;
        let pixels = cfg.patch * cfg.patch;
        let diff_len = pixels * (k - 1);
        let mut keys = RealMat::zeros(values.rows(), cfg.key_dim());
        for i in 0..values.rows() {
            let src = values.row(i);
            let dst = keys.row_mut(i);
            for p in 0..pixels {
                for f in 0..k - 1 {
                    dst[p * (k - 1) + f] = src[p * k + f + 1] - src[p * k + f];
                }
            }
            dst[diff_len..].copy_from_slice(prev_action);
        }
        Ok(keys)
    }

    pub fn encode_keys(
        &self,
        obs: &ObservationSet,
        prev_action: &[f64],
    ) -> Result<RealMat, AttentionError> {
        let values = self.encode_values(obs)?;
        self.keys_from_values(&values, prev_action)
    }

    pub fn messages(
        &self,
        obs: &ObservationSet,
        prev_action: &[f64],
    ) -> Result<VisualMessages, AttentionError> {
        let values = self.encode_values(obs)?;
        let keys = self.keys_from_values(&values, prev_action)?;
        Ok(VisualMessages { keys, values })
    }

    pub fn forward(
        &self,
        obs: &ObservationSet,
        prev_action: &[f64],
    ) -> Result<AttentionOutput, AttentionError> {
        let msg = self.messages(obs, prev_action)?;
        attend_projected(
            &self.q_proj,
            &self.params.w_k,
            Some(&self.params.w_v),
            &msg.keys,
            &msg.values,
            Variant::Softmax,
        )
    }

    /// Records the attention part on a tape; returns the `M×d_m` normalized latent.
    pub fn tape_forward(&self, tape: &mut Tape, vars: &VisualVars, msg: &VisualMessages) -> Var {
        let q = tape.constant(self.queries.matrix().clone());
        let qw = tape.matmul(q, vars.w_q);
        let qw = tape.scale(qw, 1.0 / (self.config.attn_dim as f64).sqrt());
        self.tape_forward_with_queries(tape, vars, qw, msg)
    }

    /// Same as [`Self::tape_forward`] with a precomputed scaled `Q·W_q` node, so a
    /// batch can share it.
    pub fn tape_forward_with_queries(
        &self,
        tape: &mut Tape,
        vars: &VisualVars,
        q_proj: Var,
        msg: &VisualMessages,
    ) -> Var {
        let k = tape.constant(msg.keys.clone());
        let v = tape.constant(msg.values.clone());
        let kw = tape.matmul(k, vars.w_k);
        let scores = tape.matmul_t(q_proj, kw);
        let att = tape.softmax_rows(scores);
        let vw = tape.matmul(v, vars.w_v);
        let m = tape.matmul(att, vw);
        tape.layer_norm_rows(m, LAYER_NORM_EPS)
    }

    /// Scaled `Q·W_q` node for [`Self::tape_forward_with_queries`].
    pub fn tape_queries(&self, tape: &mut Tape, vars: &VisualVars) -> Var {
        let q = tape.constant(self.queries.matrix().clone());
        let qw = tape.matmul(q, vars.w_q);
        tape.scale(qw, 1.0 / (self.config.attn_dim as f64).sqrt())
    }
}
