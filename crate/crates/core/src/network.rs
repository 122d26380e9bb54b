//! Observation encoder and LSTM cell with exact truncated BPTT.
//!
//! Layout conventions:
//! - `enc_weight` is `E x (D+4)` row-major and acts on `[features; location_hint]`.
//! - `lstm_weight` is `4H x (E+H)` row-major and acts on `[o_t; h_{t-1}]`.
//!   Row blocks of `H` are the input, forget, output and candidate gates in
//!   that order; `lstm_bias` follows the same blocks.
//! - The policy mean is the last four entries of `h_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::FrameObservation;
use crate::error::{Error, Result};

/// Number of box coordinates read off the hidden state.
pub const LOC_DIM: usize = 4;

pub const TENSOR_NAMES: [&str; 4] = ["enc_weight", "enc_bias", "lstm_weight", "lstm_bias"];

const GATE_INPUT: usize = 0;
const GATE_FORGET: usize = 1;
const GATE_OUTPUT: usize = 2;
const GATE_CANDIDATE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Feature vector length `D`.
    pub feature: usize,
    /// Encoder output length `E`.
    pub encoding: usize,
    /// LSTM hidden size `H`.
    pub hidden: usize,
}

impl Dims {
    pub fn new(feature: usize, encoding: usize, hidden: usize) -> Self {
        Dims {
            feature,
            encoding,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature == 0 {
            return Err(Error::config("feature_dim", "must be >= 1"));
        }
        if self.encoding == 0 {
            return Err(Error::config("encoding_dim", "must be >= 1"));
        }
        if self.hidden < LOC_DIM {
            return Err(Error::config(
                "hidden_dim",
                format!("must be >= {LOC_DIM}, got {}", self.hidden),
            ));
        }
        Ok(())
    }

    pub fn encoder_inputs(&self) -> usize {
        self.feature + LOC_DIM
    }

    pub fn lstm_inputs(&self) -> usize {
        self.encoding + self.hidden
    }

    pub fn tensor_lens(&self) -> [usize; 4] {
        [
            self.encoding * self.encoder_inputs(),
            self.encoding,
            4 * self.hidden * self.lstm_inputs(),
            4 * self.hidden,
        ]
    }
}

/// All trainable weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub dims: Dims,
    pub seed: u64,
    pub enc_weight: Vec<f64>,
    pub enc_bias: Vec<f64>,
    pub lstm_weight: Vec<f64>,
    pub lstm_bias: Vec<f64>,
}

/// Gradients shaped like [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub enc_weight: Vec<f64>,
    pub enc_bias: Vec<f64>,
    pub lstm_weight: Vec<f64>,
    pub lstm_bias: Vec<f64>,
}

impl ParamStore {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, forget bias 1, other biases 0.
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let a = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..=a)).collect()
        };
        let [enc_w, _, lstm_w, _] = dims.tensor_lens();
        let enc_weight = uniform(enc_w, dims.encoder_inputs());
        let lstm_weight = uniform(lstm_w, dims.lstm_inputs());
        let h = dims.hidden;
        let mut lstm_bias = vec![0.0; 4 * h];
        lstm_bias[GATE_FORGET * h..(GATE_FORGET + 1) * h].fill(1.0);
        Ok(ParamStore {
            dims,
            seed,
            enc_weight,
            enc_bias: vec![0.0; dims.encoding],
            lstm_weight,
            lstm_bias,
        })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let [a, b, c, d] = dims.tensor_lens();
        Ok(ParamStore {
            dims,
            seed: 0,
            enc_weight: vec![0.0; a],
            enc_bias: vec![0.0; b],
            lstm_weight: vec![0.0; c],
            lstm_bias: vec![0.0; d],
        })
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            &self.enc_weight,
            &self.enc_bias,
            &self.lstm_weight,
            &self.lstm_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.enc_weight,
            &mut self.enc_bias,
            &mut self.lstm_weight,
            &mut self.lstm_bias,
        ]
    }

    /// Checks tensor lengths against `dims`.
    pub fn check_shapes(&self) -> Result<()> {
        self.dims.validate()?;
        for ((name, t), len) in TENSOR_NAMES
            .iter()
            .zip(self.tensors())
            .zip(self.dims.tensor_lens())
        {
            if t.len() != len {
                return Err(Error::dim(*name, len, t.len()));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute elementwise difference to `other`.
    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

impl ParamGrads {
    pub fn zeros(dims: Dims) -> Self {
        let [a, b, c, d] = dims.tensor_lens();
        ParamGrads {
            enc_weight: vec![0.0; a],
            enc_bias: vec![0.0; b],
            lstm_weight: vec![0.0; c],
            lstm_bias: vec![0.0; d],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            &self.enc_weight,
            &self.enc_bias,
            &self.lstm_weight,
            &self.lstm_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.enc_weight,
            &mut self.enc_bias,
            &mut self.lstm_weight,
            &mut self.lstm_bias,
        ]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// LSTM hidden and cell state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(hidden: usize) -> Self {
        RecurrentState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }

    /// The policy mean carried by this state.
    pub fn mu(&self) -> [f64; LOC_DIM] {
        let n = self.h.len();
        let mut out = [0.0; LOC_DIM];
        out.copy_from_slice(&self.h[n - LOC_DIM..]);
        out
    }
}

/// Activations of one timestep kept for the backward pass.
#[derive(Debug, Clone)]
struct StepCache {
    enc_input: Vec<f64>,
    enc_out: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-nonlinearity gate values, `4H`, same block order as the weights.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Everything BPTT needs for one chunk; one entry per timestep.
#[derive(Debug, Clone)]
pub struct ChunkCache {
    steps: Vec<StepCache>,
}

impl ChunkCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Output of [`forward_chunk`].
#[derive(Debug, Clone)]
pub struct ChunkForward {
    pub mus: Vec<[f64; LOC_DIM]>,
    pub final_state: RecurrentState,
    pub cache: ChunkCache,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out = W x + b` for row-major `W` of shape `b.len() x x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    w.chunks_exact(cols)
        .zip(b)
        .map(|(row, bias)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bias)
        .collect()
}

fn encoder_input(obs: &FrameObservation, dims: &Dims) -> Result<Vec<f64>> {
    if obs.features.len() != dims.feature {
        return Err(Error::dim("observation features", dims.feature, obs.features.len()));
    }
    let mut u = Vec::with_capacity(dims.encoder_inputs());
    u.extend_from_slice(&obs.features);
    u.extend_from_slice(&obs.location_hint);
    Ok(u)
}

/// `tanh(enc_weight . [features; location_hint] + enc_bias)`.
pub fn encode_observation(obs: &FrameObservation, params: &ParamStore) -> Result<Vec<f64>> {
    let u = encoder_input(obs, &params.dims)?;
    Ok(affine(&params.enc_weight, &params.enc_bias, &u)
        .into_iter()
        .map(f64::tanh)
        .collect())
}

fn check_step_dims(state: &RecurrentState, o: &[f64], dims: &Dims) -> Result<()> {
    if o.len() != dims.encoding {
        return Err(Error::dim("encoder output", dims.encoding, o.len()));
    }
    if state.h.len() != dims.hidden {
        return Err(Error::dim("hidden state", dims.hidden, state.h.len()));
    }
    if state.c.len() != dims.hidden {
        return Err(Error::dim("cell state", dims.hidden, state.c.len()));
    }
    Ok(())
}

/// Returns the new state and the post-activation gates.
fn lstm_step_raw(state: &RecurrentState, o: &[f64], params: &ParamStore) -> (RecurrentState, Vec<f64>) {
    let hd = params.dims.hidden;
    let mut x = Vec::with_capacity(params.dims.lstm_inputs());
    x.extend_from_slice(o);
    x.extend_from_slice(&state.h);
    let mut gates = affine(&params.lstm_weight, &params.lstm_bias, &x);
    for (k, z) in gates.iter_mut().enumerate() {
        *z = if k / hd == GATE_CANDIDATE {
            z.tanh()
        } else {
            sigmoid(*z)
        };
    }
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for j in 0..hd {
        let i = gates[GATE_INPUT * hd + j];
        let f = gates[GATE_FORGET * hd + j];
        let og = gates[GATE_OUTPUT * hd + j];
        let g = gates[GATE_CANDIDATE * hd + j];
        c[j] = f * state.c[j] + i * g;
        h[j] = og * c[j].tanh();
    }
    (RecurrentState { h, c }, gates)
}

/// One LSTM cell update.
pub fn lstm_step(state: &RecurrentState, o: &[f64], params: &ParamStore) -> Result<RecurrentState> {
    check_step_dims(state, o, &params.dims)?;
    Ok(lstm_step_raw(state, o, params).0)
}

/// Runs encode + LSTM over `frames`, returning the means, final state and BPTT cache.
pub fn forward_chunk(
    frames: &[FrameObservation],
    params: &ParamStore,
    init_state: &RecurrentState,
) -> Result<ChunkForward> {
    if frames.is_empty() {
        return Err(Error::Data("forward_chunk called with an empty chunk".into()));
    }
    let dims = params.dims;
    let mut state = init_state.clone();
    let mut mus = Vec::with_capacity(frames.len());
    let mut steps = Vec::with_capacity(frames.len());
    for obs in frames {
        let enc_input = encoder_input(obs, &dims)?;
        let enc_out: Vec<f64> = affine(&params.enc_weight, &params.enc_bias, &enc_input)
            .into_iter()
            .map(f64::tanh)
            .collect();
        check_step_dims(&state, &enc_out, &dims)?;
        let (next, gates) = lstm_step_raw(&state, &enc_out, params);
        mus.push(next.mu());
        let tanh_c = next.c.iter().map(|v| v.tanh()).collect();
        steps.push(StepCache {
            enc_input,
            enc_out,
            h_prev: std::mem::take(&mut state.h),
            c_prev: std::mem::take(&mut state.c),
            gates,
            c: next.c.clone(),
            tanh_c,
        });
        state = next;
    }
    Ok(ChunkForward {
        mus,
        final_state: state,
        cache: ChunkCache { steps },
    })
}

/// Gradients of `L = sum_t grad_mus[t] . mu_t` with respect to every parameter.
///
/// The initial state is treated as a constant: gradients reaching it are dropped.
pub fn backward_chunk(
    cache: &ChunkCache,
    grad_mus: &[[f64; LOC_DIM]],
    params: &ParamStore,
) -> Result<ParamGrads> {
    if grad_mus.len() != cache.len() {
        return Err(Error::dim("grad_mus length", cache.len(), grad_mus.len()));
    }
    let dims = params.dims;
    let hd = dims.hidden;
    let ed = dims.encoding;
    let lin = dims.lstm_inputs();
    let uin = dims.encoder_inputs();
    let mut grads = ParamGrads::zeros(dims);

    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut dz = vec![0.0; 4 * hd];
    let mut dx = vec![0.0; lin];
    let mut da = vec![0.0; ed];

    for (step, gmu) in cache.steps.iter().zip(grad_mus).rev() {
        let mut dh = dh_next.clone();
        for k in 0..LOC_DIM {
            dh[hd - LOC_DIM + k] += gmu[k];
        }
        for j in 0..hd {
            let i = step.gates[GATE_INPUT * hd + j];
            let f = step.gates[GATE_FORGET * hd + j];
            let og = step.gates[GATE_OUTPUT * hd + j];
            let g = step.gates[GATE_CANDIDATE * hd + j];
            let tc = step.tanh_c[j];
            let dc = dc_next[j] + dh[j] * og * (1.0 - tc * tc);
            dz[GATE_INPUT * hd + j] = dc * g * i * (1.0 - i);
            dz[GATE_FORGET * hd + j] = dc * step.c_prev[j] * f * (1.0 - f);
            dz[GATE_OUTPUT * hd + j] = dh[j] * tc * og * (1.0 - og);
            dz[GATE_CANDIDATE * hd + j] = dc * i * (1.0 - g * g);
            dc_next[j] = dc * f;
        }
        debug_assert_eq!(step.c.len(), hd);

        dx.fill(0.0);
        for (r, &dzr) in dz.iter().enumerate() {
            grads.lstm_bias[r] += dzr;
            if dzr == 0.0 {
                continue;
            }
            let row = &params.lstm_weight[r * lin..(r + 1) * lin];
            let grow = &mut grads.lstm_weight[r * lin..(r + 1) * lin];
            for k in 0..lin {
                let xk = if k < ed { step.enc_out[k] } else { step.h_prev[k - ed] };
                grow[k] += dzr * xk;
                dx[k] += dzr * row[k];
            }
        }
        dh_next.copy_from_slice(&dx[ed..]);

        for k in 0..ed {
            let o = step.enc_out[k];
            da[k] = dx[k] * (1.0 - o * o);
        }
        for (r, &dar) in da.iter().enumerate() {
            grads.enc_bias[r] += dar;
            if dar == 0.0 {
                continue;
            }
            let grow = &mut grads.enc_weight[r * uin..(r + 1) * uin];
            for (g, u) in grow.iter_mut().zip(&step.enc_input) {
                *g += dar * u;
            }
        }
    }
    Ok(grads)
}
