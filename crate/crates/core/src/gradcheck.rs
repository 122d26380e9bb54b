//! Finite-difference verification of the BPTT gradients and the Gaussian score function.
//!
//! The network check differentiates `L(W) = sum_t w_t . mu_t(W)` for random
//! weights `w_t` by central differences of the forward pass only, and compares
//! every parameter element against [`backward_chunk`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::env::FrameObservation;
use crate::error::Result;
use crate::geometry::BBox;
use crate::network::{backward_chunk, forward_chunk, Dims, ParamStore, RecurrentState, TENSOR_NAMES};
use crate::policy::{log_prob, log_prob_grad, sample_location, PolicyOutput};

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOptions {
    pub dims: Dims,
    pub chunk_len: usize,
    pub seed: u64,
    /// Central-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries that are zero up to
    /// rounding do not dominate.
    pub abs_floor: f64,
    pub policy_cases: usize,
    pub policy_tolerance: f64,
    /// Perturb the analytic gradient so the check must fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            dims: Dims::new(4, 6, 8),
            chunk_len: 3,
            seed: 0,
            eps: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-8,
            policy_cases: 100,
            policy_tolerance: 1e-6,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub elements: usize,
    pub worst_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorReport>,
    pub policy_worst_rel_error: f64,
    pub tolerance: f64,
    pub policy_tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for t in &self.tensors {
            s.push_str(&format!(
                "{:<12} elements={:<5} worst_rel_error={:.3e} (index {}) {}\n",
                t.name,
                t.elements,
                t.worst_rel_error,
                t.worst_index,
                verdict(t.worst_rel_error <= self.tolerance)
            ));
        }
        s.push_str(&format!(
            "{:<12} cases             worst_rel_error={:.3e} {}\n",
            "policy_score",
            self.policy_worst_rel_error,
            verdict(self.policy_worst_rel_error <= self.policy_tolerance)
        ));
        s.push_str(&format!("gradcheck: {}\n", verdict(self.passed)));
        s
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_frames(rng: &mut ChaCha8Rng, d: usize, t: usize) -> Vec<FrameObservation> {
    (0..t)
        .map(|k| FrameObservation {
            features: (0..d).map(|_| rng.random_range(0.0..1.0)).collect(),
            location_hint: if k == 0 {
                [
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.1..0.4),
                    rng.random_range(0.1..0.4),
                ]
            } else {
                [0.0; 4]
            },
        })
        .collect()
}

fn weighted_mu_sum(params: &ParamStore, frames: &[FrameObservation], init: &RecurrentState, w: &[[f64; 4]]) -> Result<f64> {
    let fw = forward_chunk(frames, params, init)?;
    Ok(fw
        .mus
        .iter()
        .zip(w)
        .map(|(mu, wt)| mu.iter().zip(wt).map(|(a, b)| a * b).sum::<f64>())
        .sum())
}

/// Worst relative error of the BPTT gradient per parameter tensor.
pub fn check_network(opts: &GradcheckOptions) -> Result<Vec<TensorReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let params = ParamStore::init(opts.dims, rng.random())?;
    let frames = random_frames(&mut rng, opts.dims.feature, opts.chunk_len);
    // Non-zero initial state exercises the carried-state path.
    let init = RecurrentState {
        h: (0..opts.dims.hidden).map(|_| rng.random_range(-0.5..0.5)).collect(),
        c: (0..opts.dims.hidden).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    let w: Vec<[f64; 4]> = (0..opts.chunk_len)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();

    let fw = forward_chunk(&frames, &params, &init)?;
    let mut grads = backward_chunk(&fw.cache, &w, &params)?;
    if opts.corrupt {
        for t in grads.tensors_mut() {
            if let Some(v) = t.first_mut() {
                *v = *v * 1.01 + 1e-3;
            }
        }
    }

    let mut reports = Vec::new();
    for (ti, name) in TENSOR_NAMES.iter().enumerate() {
        let analytic = grads.tensors()[ti];
        let mut worst = 0.0;
        let mut worst_index = 0;
        let mut probe = params.clone();
        #[allow(clippy::needless_range_loop)]
        for i in 0..analytic.len() {
            let orig = probe.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = orig + opts.eps;
            let up = weighted_mu_sum(&probe, &frames, &init, &w)?;
            probe.tensors_mut()[ti][i] = orig - opts.eps;
            let dn = weighted_mu_sum(&probe, &frames, &init, &w)?;
            probe.tensors_mut()[ti][i] = orig;
            let numeric = (up - dn) / (2.0 * opts.eps);
            let rel = relative_error(analytic[i], numeric, opts.abs_floor);
            if rel > worst {
                worst = rel;
                worst_index = i;
            }
        }
        reports.push(TensorReport {
            name: name.to_string(),
            elements: analytic.len(),
            worst_rel_error: worst,
            worst_index,
        });
    }
    Ok(reports)
}

/// Worst relative error of `(l - mu) / sigma^2` against central differences of the log-density.
pub fn check_policy_score(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let mu: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let sigma = 10f64.powf(rng.random_range(-2.0..0.0));
        let out = PolicyOutput::new(mu, sigma);
        let l: BBox = sample_location(&out, &mut rng)?;
        let g = log_prob_grad(&l, &out)?;
        let h = 1e-4 * sigma;
        for k in 0..4 {
            let mut up = mu;
            let mut dn = mu;
            up[k] += h;
            dn[k] -= h;
            let numeric = (log_prob(&l, &PolicyOutput::new(up, sigma))? - log_prob(&l, &PolicyOutput::new(dn, sigma))?) / (2.0 * h);
            // Scale floor: a score of 1e-3 / sigma is already far below a typical sample.
            worst = worst.max(relative_error(g[k], numeric, 1e-3 / sigma));
        }
    }
    Ok(worst)
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let tensors = check_network(opts)?;
    let policy_worst_rel_error = check_policy_score(opts.policy_cases, opts.seed)?;
    let passed = tensors.iter().all(|t| t.worst_rel_error <= opts.tolerance)
        && policy_worst_rel_error <= opts.policy_tolerance;
    Ok(GradcheckReport {
        tensors,
        policy_worst_rel_error,
        tolerance: opts.tolerance,
        policy_tolerance: opts.policy_tolerance,
        passed,
    })
}
