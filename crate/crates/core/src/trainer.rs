//! Episodic REINFORCE with a per-step baseline, Adam, and the chunked
//! training loop.
//!
//! Sign convention: every gradient in this module is an ascent direction of
//! the expected return, and [`adam_update`] adds its step to the parameters.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{FrameObservation, SequenceData};
use crate::error::{Error, Result};
use crate::geometry::{reward_early, reward_late, BBox};
use crate::network::{backward_chunk, forward_chunk, ChunkCache, Dims, ParamGrads, ParamStore, RecurrentState};
use crate::policy::{log_prob_grad, sample_location, PolicyOutput};

/// Which per-step return multiplies the score function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnMode {
    /// `r_t`
    PerStep,
    /// `sum_{t' >= t} r_t'`
    RewardToGo,
    /// `R = sum_t r_t` at every step
    Total,
}

impl std::str::FromStr for ReturnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(ReturnMode::PerStep),
            "reward-to-go" => Ok(ReturnMode::RewardToGo),
            "total" => Ok(ReturnMode::Total),
            other => Err(Error::config(
                "trainer.return_mode",
                format!("unknown mode `{other}` (per-step | reward-to-go | total)"),
            )),
        }
    }
}

/// How the baseline for episode `i` is formed from the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Mean over all `N` episodes, episode `i` included. Shrinks the expected
    /// gradient by `(N - 1) / N`.
    BatchMean,
    /// Mean over the other `N - 1` episodes; unbiased. Equals the batch-mean
    /// advantage times `N / (N - 1)`.
    LeaveOneOut,
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch-mean" => Ok(BaselineMode::BatchMean),
            "leave-one-out" => Ok(BaselineMode::LeaveOneOut),
            other => Err(Error::config(
                "trainer.baseline",
                format!("unknown baseline `{other}` (batch-mean | leave-one-out)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// Negative mean-plus-max coordinate distance.
    Early,
    /// Intersection over union.
    Late,
}

impl RewardKind {
    pub fn tag(self) -> &'static str {
        match self {
            RewardKind::Early => "early",
            RewardKind::Late => "late",
        }
    }

    pub fn score(self, l: &BBox, g: &BBox) -> f64 {
        match self {
            RewardKind::Early => reward_early(l, g),
            RewardKind::Late => reward_late(l, g),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Frames per chunk (`T`).
    pub chunk_len: usize,
    /// Episodes sampled per chunk (`N`).
    pub episodes: usize,
    /// Policy standard deviation.
    pub sigma: f64,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub max_epochs: usize,
    /// First epoch that uses the IoU reward.
    pub reward_switch_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub return_mode: ReturnMode,
    pub baseline: BaselineMode,
    /// Carry the LSTM state across chunks of the same sequence.
    pub state_carryover: bool,
    /// Epochs without improvement of the epoch-mean return before stopping; 0 disables.
    pub patience: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            chunk_len: 10,
            episodes: 5,
            sigma: 1e-2,
            lr_initial: 1e-5,
            lr_final: 1e-6,
            max_epochs: 500,
            reward_switch_epoch: 300,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            return_mode: ReturnMode::PerStep,
            baseline: BaselineMode::BatchMean,
            state_carryover: true,
            patience: 25,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: String| Err(Error::config(format!("trainer.{field}"), reason));
        if self.chunk_len < 1 {
            return fail("chunk_len", "must be >= 1".into());
        }
        if self.episodes < 1 {
            return fail("episodes", "must be >= 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail("sigma", format!("must be > 0, got {}", self.sigma));
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_initial && self.lr_initial.is_finite()) {
            return fail(
                "lr_final",
                format!(
                    "need 0 < lr_final <= lr_initial, got {} and {}",
                    self.lr_final, self.lr_initial
                ),
            );
        }
        if self.baseline == BaselineMode::LeaveOneOut && self.episodes < 2 {
            return fail("episodes", "leave-one-out baseline needs >= 2".into());
        }
        if self.reward_switch_epoch > self.max_epochs {
            return fail(
                "reward_switch_epoch",
                format!("must be <= max_epochs ({}), got {}", self.max_epochs, self.reward_switch_epoch),
            );
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(name, format!("must be in [0, 1), got {b}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return fail("adam_eps", "must be > 0".into());
        }
        Ok(())
    }
}

/// One sampled rollout over a chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub locations: Vec<BBox>,
    pub rewards: Vec<f64>,
    pub mus: Vec<[f64; 4]>,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Episodes of a chunk plus what the update needs from the shared forward pass.
#[derive(Debug, Clone)]
pub struct ChunkRollout {
    pub episodes: Vec<Episode>,
    pub cache: ChunkCache,
    pub final_state: RecurrentState,
}

/// Reward function in force at `epoch`.
pub fn select_reward(epoch: usize, cfg: &TrainerConfig) -> RewardKind {
    if epoch < cfg.reward_switch_epoch {
        RewardKind::Early
    } else {
        RewardKind::Late
    }
}

/// Exponential interpolation from `lr_initial` at epoch 0 to `lr_final` at `max_epochs`.
pub fn anneal_lr(epoch: usize, cfg: &TrainerConfig) -> f64 {
    if epoch == 0 || cfg.max_epochs == 0 {
        return cfg.lr_initial;
    }
    if epoch >= cfg.max_epochs {
        return cfg.lr_final;
    }
    let frac = epoch as f64 / cfg.max_epochs as f64;
    cfg.lr_initial * (cfg.lr_final / cfg.lr_initial).powf(frac)
}

/// RNG for the rollout with global index `episode_index`; stream 0 is left to initialization.
pub fn episode_rng(seed: u64, episode_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode_index.wrapping_add(1));
    rng
}

/// One forward pass over the chunk, then `cfg.episodes` independent sampling passes.
///
/// `first_episode` is the global index of the first rollout; episode `i`
/// draws from `episode_rng(cfg.seed, first_episode + i)`.
#[allow(clippy::too_many_arguments)]
pub fn run_episodes(
    frames: &[FrameObservation],
    gts: &[BBox],
    params: &ParamStore,
    init_state: &RecurrentState,
    cfg: &TrainerConfig,
    epoch: usize,
    first_episode: u64,
) -> Result<ChunkRollout> {
    if frames.len() != gts.len() {
        return Err(Error::dim("chunk ground truth", frames.len(), gts.len()));
    }
    if frames.is_empty() || frames.len() > cfg.chunk_len {
        return Err(Error::Data(format!(
            "chunk has {} frames; expected between 1 and {}",
            frames.len(),
            cfg.chunk_len
        )));
    }
    let fw = forward_chunk(frames, params, init_state)?;
    let reward = select_reward(epoch, cfg);
    let episodes = (0..cfg.episodes as u64)
        .map(|i| {
            let mut rng = episode_rng(cfg.seed, first_episode + i);
            let mut locations = Vec::with_capacity(frames.len());
            let mut rewards = Vec::with_capacity(frames.len());
            for (mu, g) in fw.mus.iter().zip(gts) {
                let l = sample_location(&PolicyOutput::new(*mu, cfg.sigma), &mut rng)?;
                rewards.push(reward.score(&l, g));
                locations.push(l);
            }
            Ok(Episode {
                locations,
                rewards,
                mus: fw.mus.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChunkRollout {
        episodes,
        cache: fw.cache,
        final_state: fw.final_state,
    })
}

/// Per-step returns of one episode under `mode`.
pub fn episode_returns(ep: &Episode, mode: ReturnMode) -> Vec<f64> {
    match mode {
        ReturnMode::PerStep => ep.rewards.clone(),
        ReturnMode::RewardToGo => {
            let mut out = vec![0.0; ep.rewards.len()];
            let mut acc = 0.0;
            for (o, r) in out.iter_mut().zip(&ep.rewards).rev() {
                acc += r;
                *o = acc;
            }
            out
        }
        ReturnMode::Total => vec![ep.total_reward(); ep.rewards.len()],
    }
}

fn check_episodes(episodes: &[Episode]) -> Result<usize> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::Data("no episodes to estimate from".into()))?;
    let t = first.rewards.len();
    for ep in episodes {
        for (what, len) in [
            ("episode rewards", ep.rewards.len()),
            ("episode locations", ep.locations.len()),
            ("episode mus", ep.mus.len()),
        ] {
            if len != t {
                return Err(Error::dim(what, t, len));
            }
        }
    }
    Ok(t)
}

/// Mean return across episodes at each step.
pub fn compute_baseline(episodes: &[Episode], mode: ReturnMode) -> Result<Vec<f64>> {
    let t = check_episodes(episodes)?;
    let mut b = vec![0.0; t];
    for ep in episodes {
        for (bt, g) in b.iter_mut().zip(episode_returns(ep, mode)) {
            *bt += g;
        }
    }
    let n = episodes.len() as f64;
    b.iter_mut().for_each(|v| *v /= n);
    Ok(b)
}

/// `A_t^i = return_t^i - b_t` for every episode.
pub fn advantages(episodes: &[Episode], baseline: &[f64], mode: ReturnMode) -> Result<Vec<Vec<f64>>> {
    let t = check_episodes(episodes)?;
    if baseline.len() != t {
        return Err(Error::dim("baseline", t, baseline.len()));
    }
    Ok(episodes
        .iter()
        .map(|ep| {
            episode_returns(ep, mode)
                .iter()
                .zip(baseline)
                .map(|(g, b)| g - b)
                .collect()
        })
        .collect())
}

/// `grad_mu[t] = (1/N) sum_i A_t^i (l_t^i - mu_t) / sigma^2`, ready for [`backward_chunk`].
///
/// `baseline` is the batch mean from [`compute_baseline`]; under
/// [`BaselineMode::LeaveOneOut`] the advantages are rescaled accordingly.
pub fn policy_gradient(episodes: &[Episode], baseline: &[f64], cfg: &TrainerConfig) -> Result<Vec<[f64; 4]>> {
    let mut adv = advantages(episodes, baseline, cfg.return_mode)?;
    let t = baseline.len();
    let n = episodes.len() as f64;
    if cfg.baseline == BaselineMode::LeaveOneOut && episodes.len() > 1 {
        let scale = n / (n - 1.0);
        adv.iter_mut().flatten().for_each(|a| *a *= scale);
    }
    let mut out = vec![[0.0; 4]; t];
    for (ep, a) in episodes.iter().zip(&adv) {
        for step in 0..t {
            let score = log_prob_grad(&ep.locations[step], &PolicyOutput::new(ep.mus[step], cfg.sigma))?;
            for k in 0..4 {
                out[step][k] += a[step] * score[k] / n;
            }
        }
    }
    Ok(out)
}

/// Adam moments shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub step: u64,
}

impl AdamState {
    pub fn new(dims: Dims) -> Self {
        AdamState {
            m: ParamGrads::zeros(dims),
            v: ParamGrads::zeros(dims),
            step: 0,
        }
    }
}

/// Bias-corrected Adam step along `grads` (ascent). Non-finite gradients abort with params untouched.
pub fn adam_update(
    params: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainerConfig,
) -> Result<()> {
    for ((name, p), g) in crate::network::TENSOR_NAMES
        .iter()
        .zip(params.tensors())
        .zip(grads.tensors())
    {
        if p.len() != g.len() {
            return Err(Error::dim(format!("gradient {name}"), p.len(), g.len()));
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("parameter gradients".into()));
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powf(state.step as f64);
    let bc2 = 1.0 - b2.powf(state.step as f64);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] += lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub reward: RewardKind,
    /// Mean cumulative reward per episode over all chunks of the epoch.
    pub mean_return: f64,
    pub max_param_delta: f64,
    pub updates: u64,
    /// Wall-clock duration; the only nondeterministic field.
    pub seconds: f64,
}

/// Mutable training state; everything needed to resume bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainerConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub updates: u64,
    /// Global rollout counter feeding [`episode_rng`].
    pub episodes_drawn: u64,
    pub history: Vec<f64>,
    pub best_return: f64,
    pub epochs_since_best: usize,
}

impl Trainer {
    pub fn new(dims: Dims, cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::init(dims, cfg.seed)?;
        Ok(Self::from_params(params, cfg))
    }

    /// Starts training from existing parameters with fresh optimizer state.
    pub fn from_params(params: ParamStore, cfg: TrainerConfig) -> Self {
        Trainer {
            adam: AdamState::new(params.dims),
            params,
            cfg,
            epoch: 0,
            updates: 0,
            episodes_drawn: 0,
            history: Vec::new(),
            best_return: f64::NEG_INFINITY,
            epochs_since_best: 0,
        }
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.max_epochs
            || (self.cfg.patience > 0 && self.epochs_since_best >= self.cfg.patience)
    }

    /// One pass over every chunk of every sequence.
    pub fn run_epoch(&mut self, dataset: &[SequenceData]) -> Result<EpochStats> {
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = anneal_lr(epoch, &self.cfg);
        let reward = select_reward(epoch, &self.cfg);
        let before = self.params.clone();
        let hidden = self.params.dims.hidden;
        let mut return_sum = 0.0;
        let mut return_count = 0usize;

        for seq in dataset {
            let mut state = RecurrentState::zeros(hidden);
            for (frames, gts) in seq
                .frames
                .chunks(self.cfg.chunk_len)
                .zip(seq.ground_truth.chunks(self.cfg.chunk_len))
            {
                let init = if self.cfg.state_carryover {
                    state.clone()
                } else {
                    RecurrentState::zeros(hidden)
                };
                let rollout = run_episodes(frames, gts, &self.params, &init, &self.cfg, epoch, self.episodes_drawn)?;
                self.episodes_drawn += rollout.episodes.len() as u64;
                for ep in &rollout.episodes {
                    let r = ep.total_reward();
                    if !r.is_finite() {
                        return Err(Error::NonFinite(format!("episode return in sequence `{}`", seq.name)));
                    }
                    return_sum += r;
                    return_count += 1;
                }
                let baseline = compute_baseline(&rollout.episodes, self.cfg.return_mode)?;
                let grad_mus = policy_gradient(&rollout.episodes, &baseline, &self.cfg)?;
                let grads = backward_chunk(&rollout.cache, &grad_mus, &self.params)?;
                adam_update(&mut self.params, &grads, &mut self.adam, lr, &self.cfg)?;
                self.updates += 1;
                state = rollout.final_state;
            }
        }
        if !self.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }

        let mean_return = if return_count > 0 {
            return_sum / return_count as f64
        } else {
            0.0
        };
        self.history.push(mean_return);
        // Returns under different reward functions are not comparable.
        if epoch == self.cfg.reward_switch_epoch && epoch > 0 {
            self.best_return = f64::NEG_INFINITY;
            self.epochs_since_best = 0;
        }
        if mean_return > self.best_return {
            self.best_return = mean_return;
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch,
            lr,
            reward,
            mean_return,
            max_param_delta: self.params.max_abs_diff(&before),
            updates: self.updates,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs epochs until [`Trainer::finished`], calling `on_epoch` after each.
    pub fn train_with<F>(&mut self, dataset: &[SequenceData], mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer, &EpochStats) -> Result<()>,
    {
        validate_dataset(dataset, self.params.dims)?;
        while !self.finished() {
            let stats = self.run_epoch(dataset)?;
            on_epoch(self, &stats)?;
        }
        Ok(())
    }
}

fn validate_dataset(dataset: &[SequenceData], dims: Dims) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for seq in dataset {
        seq.validate()?;
        if seq.feature_dim() != dims.feature {
            return Err(Error::dim(
                format!("feature dimension of sequence `{}`", seq.name),
                dims.feature,
                seq.feature_dim(),
            ));
        }
    }
    Ok(())
}

/// Trained parameters and the per-epoch mean return.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: Vec<f64>,
    pub stats: Vec<EpochStats>,
}

/// Full training run from freshly initialized parameters.
pub fn train(dataset: &[SequenceData], dims: Dims, cfg: &TrainerConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dims, cfg.clone())?;
    let mut stats = Vec::new();
    trainer.train_with(dataset, |_, s| {
        stats.push(s.clone());
        Ok(())
    })?;
    Ok(TrainOutcome {
        params: trainer.params,
        history: trainer.history,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_sequence, SynthConfig};
    use crate::policy::log_prob;
    use rand::Rng;

    fn ep(locs: &[[f64; 4]], rewards: &[f64], mus: &[[f64; 4]]) -> Episode {
        Episode {
            locations: locs.iter().map(|l| BBox::from_array(*l)).collect(),
            rewards: rewards.to_vec(),
            mus: mus.to_vec(),
        }
    }

    #[test]
    fn reward_schedule() {
        let cfg = TrainerConfig::default();
        assert_eq!(select_reward(0, &cfg), RewardKind::Early);
        assert_eq!(select_reward(299, &cfg), RewardKind::Early);
        assert_eq!(select_reward(300, &cfg), RewardKind::Late);
        let cfg = TrainerConfig {
            reward_switch_epoch: 0,
            ..cfg
        };
        assert_eq!(select_reward(0, &cfg), RewardKind::Late);
    }

    #[test]
    fn annealing_endpoints_and_midpoint() {
        let cfg = TrainerConfig::default();
        assert_eq!(anneal_lr(0, &cfg), 1e-5);
        assert_eq!(anneal_lr(500, &cfg), 1e-6);
        assert!((anneal_lr(250, &cfg) - 1e-5 * 0.1f64.sqrt()).abs() < 1e-18);
        assert!((anneal_lr(250, &cfg) - 3.162e-6).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for e in 0..=500 {
            let lr = anneal_lr(e, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainerConfig {
            chunk_len: 0,
            ..TrainerConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("trainer.chunk_len"));
        let bad = TrainerConfig {
            lr_final: 1e-4,
            ..TrainerConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("trainer.lr_final"));
        let bad = TrainerConfig {
            reward_switch_epoch: 600,
            ..TrainerConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("reward_switch_epoch"));
        let bad = TrainerConfig {
            sigma: 0.0,
            ..TrainerConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("trainer.sigma"));
        assert!("sideways".parse::<ReturnMode>().is_err());
        assert_eq!("reward-to-go".parse::<ReturnMode>().unwrap(), ReturnMode::RewardToGo);
    }

    #[test]
    fn baseline_examples() {
        let mu = [[0.0; 4]];
        let a = ep(&[[0.0; 4]], &[0.2], &mu);
        let b = ep(&[[0.0; 4]], &[0.4], &mu);
        let base = compute_baseline(&[a.clone(), b], ReturnMode::PerStep).unwrap();
        assert!((base[0] - 0.3).abs() < 1e-15);

        let only = compute_baseline(std::slice::from_ref(&a), ReturnMode::PerStep).unwrap();
        assert_eq!(only, vec![0.2]);
        let adv = advantages(std::slice::from_ref(&a), &only, ReturnMode::PerStep).unwrap();
        assert_eq!(adv, vec![vec![0.0]]);
        assert!(compute_baseline(&[], ReturnMode::PerStep).is_err());
    }

    #[test]
    fn return_modes() {
        let e = ep(&[[0.0; 4]; 3], &[1.0, 2.0, 3.0], &[[0.0; 4]; 3]);
        assert_eq!(episode_returns(&e, ReturnMode::PerStep), vec![1.0, 2.0, 3.0]);
        assert_eq!(episode_returns(&e, ReturnMode::RewardToGo), vec![6.0, 5.0, 3.0]);
        assert_eq!(episode_returns(&e, ReturnMode::Total), vec![6.0; 3]);
        let f = ep(&[[0.0; 4]; 3], &[3.0, 0.0, 1.0], &[[0.0; 4]; 3]);
        assert_eq!(compute_baseline(&[e.clone(), f.clone()], ReturnMode::Total).unwrap(), vec![5.0; 3]);
        assert_eq!(compute_baseline(&[e, f], ReturnMode::RewardToGo).unwrap(), vec![5.0, 3.0, 2.0]);
    }

    #[test]
    fn hand_evaluated_gradient() {
        let cfg = TrainerConfig {
            sigma: 0.1,
            ..TrainerConfig::default()
        };
        let mu = [[0.5, 0.5, 0.3, 0.3]];
        let e1 = ep(&[[0.6, 0.5, 0.3, 0.3]], &[1.0], &mu);
        let e2 = ep(&[[0.4, 0.5, 0.3, 0.3]], &[0.0], &mu);
        let eps = [e1, e2];
        let b = compute_baseline(&eps, ReturnMode::PerStep).unwrap();
        assert_eq!(b, vec![0.5]);
        let g = policy_gradient(&eps, &b, &cfg).unwrap();
        let want = [5.0, 0.0, 0.0, 0.0];
        for k in 0..4 {
            assert!((g[0][k] - want[k]).abs() < 1e-9, "{:?}", g);
        }
        // Each episode's baseline is the other's reward: advantages +1 and -1.
        let loo = TrainerConfig {
            baseline: BaselineMode::LeaveOneOut,
            ..cfg
        };
        let g = policy_gradient(&eps, &b, &loo).unwrap();
        assert!((g[0][0] - 10.0).abs() < 1e-9, "{:?}", g);
        assert_eq!("leave-one-out".parse::<BaselineMode>().unwrap(), BaselineMode::LeaveOneOut);
        assert!(TrainerConfig { episodes: 1, ..loo }.validate().is_err());
    }

    #[test]
    fn identical_episodes_give_zero_gradient() {
        let cfg = TrainerConfig::default();
        let e = ep(&[[0.6, 0.5, 0.3, 0.3]; 2], &[0.7, 0.1], &[[0.5, 0.5, 0.3, 0.3]; 2]);
        let eps = vec![e.clone(), e.clone(), e.clone(), e];
        let b = compute_baseline(&eps, cfg.return_mode).unwrap();
        let g = policy_gradient(&eps, &b, &cfg).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let dims = Dims::new(2, 4, 4);
        let cfg = TrainerConfig::default();
        let mut p = ParamStore::init(dims, 1).unwrap();
        let orig = p.clone();
        let mut st = AdamState::new(dims);
        adam_update(&mut p, &ParamGrads::zeros(dims), &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(p, orig);
        assert_eq!(st.step, 1);

        let mut st = AdamState::new(dims);
        let mut g = ParamGrads::zeros(dims);
        for (i, t) in g.tensors_mut().into_iter().enumerate() {
            t.iter_mut().for_each(|v| *v = if i % 2 == 0 { 0.37 } else { -2.5 });
        }
        let mut q = orig.clone();
        adam_update(&mut q, &g, &mut st, 1e-3, &cfg).unwrap();
        for (i, (a, b)) in q.tensors().iter().zip(orig.tensors()).enumerate() {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            for (x, y) in a.iter().zip(b) {
                assert!(((x - y) - sign * 1e-3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adam_rejects_nan_without_touching_params() {
        let dims = Dims::new(2, 4, 4);
        let cfg = TrainerConfig::default();
        let mut p = ParamStore::init(dims, 1).unwrap();
        let orig = p.clone();
        let mut st = AdamState::new(dims);
        let mut g = ParamGrads::zeros(dims);
        g.lstm_bias[3] = f64::NAN;
        assert!(adam_update(&mut p, &g, &mut st, 1e-3, &cfg).is_err());
        assert_eq!(p, orig);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_is_deterministic() {
        let dims = Dims::new(2, 4, 4);
        let cfg = TrainerConfig::default();
        let mut g = ParamGrads::zeros(dims);
        g.enc_weight.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin());
        let run = || {
            let mut p = ParamStore::init(dims, 1).unwrap();
            let mut st = AdamState::new(dims);
            adam_update(&mut p, &g, &mut st, 1e-2, &cfg).unwrap();
            adam_update(&mut p, &g, &mut st, 1e-2, &cfg).unwrap();
            (p, st)
        };
        assert_eq!(run(), run());
    }

    fn small_seq(seed: u64, len: usize) -> SequenceData {
        let c = SynthConfig {
            grid: 4,
            seq_len: len,
            ..SynthConfig::default()
        };
        generate_sequence(&c, seed).unwrap()
    }

    #[test]
    fn episodes_share_mus_and_tiny_sigma_collapses() {
        let seq = small_seq(1, 5);
        let dims = Dims::new(16, 8, 8);
        let p = ParamStore::init(dims, 2).unwrap();
        let cfg = TrainerConfig {
            chunk_len: 5,
            episodes: 6,
            sigma: 1e-8,
            ..TrainerConfig::default()
        };
        let r = run_episodes(&seq.frames, &seq.ground_truth, &p, &RecurrentState::zeros(8), &cfg, 0, 0).unwrap();
        assert_eq!(r.episodes.len(), 6);
        for e in &r.episodes {
            assert_eq!(e.mus, r.episodes[0].mus);
            for (a, b) in e.rewards.iter().zip(&r.episodes[0].rewards) {
                assert!((a - b).abs() < 1e-4);
            }
        }
        let one = TrainerConfig { episodes: 1, ..cfg };
        let r = run_episodes(&seq.frames, &seq.ground_truth, &p, &RecurrentState::zeros(8), &one, 0, 0).unwrap();
        assert_eq!(r.episodes.len(), 1);
    }

    #[test]
    fn training_with_tiny_sigma_barely_moves() {
        let data = vec![small_seq(1, 12), small_seq(2, 9)];
        let dims = Dims::new(16, 8, 8);
        let cfg = TrainerConfig {
            chunk_len: 4,
            episodes: 4,
            sigma: 1e-12,
            max_epochs: 1,
            reward_switch_epoch: 0,
            lr_initial: 1e-3,
            lr_final: 1e-4,
            ..TrainerConfig::default()
        };
        let out = train(&data, dims, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(out.stats[0].max_param_delta < 1e-8, "{}", out.stats[0].max_param_delta);
        // 12 frames -> 3 chunks, 9 frames -> 2 full chunks plus a trailing partial one.
        assert_eq!(out.stats[0].updates, 6);
    }

    #[test]
    fn training_is_deterministic_and_history_tracks_epochs() {
        let data = vec![small_seq(1, 12), small_seq(2, 12)];
        let dims = Dims::new(16, 8, 8);
        let cfg = TrainerConfig {
            chunk_len: 4,
            episodes: 3,
            sigma: 0.05,
            max_epochs: 6,
            reward_switch_epoch: 3,
            lr_initial: 1e-2,
            lr_final: 1e-3,
            patience: 0,
            ..TrainerConfig::default()
        };
        let a = train(&data, dims, &cfg).unwrap();
        let b = train(&data, dims, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.len(), 6);
        assert!(a.stats.iter().take(3).all(|s| s.reward == RewardKind::Early));
        assert!(a.stats.iter().skip(3).all(|s| s.reward == RewardKind::Late));
    }

    #[test]
    fn patience_stops_training() {
        let data = vec![small_seq(1, 8)];
        let dims = Dims::new(16, 8, 8);
        let cfg = TrainerConfig {
            chunk_len: 4,
            episodes: 2,
            sigma: 1e-12,
            max_epochs: 100,
            reward_switch_epoch: 0,
            patience: 3,
            ..TrainerConfig::default()
        };
        let out = train(&data, dims, &cfg).unwrap();
        assert!(out.history.len() < 100);
        assert!(train(&[], dims, &cfg).is_err());
    }

    /// `(1/N) sum_i sum_t ln pi(l_t^i | mu_t(W)) A_t^i` for frozen samples and advantages.
    fn surrogate(
        params: &ParamStore,
        frames: &[FrameObservation],
        eps: &[Episode],
        adv: &[Vec<f64>],
        sigma: f64,
    ) -> f64 {
        let fw = forward_chunk(frames, params, &RecurrentState::zeros(params.dims.hidden)).unwrap();
        let mut s = 0.0;
        for (e, a) in eps.iter().zip(adv) {
            for (t, mu) in fw.mus.iter().enumerate() {
                s += log_prob(&e.locations[t], &PolicyOutput::new(*mu, sigma)).unwrap() * a[t];
            }
        }
        s / eps.len() as f64
    }

    #[test]
    fn applied_gradient_matches_surrogate_finite_difference() {
        let seq = small_seq(4, 3);
        let dims = Dims::new(16, 6, 8);
        let p = ParamStore::init(dims, 11).unwrap();
        for mode in [ReturnMode::PerStep, ReturnMode::RewardToGo, ReturnMode::Total] {
            let cfg = TrainerConfig {
                chunk_len: 3,
                episodes: 4,
                sigma: 0.3,
                return_mode: mode,
                ..TrainerConfig::default()
            };
            let r = run_episodes(&seq.frames, &seq.ground_truth, &p, &RecurrentState::zeros(8), &cfg, 0, 0).unwrap();
            let b = compute_baseline(&r.episodes, mode).unwrap();
            let adv = advantages(&r.episodes, &b, mode).unwrap();
            let g = backward_chunk(&r.cache, &policy_gradient(&r.episodes, &b, &cfg).unwrap(), &p).unwrap();

            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let eps = 1e-5;
            for (ti, tensor) in g.tensors().iter().enumerate() {
                for _ in 0..12 {
                    let i = rng.random_range(0..tensor.len());
                    let mut up = p.clone();
                    let mut dn = p.clone();
                    up.tensors_mut()[ti][i] += eps;
                    dn.tensors_mut()[ti][i] -= eps;
                    let fd = (surrogate(&up, &seq.frames, &r.episodes, &adv, cfg.sigma)
                        - surrogate(&dn, &seq.frames, &r.episodes, &adv, cfg.sigma))
                        / (2.0 * eps);
                    let rel = (fd - tensor[i]).abs() / fd.abs().max(tensor[i].abs()).max(1e-6);
                    assert!(rel < 1e-4, "{mode:?} tensor {ti} idx {i}: {fd} vs {}", tensor[i]);
                }
            }
        }
    }
}
