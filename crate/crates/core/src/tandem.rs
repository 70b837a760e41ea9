//! Experiment orchestration: the tandem pair, every protocol variant, the
//! training/evaluation schedule and the evaluation loop.
//!
//! One run is strictly sequential. All randomness comes from named streams of the
//! master seed (see [`crate::rng`]), so evaluation, probing and the passive agent's
//! own data collection never perturb the active agent's trajectory.

use std::fmt;
use std::time::Instant;

use ndarray::ArrayView2;
use rand::Rng as _;

use crate::agent::{
    compute_targets, double_q_targets, select_action, Batch, EpsilonGreedy, EpsilonSchedule, ReplayBuffer,
    TargetNets, TargetValues, TargetVariant, Transition, backfill_mc_returns,
};
use crate::env::{EnvName, EnvSpec, Env, Observation, StickyConfig};
use crate::metrics::{
    mc_error, policy_disagreement, relative_performance, value_overestimation, MetricsRow, OverestimationKind,
    ProbeSet,
};
use crate::neural::{
    init_params, loss_and_grads, sync_params, FreezeMask, LayerSelection, NetworkConfig, NetworkParams,
    OptimizerConfig, OptimizerKind, OptimizerState, Targets,
};
use crate::rng::{derive_seed, stream_rng, Rng, Stream};
use crate::{Error, Result};

/// The ε-greedy policy induced by a network.
pub type Policy<'a> = EpsilonGreedy<'a>;

#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentMode {
    /// Plain tandem: both agents learn from the active agent's batches.
    Vanilla,
    /// Tandem with the passive agent bootstrapping via `variant`.
    BootstrapVariant(TargetVariant),
    /// Grid over the active agent's training ε; expands into vanilla runs.
    EpsSweep(Vec<f64>),
    /// Sticky actions with the given repeat probability.
    Sticky(f64),
    /// The passive agent samples from the most recent `capacity` transitions.
    ReplaySize(usize),
    /// Forked: the active policy is frozen and keeps generating data.
    ForkFixedPolicy { fork_iter: usize, post_fork_epsilon: f64 },
    /// Forked: the active replay is frozen and the passive agent trains on it.
    ForkFixedReplay { fork_iter: usize },
    /// Forked: the active agent keeps training but is reset to its fork-time
    /// parameters at every iteration boundary.
    Groundhog { fork_iter: usize },
    /// Both agents act; passive batch rows come from its own replay with probability `p_self`.
    SelfDataMix { p_self: f64 },
    /// `n_passive` passive updates per active update.
    UpdateRatio { n_passive: usize },
    /// Forked: passive SARSA evaluation of the frozen active policy.
    SarsaEval { fork_iter: usize },
    /// Forked: passive regression on Monte-Carlo returns of the frozen active policy.
    MonteCarloEval { fork_iter: usize, fresh_init: bool },
    /// Passive regresses all active outputs.
    Distill,
    /// Bottom `k` layers shared from the active network and never trained passively.
    TiedLayers { k: usize },
    /// Grid over depth × width; expands into vanilla runs.
    ArchSweep { depths: Vec<usize>, widths: Vec<usize> },
    /// Both agents use the given optimizer.
    OptimizerChoice(OptimizerKind),
}

impl ExperimentMode {
    pub fn tag(&self) -> &'static str {
        match self {
            ExperimentMode::Vanilla => "vanilla",
            ExperimentMode::BootstrapVariant(_) => "bootstrap_variant",
            ExperimentMode::EpsSweep(_) => "eps_sweep",
            ExperimentMode::Sticky(_) => "sticky",
            ExperimentMode::ReplaySize(_) => "replay_size",
            ExperimentMode::ForkFixedPolicy { .. } => "fork_fixed_policy",
            ExperimentMode::ForkFixedReplay { .. } => "fork_fixed_replay",
            ExperimentMode::Groundhog { .. } => "groundhog",
            ExperimentMode::SelfDataMix { .. } => "self_data_mix",
            ExperimentMode::UpdateRatio { .. } => "update_ratio",
            ExperimentMode::SarsaEval { .. } => "sarsa_eval",
            ExperimentMode::MonteCarloEval { .. } => "mc_eval",
            ExperimentMode::Distill => "distill",
            ExperimentMode::TiedLayers { .. } => "tied_layers",
            ExperimentMode::ArchSweep { .. } => "arch_sweep",
            ExperimentMode::OptimizerChoice(_) => "optimizer_choice",
        }
    }

    pub fn fork_iter(&self) -> Option<usize> {
        match *self {
            ExperimentMode::ForkFixedPolicy { fork_iter, .. }
            | ExperimentMode::ForkFixedReplay { fork_iter }
            | ExperimentMode::Groundhog { fork_iter }
            | ExperimentMode::SarsaEval { fork_iter }
            | ExperimentMode::MonteCarloEval { fork_iter, .. } => Some(fork_iter),
            _ => None,
        }
    }

    /// Grid modes describe several runs and must be expanded first.
    pub fn is_grid(&self) -> bool {
        matches!(self, ExperimentMode::EpsSweep(_) | ExperimentMode::ArchSweep { .. })
    }

    /// Learning rule of the passive agent.
    pub fn passive_variant(&self) -> TargetVariant {
        match self {
            ExperimentMode::BootstrapVariant(v) => *v,
            ExperimentMode::SarsaEval { .. } => TargetVariant::Sarsa,
            ExperimentMode::MonteCarloEval { .. } => TargetVariant::MonteCarlo,
            ExperimentMode::Distill => TargetVariant::Distill,
            _ => TargetVariant::Vanilla,
        }
    }
}

impl fmt::Display for ExperimentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Full declarative description of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    pub env: EnvName,
    pub sticky: StickyConfig,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub optimizer: OptimizerConfig,
    pub gamma: f64,
    pub epsilon: EpsilonSchedule,
    pub active_capacity: usize,
    /// Passive agent's own replay (self-mixing, evaluation forks) and its sampling
    /// window in the replay-size experiment.
    pub passive_capacity: usize,
    pub iterations: usize,
    pub steps_per_iteration: usize,
    /// Environment steps collected before the first update.
    pub learning_starts: usize,
    pub update_period: usize,
    /// Learner updates between target-network syncs.
    pub target_sync_period: usize,
    pub batch_size: usize,
    pub eval_steps: usize,
    pub n_probe: usize,
    pub overestimation: OverestimationKind,
    pub seed: u64,
    /// Wall-clock timing makes metrics files differ between otherwise identical
    /// runs, so it is opt-in; when off the column holds zeros.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: ExperimentMode::Vanilla,
            env: EnvName::CartPole,
            sticky: StickyConfig::none(),
            hidden_layers: 2,
            hidden_units: 64,
            optimizer: OptimizerConfig::adam(5e-4),
            gamma: 0.99,
            epsilon: EpsilonSchedule::constant(0.01, 0.001),
            active_capacity: 50_000,
            passive_capacity: 50_000,
            iterations: 200,
            steps_per_iteration: 1_000,
            learning_starts: 500,
            update_period: 4,
            target_sync_period: 25,
            batch_size: 128,
            eval_steps: 2_000,
            n_probe: 512,
            overestimation: OverestimationKind::MaxVsMax,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for one environment. The classic-control tasks share the
    /// Dopamine CartPole settings; the grid keeps a higher exploration rate
    /// because with epsilon 0.01 rarely visited cells never settle.
    pub fn for_env(env: EnvName) -> Self {
        let base = Self { env, ..Self::default() };
        match env {
            EnvName::GridWorld => Self {
                epsilon: EpsilonSchedule::constant(0.1, 0.05),
                ..base
            },
            _ => base,
        }
    }

    /// Repeat probability actually applied to the environments.
    pub fn effective_sticky(&self) -> StickyConfig {
        match self.mode {
            ExperimentMode::Sticky(p) => StickyConfig { repeat_probability: p },
            _ => self.sticky,
        }
    }

    pub fn effective_passive_capacity(&self) -> usize {
        match self.mode {
            ExperimentMode::ReplaySize(capacity) => capacity,
            _ => self.passive_capacity,
        }
    }

    pub fn effective_optimizer(&self) -> OptimizerConfig {
        match self.mode {
            ExperimentMode::OptimizerChoice(kind) if kind != self.optimizer.kind => self.optimizer.with_kind(kind),
            _ => self.optimizer,
        }
    }

    pub fn env_spec(&self) -> EnvSpec {
        Env::new(self.env, StickyConfig::none(), 0).spec()
    }

    pub fn network_config(&self) -> NetworkConfig {
        let spec = self.env_spec();
        NetworkConfig::new(spec.obs_dim, self.hidden_layers, self.hidden_units, spec.num_actions)
    }

    /// Checks every value; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("experiment.iterations", self.iterations),
            ("experiment.steps_per_iteration", self.steps_per_iteration),
            ("experiment.learning_starts", self.learning_starts),
            ("experiment.update_period", self.update_period),
            ("experiment.target_sync_period", self.target_sync_period),
            ("experiment.batch_size", self.batch_size),
            ("experiment.eval_steps", self.eval_steps),
            ("metrics.n_probe", self.n_probe),
            ("replay.active_capacity", self.active_capacity),
            ("replay.passive_capacity", self.passive_capacity),
            ("network.hidden_units", self.hidden_units),
        ];
        for (key, value) in positive {
            if value == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.batch_size > self.active_capacity {
            return Err(Error::config(
                "experiment.batch_size",
                format!("{} exceeds the active replay capacity {}", self.batch_size, self.active_capacity),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("experiment.gamma", format!("{} outside [0, 1)", self.gamma)));
        }
        self.epsilon.validate()?;
        StickyConfig::new(self.sticky.repeat_probability)?;
        let opt = self.optimizer;
        if !(opt.learning_rate > 0.0 && opt.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be positive"));
        }
        for (key, value) in [("optimizer.rho", opt.rho), ("optimizer.beta1", opt.beta1), ("optimizer.beta2", opt.beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(Error::config(key, format!("{value} outside [0, 1)")));
            }
        }
        if opt.epsilon < 0.0 {
            return Err(Error::config("optimizer.epsilon", "must be non-negative"));
        }
        self.validate_mode()
    }

    fn validate_mode(&self) -> Result<()> {
        let unit = |key: &str, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(Error::config(key, format!("{value} outside [0, 1]")))
            }
        };
        if let Some(fork_iter) = self.mode.fork_iter() {
            if fork_iter == 0 || fork_iter >= self.iterations {
                return Err(Error::config(
                    "mode.fork_iter",
                    format!("must lie in [1, {}) (iterations = {})", self.iterations, self.iterations),
                ));
            }
        }
        match &self.mode {
            ExperimentMode::BootstrapVariant(v) => {
                if !v.bootstraps() {
                    return Err(Error::config(
                        "mode.variant",
                        format!("`{v}` does not bootstrap; use the mc_eval or distill modes"),
                    ));
                }
            }
            ExperimentMode::EpsSweep(list) => {
                if list.is_empty() {
                    return Err(Error::config("mode.epsilons", "empty list"));
                }
                for &e in list {
                    unit("mode.epsilons", e)?;
                }
            }
            ExperimentMode::Sticky(p) => unit("mode.sticky", *p)?,
            ExperimentMode::ReplaySize(capacity) => {
                if *capacity < 1 {
                    return Err(Error::config("mode.capacity", "must be positive"));
                }
            }
            ExperimentMode::ForkFixedPolicy { post_fork_epsilon, .. } => {
                unit("mode.post_fork_epsilon", *post_fork_epsilon)?
            }
            ExperimentMode::SelfDataMix { p_self } => unit("mode.p_self", *p_self)?,
            ExperimentMode::UpdateRatio { n_passive } => {
                if *n_passive == 0 {
                    return Err(Error::config("mode.n_passive", "must be at least 1"));
                }
            }
            ExperimentMode::TiedLayers { k } => {
                let layers = self.hidden_layers + 1;
                if *k > layers {
                    return Err(Error::config(
                        "mode.k",
                        format!("{k} shared layers requested but the network has {layers}"),
                    ));
                }
            }
            ExperimentMode::ArchSweep { depths, widths } => {
                if depths.is_empty() {
                    return Err(Error::config("mode.depths", "empty list"));
                }
                if widths.is_empty() || widths.contains(&0) {
                    return Err(Error::config("mode.widths", "must be a non-empty list of positive widths"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Expands grid modes into (cell label, vanilla config) pairs; other modes
    /// yield themselves with an empty label.
    pub fn expand(&self) -> Vec<(String, ExperimentConfig)> {
        match &self.mode {
            ExperimentMode::EpsSweep(list) => list
                .iter()
                .map(|&eps| {
                    let mut cfg = self.clone();
                    cfg.mode = ExperimentMode::Vanilla;
                    cfg.epsilon.train = eps;
                    if cfg.epsilon.warmup_steps == 0 {
                        cfg.epsilon.start = eps;
                    }
                    (format!("eps{eps}"), cfg)
                })
                .collect(),
            ExperimentMode::ArchSweep { depths, widths } => depths
                .iter()
                .flat_map(|&d| widths.iter().map(move |&w| (d, w)))
                .map(|(depth, width)| {
                    let mut cfg = self.clone();
                    cfg.mode = ExperimentMode::Vanilla;
                    cfg.hidden_layers = depth;
                    cfg.hidden_units = width;
                    (format!("depth{depth}_width{width}"), cfg)
                })
                .collect(),
            _ => vec![(String::new(), self.clone())],
        }
    }
}

/// Online network, its target copy, optimizer state and trainable-layer mask.
#[derive(Debug, Clone)]
pub struct Learner {
    pub online: NetworkParams,
    pub target: NetworkParams,
    pub optimizer: OptimizerState,
    pub mask: FreezeMask,
    pub updates: u64,
}

impl Learner {
    pub fn new(params: NetworkParams, optimizer: OptimizerConfig) -> Self {
        let optimizer = OptimizerState::new(optimizer, &params);
        let mask = FreezeMask::all_trainable(params.num_layers());
        Self {
            target: params.clone(),
            online: params,
            optimizer,
            mask,
            updates: 0,
        }
    }

    pub fn sync_target(&mut self) {
        self.target.clone_from(&self.online);
    }

    /// One gradient step on `states` towards `targets`; returns the loss.
    pub fn train(&mut self, states: ArrayView2<f64>, targets: Targets<'_>) -> Result<f64> {
        let (loss, grads) = loss_and_grads(&self.online, states, targets, &self.mask)?;
        self.optimizer.step(&mut self.online, &grads, &self.mask)?;
        self.updates += 1;
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct TandemPair {
    pub active: Learner,
    pub passive: Learner,
}

impl TandemPair {
    pub fn nets(&self) -> TargetNets<'_> {
        TargetNets {
            active: &self.active.online,
            active_target: &self.active.target,
            passive: &self.passive.online,
            passive_target: &self.passive.target,
        }
    }
}

/// Duplicates the active agent into the passive slot. With `fresh_init` the passive
/// online network is re-drawn from `seed` instead (and gets a fresh optimizer); its
/// target is synced to the new online network either way.
pub fn fork(pair: &mut TandemPair, fresh_init: bool, config: &NetworkConfig, seed: u64) {
    let mask = pair.passive.mask.clone();
    if fresh_init {
        let params = init_params(config, seed);
        let optimizer = pair.passive.optimizer.config;
        pair.passive = Learner::new(params, optimizer);
    } else {
        pair.passive = pair.active.clone();
        pair.passive.updates = 0;
    }
    pair.passive.mask = mask;
    pair.passive.sync_target();
}

/// Restores the active agent to a fork-time snapshot (networks and optimizer).
pub fn groundhog_reset(active: &mut Learner, snapshot: &Learner) {
    active.online.clone_from(&snapshot.online);
    active.target.clone_from(&snapshot.target);
    active.optimizer.clone_from(&snapshot.optimizer);
}

/// Which buffer a training row was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOrigin {
    Active,
    Passive,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledRow {
    pub origin: RowOrigin,
    pub slot: usize,
}

/// Replaces each row independently, with probability `p_self`, by a uniform draw
/// from `passive`. The coin flips and replacement draws use `mix_rng` only, so the
/// base rows are unaffected by `p_self`.
pub fn mix_rows(
    rows: &mut [SampledRow],
    passive: &ReplayBuffer,
    p_self: f64,
    mix_rng: &mut Rng,
) -> Result<()> {
    for row in rows.iter_mut() {
        if mix_rng.gen::<f64>() < p_self {
            if passive.is_empty() {
                return Err(Error::usage("passive replay is empty"));
            }
            row.origin = RowOrigin::Passive;
            row.slot = mix_rng.gen_range(0..passive.len());
        }
    }
    Ok(())
}

/// Buffers a protocol may sample from.
#[derive(Debug, Clone, Copy)]
pub struct ReplaySources<'a> {
    pub active: &'a ReplayBuffer,
    pub passive: Option<&'a ReplayBuffer>,
    pub frozen: Option<&'a ReplayBuffer>,
}

/// Draws the passive agent's training rows for `mode`: from the active replay, from
/// the frozen snapshot (fixed replay), from its own evaluation data (SARSA / MC
/// evaluation), or mixed with its own replay at rate `p_self` (self-data mixing).
pub fn sample_training_batch(
    mode: &ExperimentMode,
    sources: ReplaySources<'_>,
    batch_size: usize,
    sample_rng: &mut Rng,
    mix_rng: &mut Rng,
) -> Result<Vec<SampledRow>> {
    fn need<'b>(buffer: Option<&'b ReplayBuffer>, what: &str, mode: &ExperimentMode) -> Result<&'b ReplayBuffer> {
        buffer.ok_or_else(|| Error::usage(format!("{what} replay required by {mode} is missing")))
    }
    let draw = |buffer: &ReplayBuffer, origin: RowOrigin, rng: &mut Rng| -> Result<Vec<SampledRow>> {
        Ok(buffer
            .sample_slots(batch_size, rng)?
            .into_iter()
            .map(|slot| SampledRow { origin, slot })
            .collect())
    };
    match mode {
        ExperimentMode::ForkFixedReplay { .. } => draw(need(sources.frozen, "frozen", mode)?, RowOrigin::Frozen, sample_rng),
        ExperimentMode::SarsaEval { .. } | ExperimentMode::MonteCarloEval { .. } => {
            draw(need(sources.passive, "passive", mode)?, RowOrigin::Passive, sample_rng)
        }
        ExperimentMode::SelfDataMix { p_self } => {
            let mut rows = draw(sources.active, RowOrigin::Active, sample_rng)?;
            mix_rows(&mut rows, need(sources.passive, "passive", mode)?, *p_self, mix_rng)?;
            Ok(rows)
        }
        _ => draw(sources.active, RowOrigin::Active, sample_rng),
    }
}

/// Mean undiscounted return of the ε-greedy policy of `params` on a fresh
/// environment. Episodes run until `eval_steps` total steps have been taken; the
/// episode cut off by the budget is discarded unless no episode completed.
pub fn evaluate(
    params: &NetworkParams,
    env: EnvName,
    sticky: StickyConfig,
    epsilon: f64,
    eval_steps: usize,
    seed: u64,
) -> Result<f64> {
    if eval_steps == 0 {
        return Err(Error::usage("eval_steps must be at least 1"));
    }
    let mut env = Env::new(env, sticky, derive_seed(seed, Stream::Env, 0));
    let mut rng = stream_rng(seed, Stream::Exploration, 0);
    let mut completed = Vec::new();
    let mut steps = 0;
    let mut obs = env.reset();
    let mut current = 0.0;
    loop {
        let action = select_action(params, &obs, epsilon, &mut rng)?;
        let step = env.step(action)?;
        current += step.reward;
        steps += 1;
        if step.done() {
            completed.push(current);
            current = 0.0;
            obs = env.reset();
        } else {
            obs = step.observation;
        }
        if steps >= eval_steps {
            break;
        }
    }
    if completed.is_empty() {
        completed.push(current);
    }
    Ok(completed.iter().sum::<f64>() / completed.len() as f64)
}

/// Outcome of one passive update.
#[derive(Debug, Clone)]
pub struct PassiveUpdate {
    pub loss: f64,
    pub targets: TargetValues,
}

/// Computes the passive targets for `variant` and applies one gradient step to the
/// passive online network. With `tied_k`, the bottom `k` passive layers are first
/// re-synchronized from the active network (and stay frozen by the passive mask).
pub fn passive_update(
    pair: &mut TandemPair,
    variant: TargetVariant,
    batch: &Batch,
    gamma: f64,
    tied_k: Option<usize>,
) -> Result<PassiveUpdate> {
    let targets = compute_targets(variant, batch, pair.nets(), gamma)?;
    let loss = apply_passive(pair, batch, &targets, tied_k)?;
    Ok(PassiveUpdate { loss, targets })
}

fn apply_passive(pair: &mut TandemPair, batch: &Batch, targets: &TargetValues, tied_k: Option<usize>) -> Result<f64> {
    if let Some(k) = tied_k {
        sync_params(&pair.active.online, &mut pair.passive.online, LayerSelection::BottomK(k))?;
    }
    match targets {
        TargetValues::PerRow(values) => pair.passive.train(
            batch.states.view(),
            Targets::Selected {
                actions: &batch.actions,
                values,
            },
        ),
        TargetValues::Full(matrix) => pair.passive.train(batch.states.view(), Targets::Full(matrix.view())),
    }
}

/// What one learner update step delivered, for observers.
#[derive(Debug)]
pub struct UpdateEvent<'a> {
    /// Zero-based learner update index within the run.
    pub index: u64,
    pub active_targets: Option<&'a [f64]>,
    pub passive_targets: &'a [TargetValues],
    pub active_rows: Option<&'a [SampledRow]>,
    pub passive_rows: &'a [Vec<SampledRow>],
}

/// Hook for tests and diagnostics that need to see every update.
pub trait UpdateObserver {
    fn on_update(&mut self, event: &UpdateEvent<'_>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Both agents learn side by side (non-forked protocols).
    Tandem,
    /// Forked protocol before the fork: only the active agent learns.
    PreFork,
    /// Forked protocol after the fork.
    PostFork,
}

/// A run in progress. [`run_experiment`] drives it to completion; tests can step it
/// one iteration at a time and inspect the pair in between.
pub struct Experiment {
    config: ExperimentConfig,
    net_config: NetworkConfig,
    sticky: StickyConfig,
    pair: TandemPair,
    env: Env,
    obs: Observation,
    pending: Option<Transition>,
    replay: ReplayBuffer,
    /// Own-data replay (self mixing) or evaluation data (SARSA / MC forks).
    passive_replay: Option<ReplayBuffer>,
    frozen_replay: Option<ReplayBuffer>,
    passive_env: Option<(Env, Observation, Option<Transition>)>,
    episode: Vec<Transition>,
    snapshot: Option<Learner>,
    exploration_rng: Rng,
    sampling_rng: Rng,
    passive_exploration_rng: Rng,
    mixing_rng: Rng,
    extra_rng: Rng,
    phase: Phase,
    iteration: usize,
    env_steps: u64,
    learner_updates: u64,
    rows: Vec<MetricsRow>,
    observer: Option<Box<dyn UpdateObserver>>,
}

impl fmt::Debug for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Experiment")
            .field("mode", &self.config.mode)
            .field("iteration", &self.iteration)
            .field("env_steps", &self.env_steps)
            .finish()
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        if config.mode.is_grid() {
            return Err(Error::config(
                "mode.tag",
                format!("`{}` describes several runs; expand it (e.g. with the sweep command)", config.mode),
            ));
        }
        let seed = config.seed;
        let net_config = config.network_config();
        let optimizer = config.effective_optimizer();
        let sticky = config.effective_sticky();
        let active = Learner::new(init_params(&net_config, derive_seed(seed, Stream::InitActive, 0)), optimizer);
        let mut passive = Learner::new(init_params(&net_config, derive_seed(seed, Stream::InitPassive, 0)), optimizer);
        if let ExperimentMode::TiedLayers { k } = config.mode {
            passive.mask = FreezeMask::freeze_bottom(net_config.num_layers(), k);
            sync_params(&active.online, &mut passive.online, LayerSelection::BottomK(k))?;
            passive.sync_target();
        }
        let mut env = Env::new(config.env, sticky, derive_seed(seed, Stream::Env, 0));
        let obs = env.reset();
        let replay_capacity = match config.mode {
            ExperimentMode::ReplaySize(c) => c.max(config.active_capacity),
            _ => config.active_capacity,
        };
        let (passive_env, passive_replay) = match config.mode {
            ExperimentMode::SelfDataMix { .. } => {
                let mut env = Env::new(config.env, sticky, derive_seed(seed, Stream::PassiveEnv, 0));
                let obs = env.reset();
                (Some((env, obs, None)), Some(ReplayBuffer::new(config.passive_capacity)))
            }
            _ => (None, None),
        };
        let phase = if config.mode.fork_iter().is_some() {
            Phase::PreFork
        } else {
            Phase::Tandem
        };
        Ok(Self {
            net_config,
            sticky,
            pair: TandemPair { active, passive },
            env,
            obs,
            pending: None,
            replay: ReplayBuffer::new(replay_capacity),
            passive_replay,
            frozen_replay: None,
            passive_env,
            episode: Vec::new(),
            snapshot: None,
            exploration_rng: stream_rng(seed, Stream::Exploration, 0),
            sampling_rng: stream_rng(seed, Stream::ReplaySampling, 0),
            passive_exploration_rng: stream_rng(seed, Stream::PassiveExploration, 0),
            mixing_rng: stream_rng(seed, Stream::Mixing, 0),
            extra_rng: stream_rng(seed, Stream::PassiveExtraBatches, 0),
            phase,
            iteration: 0,
            env_steps: 0,
            learner_updates: 0,
            rows: Vec::new(),
            observer: None,
            config,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn pair(&self) -> &TandemPair {
        &self.pair
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn passive_replay(&self) -> Option<&ReplayBuffer> {
        self.passive_replay.as_ref()
    }

    pub fn frozen_replay(&self) -> Option<&ReplayBuffer> {
        self.frozen_replay.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_forked(&self) -> bool {
        self.phase == Phase::PostFork
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn set_observer(&mut self, observer: Box<dyn UpdateObserver>) {
        self.observer = Some(observer);
    }

    pub fn take_observer(&mut self) -> Option<Box<dyn UpdateObserver>> {
        self.observer.take()
    }

    fn generates_data(&self) -> bool {
        !(self.phase == Phase::PostFork && matches!(self.config.mode, ExperimentMode::ForkFixedReplay { .. }))
    }

    fn active_learns(&self) -> bool {
        match self.phase {
            Phase::Tandem | Phase::PreFork => true,
            Phase::PostFork => matches!(self.config.mode, ExperimentMode::Groundhog { .. }),
        }
    }

    fn passive_learns(&self) -> bool {
        self.phase != Phase::PreFork
    }

    /// Runs one training iteration followed by evaluation and returns its metrics
    /// row. `relative_perf` is relative to the iterations run so far; [`finish`]
    /// recomputes it over the whole run.
    ///
    /// [`finish`]: Experiment::finish
    pub fn run_iteration(&mut self) -> Result<MetricsRow> {
        if self.is_finished() {
            return Err(Error::usage("experiment already finished"));
        }
        let started = self.config.record_wall_time.then(Instant::now);
        if self.phase == Phase::PostFork && self.iteration > self.config.mode.fork_iter().unwrap_or(0) {
            if let (ExperimentMode::Groundhog { .. }, Some(snapshot)) = (&self.config.mode, &self.snapshot) {
                groundhog_reset(&mut self.pair.active, snapshot);
            }
        }
        let mut active_losses = Vec::new();
        let mut passive_losses = Vec::new();
        for _ in 0..self.config.steps_per_iteration {
            if self.generates_data() {
                self.collect_step()?;
            }
            self.env_steps += 1;
            if self.env_steps >= self.config.learning_starts as u64
                && self.env_steps % self.config.update_period as u64 == 0
            {
                self.learn(&mut active_losses, &mut passive_losses)?;
            }
        }
        if self.phase == Phase::PreFork && Some(self.iteration + 1) == self.config.mode.fork_iter() {
            self.do_fork();
        }
        let row = self.measure(started, &active_losses, &passive_losses)?;
        self.rows.push(row);
        let active: Vec<f64> = self.rows.iter().map(|r| r.active_return).collect();
        let passive: Vec<f64> = self.rows.iter().map(|r| r.passive_return).collect();
        let relative = relative_performance(&active, &passive)?;
        let last = self.rows.last_mut().expect("row just pushed");
        last.relative_perf = *relative.last().expect("non-empty");
        self.iteration += 1;
        Ok(last.clone())
    }

    /// Runs the remaining iterations.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_iteration()?;
        }
        Ok(())
    }

    /// Metrics rows with relative performance computed over the full run.
    pub fn finish(self) -> Result<Vec<MetricsRow>> {
        let mut rows = self.rows;
        if rows.is_empty() {
            return Ok(rows);
        }
        let active: Vec<f64> = rows.iter().map(|r| r.active_return).collect();
        let passive: Vec<f64> = rows.iter().map(|r| r.passive_return).collect();
        for (row, rel) in rows.iter_mut().zip(relative_performance(&active, &passive)?) {
            row.relative_perf = rel;
        }
        Ok(rows)
    }

    fn behaviour_epsilon(&self) -> f64 {
        match self.config.mode {
            ExperimentMode::ForkFixedPolicy { post_fork_epsilon, .. } if self.phase == Phase::PostFork => {
                post_fork_epsilon
            }
            _ => self.config.epsilon.value(self.env_steps),
        }
    }

    fn collect_step(&mut self) -> Result<()> {
        let epsilon = self.behaviour_epsilon();
        let action = select_action(&self.pair.active.online, &self.obs, epsilon, &mut self.exploration_rng)?;
        if let Some(mut previous) = self.pending.take() {
            previous.next_action = action;
            self.store(previous);
        }
        let step = self.env.step(action)?;
        let done = step.done();
        let transition = Transition {
            state: std::mem::take(&mut self.obs),
            action,
            reward: step.reward,
            next_state: step.observation.clone(),
            terminal: done,
            next_action: 0,
            mc_return: None,
        };
        if done {
            self.store(transition);
            self.obs = self.env.reset();
        } else {
            self.pending = Some(transition);
            self.obs = step.observation;
        }

        if let Some((env, obs, pending)) = self.passive_env.as_mut() {
            let epsilon = self.config.epsilon.value(self.env_steps);
            let action = select_action(&self.pair.passive.online, obs, epsilon, &mut self.passive_exploration_rng)?;
            let own = self.passive_replay.as_mut().expect("self-mixing keeps a passive replay");
            if let Some(mut previous) = pending.take() {
                previous.next_action = action;
                own.push(previous);
            }
            let step = env.step(action)?;
            let done = step.done();
            let transition = Transition {
                state: std::mem::take(obs),
                action,
                reward: step.reward,
                next_state: step.observation.clone(),
                terminal: done,
                next_action: 0,
                mc_return: None,
            };
            if done {
                own.push(transition);
                *obs = env.reset();
            } else {
                *pending = Some(transition);
                *obs = step.observation;
            }
        }
        Ok(())
    }

    /// Routes a completed transition (its next action now known) to the buffers.
    fn store(&mut self, transition: Transition) {
        if self.phase == Phase::PostFork {
            match self.config.mode {
                ExperimentMode::SarsaEval { .. } => {
                    if let Some(buffer) = self.passive_replay.as_mut() {
                        buffer.push(transition.clone());
                    }
                }
                ExperimentMode::MonteCarloEval { .. } => {
                    let terminal = transition.terminal;
                    self.episode.push(transition.clone());
                    if terminal {
                        let mut episode = std::mem::take(&mut self.episode);
                        backfill_mc_returns(&mut episode, self.config.gamma);
                        if let Some(buffer) = self.passive_replay.as_mut() {
                            for t in episode {
                                buffer.push(t);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        self.replay.push(transition);
    }

    fn do_fork(&mut self) {
        if let Some(pending) = self.pending.take() {
            self.replay.push(pending);
        }
        self.obs = self.env.reset();
        let fresh_init = matches!(self.config.mode, ExperimentMode::MonteCarloEval { fresh_init: true, .. });
        fork(
            &mut self.pair,
            fresh_init,
            &self.net_config,
            derive_seed(self.config.seed, Stream::InitPassive, 1),
        );
        match self.config.mode {
            ExperimentMode::ForkFixedReplay { .. } => self.frozen_replay = Some(self.replay.clone()),
            ExperimentMode::Groundhog { .. } => self.snapshot = Some(self.pair.active.clone()),
            ExperimentMode::SarsaEval { .. } | ExperimentMode::MonteCarloEval { .. } => {
                self.passive_replay = Some(ReplayBuffer::new(self.config.effective_passive_capacity()));
            }
            _ => {}
        }
        self.phase = Phase::PostFork;
    }

    fn rows_to_batch(&self, rows: &[SampledRow]) -> Batch {
        Batch::from_transitions(rows.iter().map(|row| match row.origin {
            RowOrigin::Active => self.replay.get(row.slot),
            RowOrigin::Passive => self.passive_replay.as_ref().expect("passive replay").get(row.slot),
            RowOrigin::Frozen => self.frozen_replay.as_ref().expect("frozen replay").get(row.slot),
        }))
    }

    fn active_window(&self) -> usize {
        self.config.active_capacity
    }

    fn sample_active_rows(&mut self, window: usize, rng_is_extra: bool) -> Result<Vec<SampledRow>> {
        let rng = if rng_is_extra { &mut self.extra_rng } else { &mut self.sampling_rng };
        Ok(self
            .replay
            .sample_recent_slots(window, self.config.batch_size, rng)?
            .into_iter()
            .map(|slot| SampledRow {
                origin: RowOrigin::Active,
                slot,
            })
            .collect())
    }

    /// Rows for one passive update. `shared` holds the active agent's rows when the
    /// active agent learned in this step.
    fn passive_rows(&mut self, shared: Option<&[SampledRow]>, extra: bool) -> Result<Option<Vec<SampledRow>>> {
        let mode = self.config.mode.clone();
        let passive_window = self.config.effective_passive_capacity();
        let rows = match &mode {
            ExperimentMode::ForkFixedReplay { .. } if self.phase == Phase::PostFork => {
                let frozen = self.frozen_replay.as_ref().expect("frozen at fork");
                let rng = if extra { &mut self.extra_rng } else { &mut self.sampling_rng };
                frozen
                    .sample_slots(self.config.batch_size, rng)?
                    .into_iter()
                    .map(|slot| SampledRow { origin: RowOrigin::Frozen, slot })
                    .collect()
            }
            ExperimentMode::SarsaEval { .. } | ExperimentMode::MonteCarloEval { .. } if self.phase == Phase::PostFork => {
                let buffer = self.passive_replay.as_ref().expect("evaluation replay");
                if buffer.is_empty() {
                    return Ok(None);
                }
                let rng = if extra { &mut self.extra_rng } else { &mut self.sampling_rng };
                buffer
                    .sample_slots(self.config.batch_size, rng)?
                    .into_iter()
                    .map(|slot| SampledRow { origin: RowOrigin::Passive, slot })
                    .collect()
            }
            ExperimentMode::SelfDataMix { p_self } => {
                let mut rows = match (shared, extra) {
                    (Some(rows), false) => rows.to_vec(),
                    _ => self.sample_active_rows(self.active_window(), extra)?,
                };
                let own = self.passive_replay.as_ref().expect("self-mixing keeps a passive replay");
                mix_rows(&mut rows, own, *p_self, &mut self.mixing_rng)?;
                rows
            }
            _ => match (shared, extra) {
                (Some(rows), false) if passive_window == self.active_window() => rows.to_vec(),
                _ => self.sample_active_rows(passive_window, extra)?,
            },
        };
        Ok(Some(rows))
    }

    fn learn(&mut self, active_losses: &mut Vec<f64>, passive_losses: &mut Vec<f64>) -> Result<()> {
        let gamma = self.config.gamma;
        let variant = self.config.mode.passive_variant();
        let tied_k = match self.config.mode {
            ExperimentMode::TiedLayers { k } => Some(k),
            _ => None,
        };
        let n_passive = match self.config.mode {
            ExperimentMode::UpdateRatio { n_passive } => n_passive,
            _ => 1,
        };

        let active_rows = if self.active_learns() {
            Some(self.sample_active_rows(self.active_window(), false)?)
        } else {
            None
        };
        let active_batch = active_rows.as_ref().map(|rows| self.rows_to_batch(rows));

        // All targets of this step are computed before any network changes.
        let active_targets = match &active_batch {
            Some(batch) => Some(double_q_targets(batch, &self.pair.active.online, &self.pair.active.target, gamma)?),
            None => None,
        };
        let mut passive_batches: Vec<(Vec<SampledRow>, Batch)> = Vec::new();
        let mut passive_targets: Vec<TargetValues> = Vec::new();
        if self.passive_learns() {
            if let Some(rows) = self.passive_rows(active_rows.as_deref(), false)? {
                let batch = if active_rows.as_deref() == Some(rows.as_slice()) {
                    active_batch.clone().expect("shared batch")
                } else {
                    self.rows_to_batch(&rows)
                };
                passive_targets.push(compute_targets(variant, &batch, self.pair.nets(), gamma)?);
                passive_batches.push((rows, batch));
            }
        }

        if let (Some(batch), Some(targets)) = (&active_batch, &active_targets) {
            let loss = self.pair.active.train(
                batch.states.view(),
                Targets::Selected {
                    actions: &batch.actions,
                    values: targets,
                },
            )?;
            active_losses.push(loss);
        }
        if let (Some((_, batch)), Some(targets)) = (passive_batches.first(), passive_targets.first()) {
            passive_losses.push(apply_passive(&mut self.pair, batch, targets, tied_k)?);
        }
        if self.passive_learns() && !passive_batches.is_empty() {
            for _ in 1..n_passive {
                let Some(rows) = self.passive_rows(None, true)? else { break };
                let batch = self.rows_to_batch(&rows);
                let update = passive_update(&mut self.pair, variant, &batch, gamma, tied_k)?;
                passive_losses.push(update.loss);
                passive_targets.push(update.targets);
                passive_batches.push((rows, batch));
            }
        }

        if let Some(observer) = self.observer.as_mut() {
            let rows: Vec<Vec<SampledRow>> = passive_batches.iter().map(|(r, _)| r.clone()).collect();
            observer.on_update(&UpdateEvent {
                index: self.learner_updates,
                active_targets: active_targets.as_deref(),
                passive_targets: &passive_targets,
                active_rows: active_rows.as_deref(),
                passive_rows: &rows,
            });
        }

        self.learner_updates += 1;
        if self.learner_updates % self.config.target_sync_period as u64 == 0 {
            if self.active_learns() {
                self.pair.active.sync_target();
            }
            if self.passive_learns() {
                self.pair.passive.sync_target();
            }
        }
        Ok(())
    }

    fn measure(&mut self, started: Option<Instant>, active_losses: &[f64], passive_losses: &[f64]) -> Result<MetricsRow> {
        let config = &self.config;
        let eval_seed = derive_seed(config.seed, Stream::Evaluation, self.iteration as u64);
        let eval = |params: &NetworkParams| {
            evaluate(params, config.env, self.sticky, config.epsilon.eval, config.eval_steps, eval_seed)
        };
        let active_return = eval(&self.pair.active.online)?;
        let passive_return = eval(&self.pair.passive.online)?;

        let mut probe_rng = stream_rng(config.seed, Stream::Probes, self.iteration as u64);
        let slots = self.replay.sample_slots(config.n_probe, &mut probe_rng)?;
        let states: Vec<&[f64]> = slots.iter().map(|&s| self.replay.get(s).state.as_slice()).collect();
        let probes = ProbeSet::from_states(&states)?;
        let disagreement = policy_disagreement(&self.pair.active.online, &self.pair.passive.online, &probes)?;
        let overestimation =
            value_overestimation(&self.pair.active.online, &self.pair.passive.online, &probes, config.overestimation)?;

        let mc = match (&config.mode, self.phase, &self.passive_replay) {
            (ExperimentMode::MonteCarloEval { .. }, Phase::PostFork, Some(buffer)) if !buffer.is_empty() => {
                let slots = buffer.sample_slots(config.n_probe, &mut probe_rng)?;
                let rows: Vec<&Transition> = slots.iter().map(|&s| buffer.get(s)).collect();
                Some(mc_error(&self.pair.passive.online, &rows)?)
            }
            _ => None,
        };

        let mean = |values: &[f64]| {
            if values.is_empty() {
                f64::NAN
            } else {
                values.iter().sum::<f64>() / values.len() as f64
            }
        };
        Ok(MetricsRow {
            iteration: self.iteration,
            active_return,
            passive_return,
            relative_perf: f64::NAN,
            disagreement,
            overestimation,
            active_loss: mean(active_losses),
            passive_loss: mean(passive_losses),
            mc_error: mc,
            wall_seconds: started.map_or(0.0, |t| t.elapsed().as_secs_f64()),
        })
    }
}

/// Validates `config`, executes every iteration and returns the metrics rows.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let mut experiment = Experiment::new(config.clone())?;
    experiment.run_to_end()?;
    experiment.finish()
}
