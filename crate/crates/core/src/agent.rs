//! Q-learning machinery shared by the active and passive learners: replay,
//! ε-greedy behaviour and bootstrap-target construction for every learning rule.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;

use crate::env::Observation;
use crate::neural::{forward, NetworkParams};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_state: Observation,
    /// True for terminal *and* truncated episode ends; both bootstrap from zero.
    pub terminal: bool,
    /// Action taken at `next_state` by the behaviour policy (SARSA).
    pub next_action: usize,
    /// Discounted return from `state`, filled once the episode has ended.
    pub mc_return: Option<f64>,
}

/// Fixed-capacity FIFO ring with uniform sampling over the filled slots.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
            pushed: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of pushes since creation.
    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, transition: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(transition);
        } else {
            self.items[self.cursor] = transition;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.pushed += 1;
    }

    /// Storage slot `slot` (not insertion order).
    pub fn get(&self, slot: usize) -> &Transition {
        &self.items[slot]
    }

    /// Stored transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Uniform slot indices, with replacement, over all filled slots.
    pub fn sample_slots(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        self.sample_recent_slots(self.len(), batch_size, rng)
    }

    /// Uniform slot indices, with replacement, over the `window` most recent items.
    pub fn sample_recent_slots(&self, window: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::usage("cannot sample from an empty replay buffer"));
        }
        let window = window.min(self.len()).max(1);
        let newest = (self.cursor + self.capacity - 1) % self.capacity;
        Ok((0..batch_size)
            .map(|_| {
                let back = rng.gen_range(0..window);
                if self.items.len() < self.capacity {
                    self.items.len() - 1 - back
                } else {
                    (newest + self.capacity - back) % self.capacity
                }
            })
            .collect())
    }

    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<Transition>> {
        Ok(self
            .sample_slots(batch_size, rng)?
            .into_iter()
            .map(|slot| self.items[slot].clone())
            .collect())
    }
}

/// Free-function form of [`ReplayBuffer::push`].
pub fn replay_push(buffer: &mut ReplayBuffer, transition: Transition) {
    buffer.push(transition);
}

/// Free-function form of [`ReplayBuffer::sample`].
pub fn replay_sample(buffer: &ReplayBuffer, batch_size: usize, rng: &mut Rng) -> Result<Vec<Transition>> {
    buffer.sample(batch_size, rng)
}

/// Training ε, optionally annealed linearly from `start` over `warmup_steps`, and
/// the evaluation ε.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub train: f64,
    pub warmup_steps: u64,
    pub eval: f64,
}

impl EpsilonSchedule {
    pub fn constant(train: f64, eval: f64) -> Self {
        Self {
            start: train,
            train,
            warmup_steps: 0,
            eval,
        }
    }

    pub fn value(&self, step: u64) -> f64 {
        if step >= self.warmup_steps || self.warmup_steps == 0 {
            return self.train;
        }
        let progress = step as f64 / self.warmup_steps as f64;
        self.start + (self.train - self.start) * progress
    }

    pub fn validate(&self) -> Result<()> {
        for (key, value) in [
            ("epsilon.start", self.start),
            ("epsilon.train", self.train),
            ("epsilon.eval", self.eval),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::config(key, format!("{value} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Index of the largest value, ties broken towards the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy action per row of a Q-value matrix.
pub fn greedy_actions(q: &Array2<f64>) -> Vec<usize> {
    q.rows()
        .into_iter()
        .map(|row| argmax(row.as_slice().expect("standard layout")))
        .collect()
}

/// ε-greedy action: one uniform draw decides exploration, a second picks the
/// random action when exploring.
pub fn select_action(params: &NetworkParams, observation: &[f64], epsilon: f64, rng: &mut Rng) -> Result<usize> {
    let num_actions = params.output_dim();
    if rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..num_actions));
    }
    greedy_action(params, observation)
}

pub fn greedy_action(params: &NetworkParams, observation: &[f64]) -> Result<usize> {
    let view = ArrayView2::from_shape((1, observation.len()), observation)
        .map_err(|e| Error::usage(e.to_string()))?;
    let q = forward(params, view)?;
    Ok(argmax(q.row(0).as_slice().expect("standard layout")))
}

/// Anything that maps an observation to an action.
pub trait ActionPolicy {
    fn act(&self, observation: &[f64], rng: &mut Rng) -> usize;
}

/// The ε-greedy policy induced by a Q-network.
#[derive(Debug, Clone, Copy)]
pub struct EpsilonGreedy<'a> {
    pub params: &'a NetworkParams,
    pub epsilon: f64,
}

impl ActionPolicy for EpsilonGreedy<'_> {
    fn act(&self, observation: &[f64], rng: &mut Rng) -> usize {
        select_action(self.params, observation, self.epsilon, rng)
            .expect("observation width matches the network")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetVariant {
    /// `r + γ·Q̄_P(s′, argmax Q_P(s′,·))`
    Vanilla,
    /// `r + γ·Q̄_A(s′, argmax Q_P(s′,·))`
    SameTargetQ,
    /// `r + γ·Q̄_P(s′, argmax Q_A(s′,·))`
    SameTargetPi,
    /// `r + γ·Q̄_A(s′, argmax Q_A(s′,·))`
    SameTargetBoth,
    /// `r + γ·Q̄_P(s′, a′)` with the stored next action.
    Sarsa,
    /// The stored Monte-Carlo return.
    MonteCarlo,
    /// The full output vector `Q_A(s,·)`.
    Distill,
}

impl TargetVariant {
    pub const ALL: [TargetVariant; 7] = [
        TargetVariant::Vanilla,
        TargetVariant::SameTargetQ,
        TargetVariant::SameTargetPi,
        TargetVariant::SameTargetBoth,
        TargetVariant::Sarsa,
        TargetVariant::MonteCarlo,
        TargetVariant::Distill,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetVariant::Vanilla => "vanilla",
            TargetVariant::SameTargetQ => "same_target_q",
            TargetVariant::SameTargetPi => "same_target_pi",
            TargetVariant::SameTargetBoth => "same_target_both",
            TargetVariant::Sarsa => "sarsa",
            TargetVariant::MonteCarlo => "monte_carlo",
            TargetVariant::Distill => "distill",
        }
    }

    /// Whether the target bootstraps from a value estimate at `s′`.
    pub fn bootstraps(self) -> bool {
        !matches!(self, TargetVariant::MonteCarlo | TargetVariant::Distill)
    }
}

impl fmt::Display for TargetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TargetVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| Error::config("mode.variant", format!("unknown target variant `{s}`")))
    }
}

/// A sampled minibatch in matrix form.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub terminals: Vec<bool>,
    pub next_actions: Vec<usize>,
    pub mc_returns: Vec<Option<f64>>,
}

impl Batch {
    pub fn from_transitions<'a>(rows: impl IntoIterator<Item = &'a Transition>) -> Self {
        let rows: Vec<&Transition> = rows.into_iter().collect();
        let dim = rows.first().map(|t| t.state.len()).unwrap_or(0);
        let mut states = Vec::with_capacity(rows.len() * dim);
        let mut next_states = Vec::with_capacity(rows.len() * dim);
        for t in &rows {
            states.extend_from_slice(&t.state);
            next_states.extend_from_slice(&t.next_state);
        }
        Self {
            states: Array2::from_shape_vec((rows.len(), dim), states).expect("consistent observation width"),
            next_states: Array2::from_shape_vec((rows.len(), dim), next_states)
                .expect("consistent observation width"),
            actions: rows.iter().map(|t| t.action).collect(),
            rewards: rows.iter().map(|t| t.reward).collect(),
            terminals: rows.iter().map(|t| t.terminal).collect(),
            next_actions: rows.iter().map(|t| t.next_action).collect(),
            mc_returns: rows.iter().map(|t| t.mc_return).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// The four value functions a tandem pair maintains.
#[derive(Debug, Clone, Copy)]
pub struct TargetNets<'a> {
    pub active: &'a NetworkParams,
    pub active_target: &'a NetworkParams,
    pub passive: &'a NetworkParams,
    pub passive_target: &'a NetworkParams,
}

/// Regression targets: one scalar per row, or a full output row (distillation).
#[derive(Debug, Clone, PartialEq)]
pub enum TargetValues {
    PerRow(Vec<f64>),
    Full(Array2<f64>),
}

/// Double-DQN style bootstrap `r + γ·evaluator(s′, argmax selector(s′,·))`, with
/// zero bootstrap on terminal rows.
pub fn double_q_targets(
    batch: &Batch,
    selector: &NetworkParams,
    evaluator: &NetworkParams,
    gamma: f64,
) -> Result<Vec<f64>> {
    let choose = greedy_actions(&forward(selector, batch.next_states.view())?);
    let values = forward(evaluator, batch.next_states.view())?;
    Ok(bootstrap(batch, &values, &choose, gamma))
}

fn bootstrap(batch: &Batch, values: &Array2<f64>, actions: &[usize], gamma: f64) -> Vec<f64> {
    (0..batch.len())
        .map(|r| {
            if batch.terminals[r] {
                batch.rewards[r]
            } else {
                batch.rewards[r] + gamma * values[[r, actions[r]]]
            }
        })
        .collect()
}

/// Passive-learner targets for `variant`.
pub fn compute_targets(variant: TargetVariant, batch: &Batch, nets: TargetNets<'_>, gamma: f64) -> Result<TargetValues> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::usage(format!("discount {gamma} outside [0, 1)")));
    }
    let values = match variant {
        TargetVariant::Vanilla => double_q_targets(batch, nets.passive, nets.passive_target, gamma)?,
        TargetVariant::SameTargetQ => double_q_targets(batch, nets.passive, nets.active_target, gamma)?,
        TargetVariant::SameTargetPi => double_q_targets(batch, nets.active, nets.passive_target, gamma)?,
        TargetVariant::SameTargetBoth => double_q_targets(batch, nets.active, nets.active_target, gamma)?,
        TargetVariant::Sarsa => {
            let values = forward(nets.passive_target, batch.next_states.view())?;
            bootstrap(batch, &values, &batch.next_actions, gamma)
        }
        TargetVariant::MonteCarlo => batch
            .mc_returns
            .iter()
            .map(|g| g.ok_or_else(|| Error::usage("Monte-Carlo target requested for a row without a return")))
            .collect::<Result<_>>()?,
        TargetVariant::Distill => return Ok(TargetValues::Full(forward(nets.active, batch.states.view())?)),
    };
    Ok(TargetValues::PerRow(values))
}

/// Fills `mc_return` with `G_t = r_t + γ·G_{t+1}`, computed backwards from a zero
/// return after the final transition.
pub fn backfill_mc_returns(episode: &mut [Transition], gamma: f64) {
    let mut running = 0.0;
    for t in episode.iter_mut().rev() {
        running = t.reward + gamma * running;
        t.mc_return = Some(running);
    }
}
