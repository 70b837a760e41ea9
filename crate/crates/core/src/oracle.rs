//! Ground truth that does not share code paths with the learners: exact value
//! iteration on the GridWorld and plain Monte-Carlo rollouts.

use rand::SeedableRng;

use crate::agent::{argmax, greedy_action, ActionPolicy};
use crate::env::{make_env, Env, GridWorld, StickyConfig};
use crate::neural::NetworkParams;
use crate::rng::Rng;
use crate::{Error, Result};

/// Deterministic tabular MDP; `successor`/`reward` are indexed `state * actions + action`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub successor: Vec<usize>,
    pub reward: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl TabularMdp {
    fn index(&self, state: usize, action: usize) -> usize {
        state * self.num_actions + action
    }

    pub fn step(&self, state: usize, action: usize) -> (usize, f64) {
        let i = self.index(state, action);
        (self.successor[i], self.reward[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_states * self.num_actions;
        if self.successor.len() != n || self.reward.len() != n || self.terminal.len() != self.num_states {
            return Err(Error::usage("tabular model has inconsistent table sizes"));
        }
        if self.successor.iter().any(|&s| s >= self.num_states) {
            return Err(Error::usage("tabular model has an out-of-range successor"));
        }
        Ok(())
    }

    /// Returns a copy with states relabelled so that old state `s` becomes `perm[s]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for s in 0..self.num_states {
            out.terminal[perm[s]] = self.terminal[s];
            for a in 0..self.num_actions {
                let (next, reward) = self.step(s, a);
                let i = out.index(perm[s], a);
                out.successor[i] = perm[next];
                out.reward[i] = reward;
            }
        }
        out
    }
}

/// Action values per (state, action), stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.num_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn state_value(&self, state: usize) -> f64 {
        self.row(state).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Actions within `tol` of the best value in `state`.
    pub fn optimal_actions(&self, state: usize, tol: f64) -> Vec<usize> {
        let best = self.state_value(state);
        (0..self.num_actions)
            .filter(|&a| self.get(state, a) >= best - tol)
            .collect()
    }

    /// Largest Bellman-optimality residual over all (state, action) pairs.
    pub fn bellman_residual(&self, mdp: &TabularMdp, gamma: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..mdp.num_states {
            for a in 0..mdp.num_actions {
                let backed_up = if mdp.terminal[s] {
                    0.0
                } else {
                    let (next, reward) = mdp.step(s, a);
                    reward + if mdp.terminal[next] { 0.0 } else { gamma * self.state_value(next) }
                };
                worst = worst.max((self.get(s, a) - backed_up).abs());
            }
        }
        worst
    }
}

/// Greedy policy of a Q-table over one-hot observations.
#[derive(Debug, Clone, Copy)]
pub struct TablePolicy<'a>(pub &'a QTable);

impl ActionPolicy for TablePolicy<'_> {
    fn act(&self, observation: &[f64], _rng: &mut Rng) -> usize {
        argmax(self.0.row(argmax(observation)))
    }
}

/// Builds the tabular model of the GridWorld by placing the agent on every cell and
/// stepping every action through `env` itself.
pub fn enumerate_mdp(env: &mut Env) -> Result<TabularMdp> {
    let spec = env.spec();
    let cells = env
        .grid_mut()
        .map(|g| g.num_cells())
        .ok_or_else(|| Error::usage(format!("{} has a continuous state space", env.name())))?;
    let mut mdp = TabularMdp {
        num_states: cells,
        num_actions: spec.num_actions,
        successor: vec![0; cells * spec.num_actions],
        reward: vec![0.0; cells * spec.num_actions],
        terminal: vec![false; cells],
    };
    for s in 0..cells {
        mdp.terminal[s] = s == GridWorld::GOAL;
        for a in 0..spec.num_actions {
            let i = s * spec.num_actions + a;
            if mdp.terminal[s] {
                mdp.successor[i] = s;
                continue;
            }
            env.reset_to_cell(s)?;
            let step = env.step(a)?;
            mdp.successor[i] = argmax(&step.observation);
            mdp.reward[i] = step.reward;
        }
    }
    env.reset();
    Ok(mdp)
}

/// Synchronous value iteration `Q(s,a) ← r(s,a) + γ·max_a′ Q(s′,a′)` until the
/// sup-norm change falls below `tol`. Terminal states keep value zero.
pub fn value_iteration(mdp: &TabularMdp, gamma: f64, tol: f64) -> Result<QTable> {
    mdp.validate()?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::usage(format!("discount {gamma} outside [0, 1)")));
    }
    if tol <= 0.0 {
        return Err(Error::usage("tolerance must be positive"));
    }
    let mut q = QTable {
        num_states: mdp.num_states,
        num_actions: mdp.num_actions,
        values: vec![0.0; mdp.num_states * mdp.num_actions],
    };
    loop {
        let values: Vec<f64> = (0..mdp.num_states)
            .map(|s| if mdp.terminal[s] { 0.0 } else { q.state_value(s) })
            .collect();
        let mut change: f64 = 0.0;
        for s in 0..mdp.num_states {
            if mdp.terminal[s] {
                continue;
            }
            for a in 0..mdp.num_actions {
                let (next, reward) = mdp.step(s, a);
                let updated = reward + gamma * values[next];
                let i = s * mdp.num_actions + a;
                change = change.max((updated - q.values[i]).abs());
                q.values[i] = updated;
            }
        }
        if change < tol {
            return Ok(q);
        }
    }
}

/// Fraction of non-terminal states whose greedy network action is optimal under
/// `q_star` (any optimal action counts). States are fed to the net one-hot.
pub fn policy_match(net: &NetworkParams, q_star: &QTable, mdp: &TabularMdp) -> Result<f64> {
    if net.input_dim() != mdp.num_states {
        return Err(Error::usage("network input width does not match the one-hot state encoding"));
    }
    let mut matched = 0;
    let mut counted = 0;
    for s in (0..mdp.num_states).filter(|&s| !mdp.terminal[s]) {
        let mut one_hot = vec![0.0; mdp.num_states];
        one_hot[s] = 1.0;
        let chosen = greedy_action(net, &one_hot)?;
        let scale = q_star.state_value(s).abs().max(1.0);
        if q_star.optimal_actions(s, 1e-9 * scale).contains(&chosen) {
            matched += 1;
        }
        counted += 1;
    }
    Ok(if counted == 0 { 1.0 } else { matched as f64 / counted as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutEstimate {
    pub mean: f64,
    /// Standard error of the mean; zero for a single episode.
    pub std_error: f64,
    pub episodes: usize,
}

/// Mean return of `policy` over fresh episodes; discounted when `gamma` is given.
pub fn rollout_value(
    env_name: &str,
    sticky: StickyConfig,
    policy: &dyn ActionPolicy,
    episodes: usize,
    gamma: Option<f64>,
    seed: u64,
) -> Result<RolloutEstimate> {
    if episodes == 0 {
        return Err(Error::usage("at least one episode is required"));
    }
    let mut env = make_env(env_name, sticky, seed)?;
    let mut rng = Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let discount = gamma.unwrap_or(1.0);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset();
        let mut total = 0.0;
        let mut weight = 1.0;
        loop {
            let step = env.step(policy.act(&obs, &mut rng))?;
            total += weight * step.reward;
            weight *= discount;
            if step.done() {
                break;
            }
            obs = step.observation;
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std_error = if returns.len() > 1 {
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(RolloutEstimate {
        mean,
        std_error,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three cells in a row, goal on the right; actions: 0 = left, 1 = right.
    fn chain() -> TabularMdp {
        TabularMdp {
            num_states: 3,
            num_actions: 2,
            successor: vec![0, 1, 0, 2, 2, 2],
            reward: vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            terminal: vec![false, false, true],
        }
    }

    #[test]
    fn chain_values() {
        let q = value_iteration(&chain(), 0.9, 1e-12).unwrap();
        assert!((q.get(1, 1) - 1.0).abs() < 1e-12);
        assert!((q.get(0, 1) - 0.9).abs() < 1e-12);
        assert_eq!(q.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn myopic_discount_gives_immediate_rewards() {
        let mdp = chain();
        let q = value_iteration(&mdp, 0.0, 1e-12).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                assert_eq!(q.get(s, a), mdp.step(s, a).1);
            }
        }
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let mut mdp = chain();
        mdp.reward.fill(0.0);
        let q = value_iteration(&mdp, 0.9, 1e-12).unwrap();
        assert!(q.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gridworld_enumeration_shape() {
        let mut env = make_env("gridworld", StickyConfig::none(), 0).unwrap();
        let mdp = enumerate_mdp(&mut env).unwrap();
        assert_eq!((mdp.num_states, mdp.num_actions), (25, 4));
        assert_eq!(mdp.terminal.iter().filter(|&&t| t).count(), 1);
        assert_eq!(mdp.step(0, 1), (1, 0.0));
        assert_eq!(mdp.step(GridWorld::cell(3, 4), 2), (GridWorld::GOAL, 1.0));
    }

    #[test]
    fn cartpole_is_not_enumerable() {
        let mut env = make_env("cartpole", StickyConfig::none(), 0).unwrap();
        assert!(matches!(enumerate_mdp(&mut env), Err(Error::Usage(_))));
    }

    #[test]
    fn gridworld_optimal_rollout_reaches_goal() {
        let mut env = make_env("gridworld", StickyConfig::none(), 0).unwrap();
        let mdp = enumerate_mdp(&mut env).unwrap();
        let q = value_iteration(&mdp, 0.99, 1e-10).unwrap();
        let estimate = rollout_value("gridworld", StickyConfig::none(), &TablePolicy(&q), 20, None, 3).unwrap();
        assert_eq!(estimate.mean, 1.0);
        assert_eq!(estimate.std_error, 0.0);
        // Eight moves to the goal.
        let discounted =
            rollout_value("gridworld", StickyConfig::none(), &TablePolicy(&q), 1, Some(0.99), 3).unwrap();
        assert!((discounted.mean - 0.99f64.powi(7)).abs() < 1e-12);
        assert!((q.state_value(0) - 0.99f64.powi(7)).abs() < 1e-9);
    }
}
