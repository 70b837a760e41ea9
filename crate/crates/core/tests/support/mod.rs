//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::SeedableRng;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use tandem_core::agent::{select_action, ReplayBuffer, Transition};
use tandem_core::env::{make_env, StickyConfig};
use tandem_core::neural::{init_params, NetworkConfig};
use tandem_core::rng::Rng;
use tandem_core::tandem::{sample_training_batch, ExperimentMode, ReplaySources, RowOrigin};

pub const ALPHA: f64 = 0.01;

/// Outcome of one sampling contract: the observed rate(s) and the test's p-value.
#[derive(Debug, Clone)]
pub struct SamplingCheck {
    pub name: &'static str,
    pub observed: Vec<f64>,
    pub expected: f64,
    /// Largest allowed |observed - expected|.
    pub tolerance: f64,
    pub p_value: f64,
}

impl SamplingCheck {
    pub fn passes(&self) -> bool {
        self.p_value > ALPHA && self.observed.iter().all(|o| (o - self.expected).abs() < self.tolerance)
    }
}

/// p-value of Pearson's goodness-of-fit statistic against equal cell probabilities.
pub fn uniformity_p_value(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Two-sided exact binomial p-value.
pub fn binomial_p_value(successes: u64, trials: u64, p: f64) -> f64 {
    let dist = Binomial::new(p, trials).unwrap();
    let lower = dist.cdf(successes);
    let upper = if successes == 0 { 1.0 } else { 1.0 - dist.cdf(successes - 1) };
    (2.0 * lower.min(upper)).min(1.0)
}

pub fn numbered(i: usize) -> Transition {
    Transition {
        state: vec![i as f64],
        action: 0,
        reward: i as f64,
        next_state: vec![i as f64],
        terminal: false,
        next_action: 0,
        mc_return: None,
    }
}

/// ε = 1 over 4 actions, 100k draws.
pub fn random_action_uniformity() -> SamplingCheck {
    let params = init_params(&NetworkConfig::new(3, 1, 8, 4), 11);
    let mut rng = Rng::seed_from_u64(5);
    let mut counts = [0u64; 4];
    for _ in 0..100_000 {
        counts[select_action(&params, &[0.1, -0.2, 0.3], 1.0, &mut rng).unwrap()] += 1;
    }
    SamplingCheck {
        name: "epsilon=1 action uniformity",
        observed: counts.iter().map(|&c| c as f64 / 100_000.0).collect(),
        expected: 0.25,
        tolerance: 0.01,
        p_value: uniformity_p_value(&counts),
    }
}

/// 100k draws from a full 10-slot buffer.
pub fn replay_uniformity() -> SamplingCheck {
    let mut buffer = ReplayBuffer::new(10);
    for i in 0..10 {
        buffer.push(numbered(i));
    }
    let mut rng = Rng::seed_from_u64(9);
    let mut counts = [0u64; 10];
    for _ in 0..1_000 {
        for t in buffer.sample(100, &mut rng).unwrap() {
            counts[t.reward as usize] += 1;
        }
    }
    SamplingCheck {
        name: "replay sampling uniformity",
        observed: counts.iter().map(|&c| c as f64 / 100_000.0).collect(),
        expected: 0.1,
        tolerance: 0.005,
        p_value: uniformity_p_value(&counts),
    }
}

/// Share of own-data rows at p_self = 0.5 over 100k sampled rows.
pub fn mixing_fraction() -> SamplingCheck {
    let mut active = ReplayBuffer::new(100);
    let mut passive = ReplayBuffer::new(100);
    for i in 0..100 {
        active.push(numbered(i));
        passive.push(numbered(1_000 + i));
    }
    let sources = ReplaySources {
        active: &active,
        passive: Some(&passive),
        frozen: None,
    };
    let mode = ExperimentMode::SelfDataMix { p_self: 0.5 };
    let mut sample_rng = Rng::seed_from_u64(1);
    let mut mix_rng = Rng::seed_from_u64(2);
    let mut own = 0u64;
    let trials = 100_000u64;
    for _ in 0..(trials / 100) {
        let rows = sample_training_batch(&mode, sources, 100, &mut sample_rng, &mut mix_rng).unwrap();
        own += rows.iter().filter(|r| r.origin == RowOrigin::Passive).count() as u64;
    }
    SamplingCheck {
        name: "p_self mixing fraction",
        observed: vec![own as f64 / trials as f64],
        expected: 0.5,
        tolerance: 0.01,
        p_value: binomial_p_value(own, trials, 0.5),
    }
}

/// Repeat rate of sticky actions at 0.25 over 100k eligible steps.
pub fn sticky_repeat_rate() -> SamplingCheck {
    let mut env = make_env("cartpole", StickyConfig::new(0.25).unwrap(), 3).unwrap();
    let mut rng = Rng::seed_from_u64(4);
    let mut repeats = 0u64;
    let mut eligible = 0u64;
    env.reset();
    while eligible < 100_000 {
        // The first step of an episode has no previous action to repeat.
        let first = env.episode_steps() == 0;
        let step = env.step(rand::Rng::gen_range(&mut rng, 0..2)).unwrap();
        if !first {
            eligible += 1;
            repeats += u64::from(env.last_action_repeated());
        }
        if step.done() {
            env.reset();
        }
    }
    SamplingCheck {
        name: "sticky-action repeat rate",
        observed: vec![repeats as f64 / eligible as f64],
        expected: 0.25,
        tolerance: 0.01,
        p_value: binomial_p_value(repeats, eligible, 0.25),
    }
}
