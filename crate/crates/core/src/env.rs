//! Small episodic control environments with discrete actions.
//!
//! CartPole, MountainCar and Acrobot follow the classic Gym dynamics and constants.
//! The 5×5 GridWorld exists so that exact action values can be computed by
//! [`crate::oracle`]; its observations are one-hot so the same MLP agents run on
//! every environment unmodified.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand::SeedableRng;

use crate::rng::Rng;
use crate::{Error, Result};

pub type Observation = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub num_actions: usize,
    pub max_episode_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

impl StepResult {
    /// True when the episode is over for either reason.
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

/// Probability of ignoring the requested action and repeating the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StickyConfig {
    pub repeat_probability: f64,
}

impl StickyConfig {
    pub const DEFAULT_PROBABILITY: f64 = 0.25;

    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(repeat_probability: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&repeat_probability) {
            return Err(Error::config(
                "env.sticky",
                format!("repeat probability {repeat_probability} outside [0, 1]"),
            ));
        }
        Ok(Self { repeat_probability })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvName {
    CartPole,
    MountainCar,
    Acrobot,
    GridWorld,
}

impl EnvName {
    pub const ALL: [EnvName; 4] = [
        EnvName::CartPole,
        EnvName::MountainCar,
        EnvName::Acrobot,
        EnvName::GridWorld,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::CartPole => "cartpole",
            EnvName::MountainCar => "mountaincar",
            EnvName::Acrobot => "acrobot",
            EnvName::GridWorld => "gridworld",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvName::ALL
            .into_iter()
            .find(|name| name.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::config(
                    "env.name",
                    format!("unknown environment `{s}` (expected cartpole, mountaincar, acrobot or gridworld)"),
                )
            })
    }
}

/// Raw environment dynamics, without episode bookkeeping or sticky actions.
trait Dynamics: Send {
    fn obs_dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn max_episode_steps(&self) -> usize;
    fn reset(&mut self, rng: &mut Rng) -> Observation;
    /// Returns (observation, reward, terminal).
    fn step(&mut self, action: usize) -> (Observation, f64, bool);
    fn as_grid(&mut self) -> Option<&mut GridWorld> {
        None
    }
}

/// An environment handle: dynamics plus step limit and the sticky-action wrapper.
pub struct Env {
    name: EnvName,
    dynamics: Box<dyn Dynamics>,
    sticky: StickyConfig,
    rng: Rng,
    steps: usize,
    previous_action: Option<usize>,
    last_repeated: bool,
    ended: bool,
}

impl fmt::Debug for Env {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Env")
            .field("name", &self.name)
            .field("sticky", &self.sticky)
            .field("steps", &self.steps)
            .finish()
    }
}

/// Creates an environment by name. Identical arguments give identical trajectories
/// under identical action sequences.
pub fn make_env(name: &str, sticky: StickyConfig, seed: u64) -> Result<Env> {
    let name: EnvName = name.parse()?;
    Ok(Env::new(name, sticky, seed))
}

impl Env {
    pub fn new(name: EnvName, sticky: StickyConfig, seed: u64) -> Self {
        let dynamics: Box<dyn Dynamics> = match name {
            EnvName::CartPole => Box::new(CartPole::default()),
            EnvName::MountainCar => Box::new(MountainCar::default()),
            EnvName::Acrobot => Box::new(Acrobot::default()),
            EnvName::GridWorld => Box::new(GridWorld::default()),
        };
        Self {
            name,
            dynamics,
            sticky,
            rng: Rng::seed_from_u64(seed),
            steps: 0,
            previous_action: None,
            last_repeated: false,
            // A fresh handle must be reset before stepping.
            ended: true,
        }
    }

    pub fn name(&self) -> EnvName {
        self.name
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: self.dynamics.obs_dim(),
            num_actions: self.dynamics.num_actions(),
            max_episode_steps: self.dynamics.max_episode_steps(),
        }
    }

    pub fn reset(&mut self) -> Observation {
        self.steps = 0;
        self.previous_action = None;
        self.last_repeated = false;
        self.ended = false;
        self.dynamics.reset(&mut self.rng)
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        let num_actions = self.dynamics.num_actions();
        if action >= num_actions {
            return Err(Error::usage(format!(
                "action {action} out of range for {} ({num_actions} actions)",
                self.name
            )));
        }
        if self.ended {
            return Err(Error::usage("step called on an ended episode; call reset first"));
        }
        let mut executed = action;
        self.last_repeated = false;
        if let Some(previous) = self.previous_action {
            if self.sticky.repeat_probability > 0.0
                && self.rng.gen::<f64>() < self.sticky.repeat_probability
            {
                executed = previous;
                self.last_repeated = true;
            }
        }
        self.previous_action = Some(executed);

        let (observation, reward, terminal) = self.dynamics.step(executed);
        self.steps += 1;
        let truncated = !terminal && self.steps >= self.dynamics.max_episode_steps();
        self.ended = terminal || truncated;
        Ok(StepResult {
            observation,
            reward,
            terminal,
            truncated,
        })
    }

    /// Steps taken in the current episode.
    pub fn episode_steps(&self) -> usize {
        self.steps
    }

    /// Whether the sticky wrapper replaced the requested action on the last step.
    pub fn last_action_repeated(&self) -> bool {
        self.last_repeated
    }

    /// Direct access to the grid model, used for exhaustive enumeration.
    pub fn grid_mut(&mut self) -> Option<&mut GridWorld> {
        self.dynamics.as_grid()
    }

    /// Places the GridWorld agent on `cell` and starts a fresh episode there.
    pub fn reset_to_cell(&mut self, cell: usize) -> Result<Observation> {
        let grid = self
            .dynamics
            .as_grid()
            .ok_or_else(|| Error::usage(format!("{} has no enumerable state", self.name)))?;
        if cell >= grid.num_cells() {
            return Err(Error::usage(format!("cell {cell} outside the grid")));
        }
        grid.position = cell;
        let observation = grid.observe();
        self.steps = 0;
        self.previous_action = None;
        self.last_repeated = false;
        self.ended = false;
        Ok(observation)
    }
}

// ---------------------------------------------------------------------------
// CartPole

#[derive(Debug, Default)]
struct CartPole {
    state: [f64; 4],
}

impl CartPole {
    const GRAVITY: f64 = 9.8;
    const MASS_CART: f64 = 1.0;
    const MASS_POLE: f64 = 0.1;
    const HALF_LENGTH: f64 = 0.5;
    const FORCE: f64 = 10.0;
    const TAU: f64 = 0.02;
    const THETA_LIMIT: f64 = 12.0 * 2.0 * PI / 360.0;
    const X_LIMIT: f64 = 2.4;
}

impl Dynamics for CartPole {
    fn obs_dim(&self) -> usize {
        4
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn max_episode_steps(&self) -> usize {
        200
    }

    fn reset(&mut self, rng: &mut Rng) -> Observation {
        for value in &mut self.state {
            *value = rng.gen_range(-0.05..0.05);
        }
        self.state.to_vec()
    }

    fn step(&mut self, action: usize) -> (Observation, f64, bool) {
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if action == 1 { Self::FORCE } else { -Self::FORCE };
        let total_mass = Self::MASS_CART + Self::MASS_POLE;
        let pole_mass_length = Self::MASS_POLE * Self::HALF_LENGTH;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pole_mass_length * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (Self::GRAVITY * sin - cos * temp)
            / (Self::HALF_LENGTH * (4.0 / 3.0 - Self::MASS_POLE * cos * cos / total_mass));
        let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;

        self.state = [
            x + Self::TAU * x_dot,
            x_dot + Self::TAU * x_acc,
            theta + Self::TAU * theta_dot,
            theta_dot + Self::TAU * theta_acc,
        ];
        let terminal = self.state[0].abs() > Self::X_LIMIT || self.state[2].abs() > Self::THETA_LIMIT;
        (self.state.to_vec(), 1.0, terminal)
    }
}

// ---------------------------------------------------------------------------
// MountainCar

#[derive(Debug, Default)]
struct MountainCar {
    position: f64,
    velocity: f64,
}

impl MountainCar {
    const MIN_POSITION: f64 = -1.2;
    const MAX_POSITION: f64 = 0.6;
    const MAX_SPEED: f64 = 0.07;
    const GOAL_POSITION: f64 = 0.5;
    const FORCE: f64 = 0.001;
    const GRAVITY: f64 = 0.0025;
}

impl Dynamics for MountainCar {
    fn obs_dim(&self) -> usize {
        2
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn max_episode_steps(&self) -> usize {
        200
    }

    fn reset(&mut self, rng: &mut Rng) -> Observation {
        self.position = rng.gen_range(-0.6..-0.4);
        self.velocity = 0.0;
        vec![self.position, self.velocity]
    }

    fn step(&mut self, action: usize) -> (Observation, f64, bool) {
        self.velocity += (action as f64 - 1.0) * Self::FORCE
            + (3.0 * self.position).cos() * (-Self::GRAVITY);
        self.velocity = self.velocity.clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.position += self.velocity;
        self.position = self.position.clamp(Self::MIN_POSITION, Self::MAX_POSITION);
        if self.position == Self::MIN_POSITION && self.velocity < 0.0 {
            self.velocity = 0.0;
        }
        let terminal = self.position >= Self::GOAL_POSITION && self.velocity >= 0.0;
        (vec![self.position, self.velocity], -1.0, terminal)
    }
}

// ---------------------------------------------------------------------------
// Acrobot (the "book" dynamics, RK4 integration)

#[derive(Debug, Default)]
struct Acrobot {
    state: [f64; 4],
}

impl Acrobot {
    const DT: f64 = 0.2;
    const LINK_LENGTH_1: f64 = 1.0;
    const LINK_MASS_1: f64 = 1.0;
    const LINK_MASS_2: f64 = 1.0;
    const LINK_COM_1: f64 = 0.5;
    const LINK_COM_2: f64 = 0.5;
    const LINK_MOI: f64 = 1.0;
    const MAX_VEL_1: f64 = 4.0 * PI;
    const MAX_VEL_2: f64 = 9.0 * PI;
    const TORQUES: [f64; 3] = [-1.0, 0.0, 1.0];

    fn observe(&self) -> Observation {
        let [t1, t2, d1, d2] = self.state;
        vec![t1.cos(), t1.sin(), t2.cos(), t2.sin(), d1, d2]
    }

    fn derivatives(s: [f64; 5]) -> [f64; 5] {
        let (m1, m2) = (Self::LINK_MASS_1, Self::LINK_MASS_2);
        let l1 = Self::LINK_LENGTH_1;
        let (lc1, lc2) = (Self::LINK_COM_1, Self::LINK_COM_2);
        let (i1, i2) = (Self::LINK_MOI, Self::LINK_MOI);
        let g = 9.8;
        let [theta1, theta2, dtheta1, dtheta2, torque] = s;
        let d1 = m1 * lc1 * lc1
            + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * theta2.cos())
            + i1
            + i2;
        let d2 = m2 * (lc2 * lc2 + l1 * lc2 * theta2.cos()) + i2;
        let phi2 = m2 * lc2 * g * (theta1 + theta2 - PI / 2.0).cos();
        let phi1 = -m2 * l1 * lc2 * dtheta2 * dtheta2 * theta2.sin()
            - 2.0 * m2 * l1 * lc2 * dtheta2 * dtheta1 * theta2.sin()
            + (m1 * lc1 + m2 * l1) * g * (theta1 - PI / 2.0).cos()
            + phi2;
        let ddtheta2 = (torque + d2 / d1 * phi1
            - m2 * l1 * lc2 * dtheta1 * dtheta1 * theta2.sin()
            - phi2)
            / (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
        let ddtheta1 = -(d2 * ddtheta2 + phi1) / d1;
        [dtheta1, dtheta2, ddtheta1, ddtheta2, 0.0]
    }

    fn rk4(s: [f64; 5], dt: f64) -> [f64; 5] {
        let add = |a: [f64; 5], b: [f64; 5], scale: f64| {
            let mut out = a;
            for (o, b) in out.iter_mut().zip(b) {
                *o += scale * b;
            }
            out
        };
        let k1 = Self::derivatives(s);
        let k2 = Self::derivatives(add(s, k1, dt / 2.0));
        let k3 = Self::derivatives(add(s, k2, dt / 2.0));
        let k4 = Self::derivatives(add(s, k3, dt));
        let mut out = s;
        for i in 0..5 {
            out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out
    }
}

fn wrap_angle(x: f64) -> f64 {
    let span = 2.0 * PI;
    let mut y = x;
    while y > PI {
        y -= span;
    }
    while y < -PI {
        y += span;
    }
    y
}

impl Dynamics for Acrobot {
    fn obs_dim(&self) -> usize {
        6
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn max_episode_steps(&self) -> usize {
        500
    }

    fn reset(&mut self, rng: &mut Rng) -> Observation {
        for value in &mut self.state {
            *value = rng.gen_range(-0.1..0.1);
        }
        self.observe()
    }

    fn step(&mut self, action: usize) -> (Observation, f64, bool) {
        let [t1, t2, d1, d2] = self.state;
        let next = Self::rk4([t1, t2, d1, d2, Self::TORQUES[action]], Self::DT);
        self.state = [
            wrap_angle(next[0]),
            wrap_angle(next[1]),
            next[2].clamp(-Self::MAX_VEL_1, Self::MAX_VEL_1),
            next[3].clamp(-Self::MAX_VEL_2, Self::MAX_VEL_2),
        ];
        let [t1, t2, _, _] = self.state;
        let terminal = -t1.cos() - (t2 + t1).cos() > 1.0;
        let reward = if terminal { 0.0 } else { -1.0 };
        (self.observe(), reward, terminal)
    }
}

// ---------------------------------------------------------------------------
// GridWorld

/// Deterministic 5×5 grid: start at the top-left cell, terminal goal at the
/// bottom-right, reward 1 on entering the goal. Moves into a wall leave the agent
/// in place.
#[derive(Debug)]
pub struct GridWorld {
    position: usize,
}

impl Default for GridWorld {
    fn default() -> Self {
        Self {
            position: Self::START,
        }
    }
}

/// Grid actions in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    Up = 0,
    Right = 1,
    Down = 2,
    Left = 3,
}

impl GridWorld {
    pub const SIDE: usize = 5;
    pub const START: usize = 0;
    pub const GOAL: usize = Self::SIDE * Self::SIDE - 1;

    pub fn num_cells(&self) -> usize {
        Self::SIDE * Self::SIDE
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Index of the cell at (row, column).
    pub fn cell(row: usize, col: usize) -> usize {
        row * Self::SIDE + col
    }

    pub fn one_hot(cell: usize) -> Observation {
        let mut obs = vec![0.0; Self::SIDE * Self::SIDE];
        obs[cell] = 1.0;
        obs
    }

    fn observe(&self) -> Observation {
        Self::one_hot(self.position)
    }
}

impl Dynamics for GridWorld {
    fn obs_dim(&self) -> usize {
        Self::SIDE * Self::SIDE
    }

    fn num_actions(&self) -> usize {
        4
    }

    fn max_episode_steps(&self) -> usize {
        50
    }

    fn reset(&mut self, _rng: &mut Rng) -> Observation {
        self.position = Self::START;
        self.observe()
    }

    fn step(&mut self, action: usize) -> (Observation, f64, bool) {
        let (row, col) = (self.position / Self::SIDE, self.position % Self::SIDE);
        let (row, col) = match action {
            0 => (row.saturating_sub(1), col),
            1 => (row, (col + 1).min(Self::SIDE - 1)),
            2 => ((row + 1).min(Self::SIDE - 1), col),
            _ => (row, col.saturating_sub(1)),
        };
        self.position = Self::cell(row, col);
        let terminal = self.position == Self::GOAL;
        let reward = if terminal { 1.0 } else { 0.0 };
        (self.observe(), reward, terminal)
    }

    fn as_grid(&mut self) -> Option<&mut GridWorld> {
        Some(self)
    }
}
