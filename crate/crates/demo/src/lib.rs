//! WebAssembly bindings for the browser demo in `www/`.

use wasm_bindgen::prelude::*;

use tandem_core::agent::argmax;
use tandem_core::env::{make_env, GridWorld, StickyConfig};
use tandem_core::neural::{forward, NetworkParams};
use tandem_core::oracle::{enumerate_mdp, value_iteration};
use tandem_core::tandem::{Experiment, ExperimentConfig, ExperimentMode};
use tandem_core::Error;

fn js_error(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Relative passive performance of two return series.
#[wasm_bindgen]
pub fn relative_performance(active: Vec<f64>, passive: Vec<f64>) -> Result<Vec<f64>, JsError> {
    tandem_core::metrics::relative_performance(&active, &passive).map_err(js_error)
}

/// Optimal state values of the 5x5 grid, row-major, from exact value iteration.
#[wasm_bindgen]
pub fn gridworld_optimal_values(gamma: f64) -> Result<Vec<f64>, JsError> {
    let mut env = make_env("gridworld", StickyConfig::none(), 0).map_err(js_error)?;
    let mdp = enumerate_mdp(&mut env).map_err(js_error)?;
    let q = value_iteration(&mdp, gamma, 1e-10).map_err(js_error)?;
    Ok((0..mdp.num_states).map(|s| q.state_value(s)).collect())
}

/// Greedy values and actions of a network over every grid cell.
fn grid_readout(params: &NetworkParams) -> Vec<f64> {
    let cells = GridWorld::default().num_cells();
    let mut out = Vec::with_capacity(2 * cells);
    let mut actions = Vec::with_capacity(cells);
    for cell in 0..cells {
        let x = ndarray::Array2::from_shape_vec((1, cells), GridWorld::one_hot(cell)).expect("one-hot row");
        let q = forward(params, x.view()).expect("grid-sized network");
        let row = q.row(0).to_vec();
        let best = argmax(&row);
        out.push(row[best]);
        actions.push(best as f64);
    }
    out.extend(actions);
    out
}

/// A tandem run advanced one iteration at a time from JavaScript.
#[wasm_bindgen]
pub struct TandemDemo {
    experiment: Experiment,
    grid: bool,
}

#[wasm_bindgen]
impl TandemDemo {
    /// `mode` is one of `vanilla`, `self_data_mix` (uses `p_self`) or
    /// `fork_fixed_policy` (forks at a quarter of `iterations`).
    #[wasm_bindgen(constructor)]
    pub fn new(
        env: &str,
        mode: &str,
        p_self: f64,
        iterations: usize,
        steps_per_iteration: usize,
        seed: u64,
    ) -> Result<TandemDemo, JsError> {
        let mut config = ExperimentConfig {
            iterations,
            steps_per_iteration,
            seed,
            eval_steps: 1_000,
            n_probe: 128,
            ..ExperimentConfig::for_env(env.parse().map_err(js_error)?)
        };
        config.mode = match mode {
            "vanilla" => ExperimentMode::Vanilla,
            "self_data_mix" => ExperimentMode::SelfDataMix { p_self },
            "fork_fixed_policy" => ExperimentMode::ForkFixedPolicy {
                fork_iter: (iterations / 4).max(1),
                post_fork_epsilon: config.epsilon.train,
            },
            other => return Err(JsError::new(&format!("unsupported demo mode `{other}`"))),
        };
        let grid = env == "gridworld";
        if grid {
            config.learning_starts = 100;
            config.batch_size = 32;
        }
        Ok(TandemDemo {
            experiment: Experiment::new(config).map_err(js_error)?,
            grid,
        })
    }

    pub fn finished(&self) -> bool {
        self.experiment.is_finished()
    }

    /// Runs one iteration; returns `[iteration, active, passive, relative, disagreement]`.
    pub fn step(&mut self) -> Result<Vec<f64>, JsError> {
        let row = self.experiment.run_iteration().map_err(js_error)?;
        Ok(vec![
            row.iteration as f64,
            row.active_return,
            row.passive_return,
            row.relative_perf,
            row.disagreement,
        ])
    }

    /// Grid runs only: 25 active greedy values followed by 25 greedy actions.
    pub fn active_grid(&self) -> Vec<f64> {
        if self.grid {
            grid_readout(&self.experiment.pair().active.online)
        } else {
            Vec::new()
        }
    }

    /// Grid runs only: as [`active_grid`](Self::active_grid) for the passive agent.
    pub fn passive_grid(&self) -> Vec<f64> {
        if self.grid {
            grid_readout(&self.experiment.pair().passive.online)
        } else {
            Vec::new()
        }
    }
}
