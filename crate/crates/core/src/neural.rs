//! Fully-connected rectifier Q-networks with hand-written backpropagation.
//!
//! Weights are stored input-major (`in × out`) so a batch `X` of row vectors maps
//! to `X·W + b`. Everything is `f64`: finite-difference checks need the headroom.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng as _, SeedableRng};

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub output_dim: usize,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, hidden_layers: usize, hidden_units: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_layers,
            hidden_units,
            output_dim,
        }
    }

    /// Number of weight layers, including the linear output layer.
    pub fn num_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.num_layers());
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden_units));
            fan_in = self.hidden_units;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("network", "input and output dimensions must be positive"));
        }
        if self.hidden_units == 0 {
            return Err(Error::config("network.hidden_units", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weights.dim() == other.weights.dim() && self.bias.len() == other.bias.len()
    }
}

/// Layer weights and biases ordered input→output. Also used to hold gradients and
/// optimizer accumulators, which share the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
}

pub type Gradients = NetworkParams;

/// Which layers receive updates. `trainable[i]` refers to weight layer `i`,
/// counted from the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    pub trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn all_trainable(num_layers: usize) -> Self {
        Self {
            trainable: vec![true; num_layers],
        }
    }

    /// Freezes the bottom `k` layers.
    pub fn freeze_bottom(num_layers: usize, k: usize) -> Self {
        Self {
            trainable: (0..num_layers).map(|i| i >= k).collect(),
        }
    }

    pub fn frozen_all(num_layers: usize) -> Self {
        Self {
            trainable: vec![false; num_layers],
        }
    }

    pub fn is_trainable(&self, layer: usize) -> bool {
        self.trainable.get(layer).copied().unwrap_or(false)
    }
}

/// What the loss regresses: one selected action per row, or every output.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Selected { actions: &'a [usize], values: &'a [f64] },
    Full(ArrayView2<'a, f64>),
}

/// Fan-in scaled uniform weights (`U(-1/√fan_in, 1/√fan_in)`) with zero biases.
pub fn init_params(config: &NetworkConfig, seed: u64) -> NetworkParams {
    let mut rng = Rng::seed_from_u64(seed);
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..bound));
            Layer {
                weights,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    NetworkParams { layers }
}

impl NetworkParams {
    pub fn zeros_like(other: &NetworkParams) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weights.ncols()).unwrap_or(0)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn same_architecture(&self, other: &NetworkParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Flat view of parameter `index` in (layer, weights row-major, bias) order.
    pub fn get_flat(&self, index: usize) -> f64 {
        let (layer, offset) = self.locate(index);
        let l = &self.layers[layer];
        if offset < l.weights.len() {
            let cols = l.weights.ncols();
            l.weights[[offset / cols, offset % cols]]
        } else {
            l.bias[offset - l.weights.len()]
        }
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let (layer, offset) = self.locate(index);
        let l = &mut self.layers[layer];
        let n = l.weights.len();
        if offset < n {
            let cols = l.weights.ncols();
            l.weights[[offset / cols, offset % cols]] = value;
        } else {
            l.bias[offset - n] = value;
        }
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (i, l) in self.layers.iter().enumerate() {
            let size = l.weights.len() + l.bias.len();
            if index < size {
                return (i, index);
            }
            index -= size;
        }
        panic!("parameter index out of range");
    }

    /// Layer index of flat parameter `index`.
    pub fn layer_of(&self, index: usize) -> usize {
        self.locate(index).0
    }
}

fn check_input(params: &NetworkParams, batch: &ArrayView2<f64>) -> Result<()> {
    if batch.ncols() != params.input_dim() {
        return Err(Error::usage(format!(
            "batch has {} columns, network expects {}",
            batch.ncols(),
            params.input_dim()
        )));
    }
    Ok(())
}

/// Q-values for every row of `batch` (`rows × output_dim`).
pub fn forward(params: &NetworkParams, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(params, &batch)?;
    Ok(forward_unchecked(params, batch))
}

pub(crate) fn forward_unchecked(params: &NetworkParams, batch: ArrayView2<f64>) -> Array2<f64> {
    let last = params.layers.len() - 1;
    let mut activation: Option<Array2<f64>> = None;
    for (i, layer) in params.layers.iter().enumerate() {
        let input = activation.as_ref().map(|a| a.view()).unwrap_or(batch);
        let mut z = input.dot(&layer.weights);
        z += &layer.bias;
        if i != last {
            z.mapv_inplace(relu);
        }
        activation = Some(z);
    }
    activation.expect("at least one layer")
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Mean squared error and its gradient. With [`Targets::Selected`] only the chosen
/// output of each row contributes and the mean is over rows; with
/// [`Targets::Full`] the mean is over rows and outputs. Layers not trainable under
/// `mask` get exactly-zero gradient blocks.
pub fn loss_and_grads(
    params: &NetworkParams,
    batch: ArrayView2<f64>,
    targets: Targets<'_>,
    mask: &FreezeMask,
) -> Result<(f64, Gradients)> {
    check_input(params, &batch)?;
    let rows = batch.nrows();
    if mask.trainable.len() != params.num_layers() {
        return Err(Error::usage(format!(
            "freeze mask covers {} layers, network has {}",
            mask.trainable.len(),
            params.num_layers()
        )));
    }
    if rows == 0 {
        return Err(Error::usage("empty batch"));
    }

    // Forward pass keeping every post-activation output.
    let last = params.layers.len() - 1;
    let mut activations: Vec<Array2<f64>> = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let input = if i == 0 { batch } else { activations[i - 1].view() };
        let mut z = input.dot(&layer.weights);
        z += &layer.bias;
        if i != last {
            z.mapv_inplace(relu);
        }
        activations.push(z);
    }
    let output = &activations[last];

    let mut delta = Array2::<f64>::zeros(output.raw_dim());
    let loss = match targets {
        Targets::Selected { actions, values } => {
            if actions.len() != rows || values.len() != rows {
                return Err(Error::usage("targets do not match batch rows"));
            }
            let scale = 2.0 / rows as f64;
            let mut total = 0.0;
            for (r, (&a, &t)) in actions.iter().zip(values).enumerate() {
                if a >= output.ncols() {
                    return Err(Error::usage(format!("selected action {a} out of range")));
                }
                let diff = output[[r, a]] - t;
                total += diff * diff;
                delta[[r, a]] = scale * diff;
            }
            total / rows as f64
        }
        Targets::Full(t) => {
            if t.dim() != output.dim() {
                return Err(Error::usage(format!(
                    "target matrix {:?} does not match outputs {:?}",
                    t.dim(),
                    output.dim()
                )));
            }
            let count = output.len() as f64;
            let mut total = 0.0;
            Zip::from(&mut delta).and(output).and(&t).for_each(|d, &q, &t| {
                let diff = q - t;
                total += diff * diff;
                *d = 2.0 * diff / count;
            });
            total / count
        }
    };

    let mut grads = NetworkParams::zeros_like(params);
    let lowest_trainable = mask.trainable.iter().position(|&t| t);
    let Some(lowest_trainable) = lowest_trainable else {
        return Ok((loss, grads));
    };
    for i in (lowest_trainable..=last).rev() {
        let input = if i == 0 { batch } else { activations[i - 1].view() };
        if mask.trainable[i] {
            grads.layers[i].weights = input.t().dot(&delta);
            grads.layers[i].bias = delta.sum_axis(Axis(0));
        }
        if i > lowest_trainable {
            let mut upstream = delta.dot(&params.layers[i].weights.t());
            Zip::from(&mut upstream)
                .and(&activations[i - 1])
                .for_each(|u, &a| {
                    if a <= 0.0 {
                        *u = 0.0;
                    }
                });
            delta = upstream;
        }
    }
    Ok((loss, grads))
}

/// Loss only, shared by the finite-difference oracle.
pub fn loss(params: &NetworkParams, batch: ArrayView2<f64>, targets: Targets<'_>) -> Result<f64> {
    let outputs = forward(params, batch)?;
    Ok(match targets {
        Targets::Selected { actions, values } => {
            actions
                .iter()
                .zip(values)
                .enumerate()
                .map(|(r, (&a, &t))| (outputs[[r, a]] - t).powi(2))
                .sum::<f64>()
                / outputs.nrows() as f64
        }
        Targets::Full(t) => {
            outputs.iter().zip(t.iter()).map(|(q, t)| (q - t).powi(2)).sum::<f64>()
                / outputs.len() as f64
        }
    })
}

/// Rectifier on/off pattern for every hidden unit and row, used to detect finite
/// differences that straddle a kink.
fn activation_pattern(params: &NetworkParams, batch: ArrayView2<f64>) -> Vec<bool> {
    let mut pattern = Vec::new();
    let mut current = batch.to_owned();
    for layer in &params.layers[..params.layers.len() - 1] {
        let mut z = current.dot(&layer.weights);
        z += &layer.bias;
        pattern.extend(z.iter().map(|&v| v > 0.0));
        z.mapv_inplace(relu);
        current = z;
    }
    pattern
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_relative_error: f64,
    /// Largest finite-difference magnitude seen.
    pub max_numeric_magnitude: f64,
    pub checked: usize,
    /// Coordinates skipped because a rectifier changed state within `±h`.
    pub skipped_at_kinks: usize,
}

/// Compares analytic gradients against central differences
/// `(L(θ+h) − L(θ−h)) / 2h` on up to `max_coordinates` parameters (all of them when
/// the network is small enough, otherwise a seeded random subset).
pub fn finite_diff_check(
    params: &NetworkParams,
    batch: ArrayView2<f64>,
    targets: Targets<'_>,
    h: f64,
    max_coordinates: usize,
    seed: u64,
) -> Result<GradCheck> {
    if h <= 0.0 {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let mask = FreezeMask::all_trainable(params.num_layers());
    let (_, grads) = loss_and_grads(params, batch, targets, &mask)?;
    let total = params.num_parameters();
    let coordinates: Vec<usize> = if total <= max_coordinates {
        (0..total).collect()
    } else {
        let mut rng = Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, max_coordinates).into_vec()
    };

    let base_pattern = activation_pattern(params, batch);
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_relative_error: 0.0,
        max_numeric_magnitude: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    for index in coordinates {
        let original = params.get_flat(index);
        probe.set_flat(index, original + h);
        let plus_pattern = activation_pattern(&probe, batch);
        let plus = loss(&probe, batch, targets)?;
        probe.set_flat(index, original - h);
        let minus_pattern = activation_pattern(&probe, batch);
        let minus = loss(&probe, batch, targets)?;
        probe.set_flat(index, original);
        if plus_pattern != base_pattern || minus_pattern != base_pattern {
            report.skipped_at_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get_flat(index);
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        report.max_relative_error = report.max_relative_error.max((analytic - numeric).abs() / scale);
        report.max_numeric_magnitude = report.max_numeric_magnitude.max(numeric.abs());
        report.checked += 1;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Optimizers

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config("optimizer.kind", format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// RMSProp decay ρ.
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn rmsprop(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::RmsProp,
            learning_rate,
            rho: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-5,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            rho: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 3.125e-4,
        }
    }

    pub fn with_kind(self, kind: OptimizerKind) -> Self {
        let defaults = match kind {
            OptimizerKind::RmsProp => Self::rmsprop(self.learning_rate),
            OptimizerKind::Adam => Self::adam(self.learning_rate),
        };
        Self { kind, ..defaults }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Second-moment accumulator (both algorithms).
    pub second_moment: NetworkParams,
    /// First-moment accumulator (Adam only, zeros otherwise).
    pub first_moment: NetworkParams,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &NetworkParams) -> Self {
        Self {
            config,
            second_moment: NetworkParams::zeros_like(params),
            first_moment: NetworkParams::zeros_like(params),
            steps: 0,
        }
    }

    /// Applies one update. Layers frozen by `mask` are left untouched, accumulators
    /// included.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients, mask: &FreezeMask) -> Result<()> {
        if !params.same_architecture(grads) || !params.same_architecture(&self.second_moment) {
            return Err(Error::usage("optimizer, parameter and gradient shapes differ"));
        }
        self.steps += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::RmsProp => {
                for (i, ((p, g), v)) in params
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(&mut self.second_moment.layers)
                    .enumerate()
                {
                    if !mask.is_trainable(i) {
                        continue;
                    }
                    let update = |p: &mut f64, v: &mut f64, &g: &f64| {
                        *v = c.rho * *v + (1.0 - c.rho) * g * g;
                        *p -= c.learning_rate * g / (v.sqrt() + c.epsilon);
                    };
                    Zip::from(&mut p.weights).and(&mut v.weights).and(&g.weights).for_each(update);
                    Zip::from(&mut p.bias).and(&mut v.bias).and(&g.bias).for_each(update);
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let correction1 = 1.0 - c.beta1.powi(t);
                let correction2 = 1.0 - c.beta2.powi(t);
                for (i, (((p, g), m), v)) in params
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(&mut self.first_moment.layers)
                    .zip(&mut self.second_moment.layers)
                    .enumerate()
                {
                    if !mask.is_trainable(i) {
                        continue;
                    }
                    let update = |p: &mut f64, m: &mut f64, v: &mut f64, &g: &f64| {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / correction1;
                        let v_hat = *v / correction2;
                        *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                    };
                    Zip::from(&mut p.weights)
                        .and(&mut m.weights)
                        .and(&mut v.weights)
                        .and(&g.weights)
                        .for_each(update);
                    Zip::from(&mut p.bias)
                        .and(&mut m.bias)
                        .and(&mut v.bias)
                        .and(&g.bias)
                        .for_each(update);
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn optimizer_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    mask: &FreezeMask,
) -> Result<()> {
    state.step(params, grads, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelection {
    All,
    BottomK(usize),
}

/// Copies the selected layers of `src` into `dst`; the rest of `dst` is untouched.
pub fn sync_params(src: &NetworkParams, dst: &mut NetworkParams, layers: LayerSelection) -> Result<()> {
    if !src.same_architecture(dst) {
        return Err(Error::usage("cannot sync parameters between different architectures"));
    }
    let count = match layers {
        LayerSelection::All => src.num_layers(),
        LayerSelection::BottomK(k) => k.min(src.num_layers()),
    };
    for (d, s) in dst.layers.iter_mut().zip(&src.layers).take(count) {
        d.weights.assign(&s.weights);
        d.bias.assign(&s.bias);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &str = "tandem-params v1";

/// Writes parameters as text: a magic line, the layer count, then per layer a
/// `layer <fan_in> <fan_out>` header, `fan_in` weight rows and one bias row.
/// Values use the shortest representation that round-trips exactly.
pub fn write_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(text, "layers {}", params.num_layers()).unwrap();
    let join = |values: &mut dyn Iterator<Item = &f64>| {
        values.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
    };
    for layer in &params.layers {
        writeln!(text, "layer {} {}", layer.weights.nrows(), layer.weights.ncols()).unwrap();
        for row in layer.weights.rows() {
            writeln!(text, "{}", join(&mut row.iter())).unwrap();
        }
        writeln!(text, "{}", join(&mut layer.bias.iter())).unwrap();
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<NetworkParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = std::io::BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut lines = lines.iter();
    if lines.next().map(|l| l.trim()) != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing checkpoint header"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("layers "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| bad("missing layer count"))?;
    let parse_row = |line: Option<&String>, len: usize| -> Result<Vec<f64>> {
        let values: Vec<f64> = line
            .ok_or_else(|| bad("truncated file"))?
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("unparseable value"))?;
        if values.len() != len {
            return Err(bad("row length does not match header"));
        }
        Ok(values)
    };
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let header: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("layer "))
            .map(|rest| rest.split_whitespace().filter_map(|v| v.parse().ok()).collect())
            .ok_or_else(|| bad("missing layer header"))?;
        let [fan_in, fan_out] = header[..] else {
            return Err(bad("malformed layer header"));
        };
        let mut weights = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in {
            weights.extend(parse_row(lines.next(), fan_out)?);
        }
        let bias = parse_row(lines.next(), fan_out)?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((fan_in, fan_out), weights).map_err(|_| bad("bad shape"))?,
            bias: Array1::from(bias),
        });
    }
    Ok(NetworkParams { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_net(w: f64, b: f64) -> NetworkParams {
        NetworkParams {
            layers: vec![Layer {
                weights: array![[w]],
                bias: array![b],
            }],
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let config = NetworkConfig::new(4, 2, 16, 2);
        assert_eq!(init_params(&config, 1), init_params(&config, 1));
        assert_ne!(init_params(&config, 1), init_params(&config, 2));
        let p = init_params(&config, 1);
        assert!(p.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let bound = 1.0 / 4f64.sqrt();
        assert!(p.layers[0].weights.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_hidden_layers_is_affine() {
        let config = NetworkConfig::new(3, 0, 8, 2);
        let p = init_params(&config, 5);
        assert_eq!(p.num_layers(), 1);
        let mut p = p;
        p.layers[0].bias = array![0.5, -1.0];
        let x = array![[1.0, 2.0, -3.0]];
        let out = forward(&p, x.view()).unwrap();
        let expected = x.dot(&p.layers[0].weights) + &p.layers[0].bias;
        assert_eq!(out, expected);
    }

    #[test]
    fn zero_params_give_zero_q_values() {
        let config = NetworkConfig::new(3, 2, 5, 4);
        let p = NetworkParams::zeros_like(&init_params(&config, 0));
        let out = forward(&p, array![[1.0, -2.0, 3.0], [0.1, 0.2, 0.3]].view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert_eq!(out.dim(), (2, 4));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = init_params(&NetworkConfig::new(3, 1, 4, 2), 0);
        assert!(matches!(forward(&p, array![[1.0, 2.0]].view()), Err(Error::Usage(_))));
    }

    #[test]
    fn hand_computed_linear_loss_and_grads() {
        let p = scalar_net(2.0, 0.0);
        let x = array![[1.0]];
        let targets = Targets::Selected { actions: &[0], values: &[0.0] };
        let (loss, grads) = loss_and_grads(&p, x.view(), targets, &FreezeMask::all_trainable(1)).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(grads.layers[0].weights[[0, 0]], 4.0);
        assert_eq!(grads.layers[0].bias[0], 4.0);
    }

    #[test]
    fn targets_equal_to_outputs_give_zero_loss() {
        let p = init_params(&NetworkConfig::new(3, 2, 6, 2), 4);
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let out = forward(&p, x.view()).unwrap();
        let (loss, grads) =
            loss_and_grads(&p, x.view(), Targets::Full(out.view()), &FreezeMask::all_trainable(3)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.layers.iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|&g| g == 0.0)));
    }

    #[test]
    fn frozen_layers_have_zero_gradients() {
        let p = init_params(&NetworkConfig::new(3, 2, 6, 2), 4);
        let x = array![[0.1, 0.2, 0.3]];
        let t = array![[5.0, -5.0]];
        let (_, grads) =
            loss_and_grads(&p, x.view(), Targets::Full(t.view()), &FreezeMask::frozen_all(3)).unwrap();
        assert!(grads.layers.iter().all(|l| l.weights.iter().all(|&g| g == 0.0)));

        let (_, grads) =
            loss_and_grads(&p, x.view(), Targets::Full(t.view()), &FreezeMask::freeze_bottom(3, 2)).unwrap();
        assert!(grads.layers[0].weights.iter().all(|&g| g == 0.0));
        assert!(grads.layers[1].weights.iter().all(|&g| g == 0.0));
        assert!(grads.layers[2].weights.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn loss_and_grads_shape_errors() {
        let p = init_params(&NetworkConfig::new(2, 1, 3, 2), 0);
        let x = array![[0.1, 0.2]];
        let wrong = array![[1.0, 2.0, 3.0]];
        let mask = FreezeMask::all_trainable(2);
        assert!(loss_and_grads(&p, x.view(), Targets::Full(wrong.view()), &mask).is_err());
        let selected = Targets::Selected { actions: &[0, 1], values: &[0.0, 0.0] };
        assert!(loss_and_grads(&p, x.view(), selected, &mask).is_err());
    }

    #[test]
    fn rmsprop_first_step_matches_hand_arithmetic() {
        let mut p = scalar_net(0.0, 0.0);
        let grads = scalar_net(1.0, 0.0);
        let config = OptimizerConfig {
            rho: 0.9,
            epsilon: 0.0,
            ..OptimizerConfig::rmsprop(0.1)
        };
        let mut state = OptimizerState::new(config, &p);
        state.step(&mut p, &grads, &FreezeMask::all_trainable(1)).unwrap();
        assert!((state.second_moment.layers[0].weights[[0, 0]] - 0.1).abs() < 1e-15);
        assert!((p.layers[0].weights[[0, 0]] + 0.316_227_766).abs() < 1e-8);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = scalar_net(0.0, 0.0);
        let grads = scalar_net(1.0, -3.0);
        let config = OptimizerConfig {
            epsilon: 1e-12,
            ..OptimizerConfig::adam(0.01)
        };
        let mut state = OptimizerState::new(config, &p);
        state.step(&mut p, &grads, &FreezeMask::all_trainable(1)).unwrap();
        assert!((p.layers[0].weights[[0, 0]] + 0.01).abs() < 1e-9);
        assert!((p.layers[0].bias[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        for config in [OptimizerConfig::rmsprop(0.1), OptimizerConfig::adam(0.1)] {
            let mut p = init_params(&NetworkConfig::new(3, 1, 4, 2), 2);
            let before = p.clone();
            let mut state = OptimizerState::new(config, &p);
            let zeros = NetworkParams::zeros_like(&p);
            for _ in 0..3 {
                state.step(&mut p, &zeros, &FreezeMask::all_trainable(2)).unwrap();
            }
            assert_eq!(p, before);
        }
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let mut p = init_params(&NetworkConfig::new(3, 2, 4, 2), 2);
        let before = p.clone();
        let mut grads = NetworkParams::zeros_like(&p);
        for layer in &mut grads.layers {
            layer.weights.fill(1.0);
            layer.bias.fill(1.0);
        }
        let mask = FreezeMask::freeze_bottom(3, 2);
        let mut state = OptimizerState::new(OptimizerConfig::adam(0.1), &p);
        state.step(&mut p, &grads, &mask).unwrap();
        assert_eq!(p.layers[0], before.layers[0]);
        assert_eq!(p.layers[1], before.layers[1]);
        assert_ne!(p.layers[2], before.layers[2]);
    }

    #[test]
    fn sync_all_and_bottom_k() {
        let config = NetworkConfig::new(3, 2, 4, 2);
        let src = init_params(&config, 1);
        let original = init_params(&config, 2);

        let mut dst = original.clone();
        sync_params(&src, &mut dst, LayerSelection::BottomK(0)).unwrap();
        assert_eq!(dst, original);

        sync_params(&src, &mut dst, LayerSelection::BottomK(2)).unwrap();
        assert_eq!(dst.layers[..2], src.layers[..2]);
        assert_eq!(dst.layers[2], original.layers[2]);

        let mut all = original.clone();
        sync_params(&src, &mut all, LayerSelection::All).unwrap();
        let mut bottom = original.clone();
        sync_params(&src, &mut bottom, LayerSelection::BottomK(3)).unwrap();
        assert_eq!(all, src);
        assert_eq!(bottom, src);

        let other = init_params(&NetworkConfig::new(3, 1, 4, 2), 1);
        assert!(sync_params(&other, &mut dst, LayerSelection::All).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = init_params(&NetworkConfig::new(3, 2, 5, 2), 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.txt");
        write_checkpoint(&p, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), p);
    }
}
