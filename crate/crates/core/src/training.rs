//! Multi-step L1 training and forecast evaluation.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{Dataset, Sequence, SplitName};
use crate::dynamics::{FenModel, MeshArtifacts};
use crate::error::{FenError, Result};
use crate::nn::{AdamConfig, AdamState};
use crate::odeint::{dopri5_solve, solve_with_gradients, SolverConfig, Trajectory};

/// `1/(N T) sum_t sum_i |y_hat - y|_1` over all frames but the first.
pub fn l1_loss(predicted: &Sequence, target: &Sequence) -> Result<f64> {
    if predicted.times != target.times {
        return Err(FenError::ShapeMismatch("predicted and target times differ".into()));
    }
    let steps = predicted.len() - 1;
    if steps == 0 {
        return Err(FenError::ShapeMismatch("no prediction steps".into()));
    }
    let mut total = 0.0;
    for (p, t) in predicted.states[1..].iter().zip(&target.states[1..]) {
        total += step_error(p, t)?;
    }
    Ok(total / steps as f64)
}

/// `1/N sum_i |y_hat_i - y_i|_1` for one frame.
fn step_error(p: &Tensor, t: &Tensor) -> Result<f64> {
    if p.shape() != t.shape() {
        return Err(FenError::ShapeMismatch(format!("{:?} vs {:?}", p.shape(), t.shape())));
    }
    Ok(p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.rows() as f64)
}

fn l1_loss_graph(graph: &mut Graph, predicted: &[Var], targets: &[Tensor]) -> Result<Var> {
    let n = targets[0].rows();
    let mut total = None;
    for (&p, t) in predicted.iter().zip(targets) {
        let t = graph.constant(t.clone())?;
        let diff = graph.sub(p, t)?;
        let abs = graph.abs(diff)?;
        let s = graph.sum(abs)?;
        total = Some(match total {
            None => s,
            Some(acc) => graph.add(acc, s)?,
        });
    }
    let total = total.ok_or_else(|| FenError::ShapeMismatch("no prediction steps".into()))?;
    graph.scale(total, 1.0 / (n * predicted.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Prediction steps per subsequence once the curriculum is complete.
    pub horizon: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub curriculum_start: usize,
    /// Distance between consecutive subsequence starts.
    pub stride: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    /// Leading test frames excluded from evaluation.
    pub test_skip: usize,
    pub max_wall_time_s: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            lr: 1e-3,
            max_epochs: 50,
            patience: 5,
            curriculum_start: 3,
            stride: 1,
            seed: 0,
            solver: SolverConfig::default(),
            test_skip: 12,
            max_wall_time_s: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.curriculum_start == 0 || self.curriculum_start > self.horizon {
            return Err(FenError::InvalidSpec(format!(
                "need 1 <= curriculum_start ({}) <= horizon ({})",
                self.curriculum_start, self.horizon
            )));
        }
        if self.stride == 0 || !(self.lr > 0.0) {
            return Err(FenError::InvalidSpec("stride and lr must be positive".into()));
        }
        Ok(())
    }

    /// Subsequence length in `epoch`.
    pub fn curriculum(&self, epoch: usize) -> usize {
        (self.curriculum_start + epoch).min(self.horizon)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { stride: self.stride, test_skip: self.test_skip, solver: self.solver.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub stride: usize,
    pub test_skip: usize,
    pub solver: SolverConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        TrainConfig::default().eval_options()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitName,
    pub n_nodes: usize,
    pub horizon: usize,
    pub n_sequences: usize,
    pub mae: f64,
    pub nfe_mean: f64,
    pub nfe_std: f64,
    pub per_step_mae: Vec<f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "split,n_nodes,horizon,n_sequences,mae,nfe_mean,nfe_std";

    pub fn csv_row(&self) -> String {
        let split = match self.split {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        };
        format!(
            "{split},{},{},{},{:e},{},{}",
            self.n_nodes, self.horizon, self.n_sequences, self.mae, self.nfe_mean, self.nfe_std
        )
    }
}

/// Start indices of the length-`horizon` subsequences of one sequence.
fn starts(len: usize, horizon: usize, skip: usize, stride: usize) -> impl Iterator<Item = usize> {
    let last = len.checked_sub(horizon + 1);
    (skip..=last.unwrap_or(0)).step_by(stride).filter(move |_| last.is_some())
}

/// Forecast from `y0` at `times` without recording gradients.
pub fn forecast(model: &FenModel, artifacts: &MeshArtifacts, y0: &Tensor, times: &[f64], solver: &SolverConfig) -> Result<Trajectory> {
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph, artifacts, false)?;
    let base = graph.len();
    let f = |t: f64, y: &Tensor| {
        let yv = graph.constant(y.clone())?;
        let out = bound.time_derivative(&mut graph, t, yv, None);
        let value = out.map(|o| graph.value(o).clone());
        graph.truncate(base);
        value
    };
    dopri5_solve(f, y0, times, solver)
}

struct Accumulator {
    per_step: Vec<f64>,
    nfe: Vec<f64>,
    count: usize,
}

impl Accumulator {
    fn new(horizon: usize) -> Self {
        Self { per_step: vec![0.0; horizon], nfe: Vec::new(), count: 0 }
    }

    fn push(&mut self, predicted: &[Tensor], target: &[Tensor], nfe: usize) -> Result<()> {
        for (acc, (p, t)) in self.per_step.iter_mut().zip(predicted[1..].iter().zip(&target[1..])) {
            *acc += step_error(p, t)?;
        }
        self.nfe.push(nfe as f64);
        self.count += 1;
        Ok(())
    }

    fn report(self, split: SplitName, n_nodes: usize, horizon: usize) -> Result<EvalReport> {
        if self.count == 0 {
            return Err(FenError::InvalidSpec(format!("no subsequences of {horizon} steps in the {split:?} split")));
        }
        let count = self.count as f64;
        let per_step_mae: Vec<f64> = self.per_step.iter().map(|s| s / count).collect();
        let mae = per_step_mae.iter().sum::<f64>() / horizon as f64;
        let nfe_mean = self.nfe.iter().sum::<f64>() / count;
        let nfe_std = (self.nfe.iter().map(|n| (n - nfe_mean).powi(2)).sum::<f64>() / count).sqrt();
        Ok(EvalReport { split, n_nodes, horizon, n_sequences: self.count, mae, nfe_mean, nfe_std, per_step_mae })
    }
}

fn subsequences<'d>(dataset: &'d Dataset, split: SplitName, horizon: usize, options: &EvalOptions) -> Vec<(&'d Sequence, usize)> {
    let skip = if split == SplitName::Test { options.test_skip } else { 0 };
    dataset
        .split_sequences(split)
        .flat_map(|seq| starts(seq.len(), horizon, skip, options.stride).map(move |s| (seq, s)))
        .collect()
}

/// MAE and NFE over every length-`horizon` subsequence of `split`.
pub fn evaluate(model: &FenModel, dataset: &Dataset, split: SplitName, horizon: usize, options: &EvalOptions) -> Result<EvalReport> {
    let artifacts = MeshArtifacts::new(dataset.mesh.clone())?;
    evaluate_with(model, &artifacts, dataset, split, horizon, options)
}

pub fn evaluate_with(
    model: &FenModel,
    artifacts: &MeshArtifacts,
    dataset: &Dataset,
    split: SplitName,
    horizon: usize,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if options.stride == 0 || horizon == 0 {
        return Err(FenError::InvalidSpec("stride and horizon must be positive".into()));
    }
    let mut acc = Accumulator::new(horizon);
    for (seq, s) in subsequences(dataset, split, horizon, options) {
        let window = s..=s + horizon;
        let traj = forecast(model, artifacts, &seq.states[s], &seq.times[window.clone()], &options.solver)?;
        acc.push(&traj.states, &seq.states[window], traj.nfe)?;
    }
    acc.report(split, dataset.n_nodes(), horizon)
}

/// The same report for forecasts that repeat the initial state.
pub fn persistence_report(dataset: &Dataset, split: SplitName, horizon: usize, options: &EvalOptions) -> Result<EvalReport> {
    let mut acc = Accumulator::new(horizon);
    for (seq, s) in subsequences(dataset, split, horizon, options) {
        let predicted = vec![seq.states[s].clone(); horizon + 1];
        acc.push(&predicted, &seq.states[s..=s + horizon], 0)?;
    }
    acc.report(split, dataset.n_nodes(), horizon)
}

/// Evaluates one model on the test split of each dataset, each with its own
/// mesh.
pub fn super_resolution_eval(model: &FenModel, datasets: &[Dataset], horizon: usize, options: &EvalOptions) -> Result<Vec<EvalReport>> {
    datasets.iter().map(|d| evaluate(model, d, SplitName::Test, horizon, options)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub s: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub nfe_mean: f64,
    pub nfe_std: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation MAE of the model before any update.
    pub initial_val_mae: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation MAE.
    pub best: FenModel,
    pub last: FenModel,
    pub history: TrainHistory,
}

fn train_step(model: &FenModel, artifacts: &MeshArtifacts, seq: &Sequence, start: usize, s: usize, solver: &SolverConfig) -> Result<(f64, Vec<Tensor>)> {
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph, artifacts, true)?;
    let y0 = graph.constant(seq.states[start].clone())?;
    let times = &seq.times[start..=start + s];
    let traj = solve_with_gradients(&mut graph, |g, t, y| bound.time_derivative(g, t, y, None), y0, times, solver)?;
    let loss = l1_loss_graph(&mut graph, &traj.states[1..], &seq.states[start + 1..=start + s])?;
    let grads = graph.backward(loss)?;
    let params = bound.param_vars();
    let shapes: Vec<[usize; 2]> = model.tensors().map(|t| t.shape()).collect();
    let grads = params.iter().zip(shapes).map(|(&v, shape)| grads.get_or_zeros(v, shape)).collect();
    Ok((graph.value(loss).data()[0], grads))
}

/// Trains with Adam on all subsequences of the training split, lengthening
/// them by one step per epoch. Each record is also written to `log` as one
/// JSON line.
pub fn train(model: FenModel, dataset: &Dataset, config: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let artifacts = MeshArtifacts::new(dataset.mesh.clone())?;
    let options = config.eval_options();
    let validate = |m: &FenModel| evaluate_with(m, &artifacts, dataset, SplitName::Val, config.horizon, &options);
    let initial = validate(&model)?;
    let mut history = TrainHistory {
        initial_val_mae: initial.mae,
        epochs: Vec::new(),
        best_epoch: None,
        best_val_mae: initial.mae,
        stopped_early: false,
    };
    let mut best = model.clone();
    let mut model = model;
    let adam_config = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(adam_config, model.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let s = config.curriculum(epoch);
        let mut samples: Vec<(usize, usize)> = dataset
            .split
            .train
            .iter()
            .flat_map(|&i| starts(dataset.sequences[i].len(), s, 0, config.stride).map(move |st| (i, st)))
            .collect();
        if samples.is_empty() {
            return Err(FenError::InvalidSpec(format!("no training subsequences of {s} steps")));
        }
        samples.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, &(i, start)) in samples.iter().enumerate() {
            let wrap = |e: FenError| FenError::Training { epoch, step, source: Box::new(e) };
            let (loss, grads) = train_step(&model, &artifacts, &dataset.sequences[i], start, s, &config.solver).map_err(wrap)?;
            adam.step(model.tensors_mut(), &grads).map_err(wrap)?;
            loss_sum += loss;
        }
        let val = validate(&model).map_err(|e| FenError::Training { epoch, step: samples.len(), source: Box::new(e) })?;
        let record = EpochRecord {
            epoch,
            s,
            train_loss: loss_sum / samples.len() as f64,
            val_mae: val.mae,
            nfe_mean: val.nfe_mean,
            nfe_std: val.nfe_std,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(out) = log.as_mut() {
            writeln!(out, "{}", serde_json::to_string(&record)?)?;
        }
        history.epochs.push(record);
        if val.mae < history.best_val_mae {
            history.best_val_mae = val.mae;
            history.best_epoch = Some(epoch);
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
        if config.max_wall_time_s.is_some_and(|cap| started.elapsed().as_secs_f64() > cap) {
            break;
        }
    }
    Ok(TrainOutcome { best, last: model, history })
}
