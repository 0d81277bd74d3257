//! Adaptive Dormand–Prince 5(4) integration.
//!
//! The same stepping code drives a plain solve over tensors and a recorded
//! solve over graph nodes, so both produce identical values.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{FenError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub atol: f64,
    pub rtol: f64,
    pub max_nfe: usize,
    pub initial_step: Option<f64>,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { atol: 1e-6, rtol: 1e-6, max_nfe: 10_000, initial_step: None, safety: 0.9, min_factor: 0.2, max_factor: 10.0 }
    }
}

impl SolverConfig {
    pub fn with_tolerance(tol: f64) -> Self {
        Self { atol: tol, rtol: tol, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.atol > 0.0
            && self.rtol > 0.0
            && self.max_nfe > 0
            && self.safety > 0.0
            && self.min_factor > 0.0
            && self.min_factor <= 1.0
            && self.max_factor >= 1.0
            && self.initial_step.map_or(true, |h| h > 0.0);
        if ok {
            Ok(())
        } else {
            Err(FenError::InvalidSpec(format!("invalid solver config {self:?}")))
        }
    }
}

/// Solution at the requested output times.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S = Tensor> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

/// Trajectory whose states are nodes of a recorded graph.
pub type GraphTrajectory = Trajectory<Var>;

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

trait Backend {
    type State: Clone;
    fn eval(&mut self, t: f64, y: &Self::State) -> Result<Self::State>;
    /// `base + sum c_i x_i`, left to right.
    fn combine(&mut self, base: &Self::State, terms: &[(f64, &Self::State)]) -> Result<Self::State>;
    fn values<'s>(&'s self, s: &'s Self::State) -> &'s [f64];
    fn mark(&self) -> usize;
    fn rollback(&mut self, mark: usize);
}

fn combine_plain(base: &Tensor, terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    let mut out = base.clone();
    for (c, t) in terms {
        if t.shape() != base.shape() {
            return Err(FenError::ShapeMismatch("derivative and state shapes differ".into()));
        }
        for (o, a) in out.data_mut().iter_mut().zip(t.data()) {
            *o += c * a;
        }
    }
    if !out.is_finite() {
        return Err(FenError::NonFiniteOutput("solver stage".into()));
    }
    Ok(out)
}

struct Plain<F>(F);

impl<F: FnMut(f64, &Tensor) -> Result<Tensor>> Backend for Plain<F> {
    type State = Tensor;

    fn eval(&mut self, t: f64, y: &Tensor) -> Result<Tensor> {
        let out = (self.0)(t, y)?;
        if out.shape() != y.shape() {
            return Err(FenError::ShapeMismatch("derivative and state shapes differ".into()));
        }
        if !out.is_finite() {
            return Err(FenError::NonFiniteOutput("derivative".into()));
        }
        Ok(out)
    }

    fn combine(&mut self, base: &Tensor, terms: &[(f64, &Tensor)]) -> Result<Tensor> {
        combine_plain(base, terms)
    }

    fn values<'s>(&'s self, s: &'s Tensor) -> &'s [f64] {
        s.data()
    }

    fn mark(&self) -> usize {
        0
    }

    fn rollback(&mut self, _: usize) {}
}

struct Recorded<'g, F> {
    graph: &'g mut Graph,
    f: F,
}

impl<F: FnMut(&mut Graph, f64, Var) -> Result<Var>> Backend for Recorded<'_, F> {
    type State = Var;

    fn eval(&mut self, t: f64, y: &Var) -> Result<Var> {
        let out = (self.f)(self.graph, t, *y)?;
        if self.graph.value(out).shape() != self.graph.value(*y).shape() {
            return Err(FenError::ShapeMismatch("derivative and state shapes differ".into()));
        }
        Ok(out)
    }

    fn combine(&mut self, base: &Var, terms: &[(f64, &Var)]) -> Result<Var> {
        let terms: Vec<(f64, Var)> = terms.iter().map(|(c, v)| (*c, **v)).collect();
        self.graph.lincomb(*base, &terms)
    }

    fn values<'s>(&'s self, s: &'s Var) -> &'s [f64] {
        self.graph.value(*s).data()
    }

    fn mark(&self) -> usize {
        self.graph.len()
    }

    fn rollback(&mut self, mark: usize) {
        self.graph.truncate(mark);
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(FenError::InvalidSpec("no output times".into()));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FenError::InvalidSpec("output times must be finite and strictly increasing".into()));
    }
    Ok(())
}

fn rms(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    (values.map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt()
}

struct Solver<'c, B: Backend> {
    backend: B,
    config: &'c SolverConfig,
    nfe: usize,
}

impl<B: Backend> Solver<'_, B> {
    fn eval(&mut self, t: f64, y: &B::State) -> Result<B::State> {
        if self.nfe >= self.config.max_nfe {
            return Err(FenError::MaxNfeExceeded { max_nfe: self.config.max_nfe, t });
        }
        self.nfe += 1;
        self.backend.eval(t, y)
    }

    /// Hairer, Nørsett and Wanner's starting step. Uses one extra evaluation.
    fn initial_step(&mut self, t0: f64, y0: &B::State, f0: &B::State, span: f64) -> Result<f64> {
        if let Some(h) = self.config.initial_step {
            return Ok(h.min(span));
        }
        let (atol, rtol) = (self.config.atol, self.config.rtol);
        let y = self.backend.values(y0).to_vec();
        let n = y.len();
        let scale: Vec<f64> = y.iter().map(|v| atol + rtol * v.abs()).collect();
        let d0 = rms(y.iter().zip(&scale).map(|(v, s)| v / s), n);
        let f = self.backend.values(f0).to_vec();
        let d1 = rms(f.iter().zip(&scale).map(|(v, s)| v / s), n);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }.min(span);

        let mark = self.backend.mark();
        let y1 = self.backend.combine(y0, &[(h0, f0)])?;
        let f1 = self.eval(t0 + h0, &y1)?;
        let d2 = rms(self.backend.values(&f1).iter().zip(&f).zip(&scale).map(|((a, b), s)| (a - b) / s), n) / h0;
        self.backend.rollback(mark);

        let dmax = d1.max(d2);
        if dmax <= 1e-15 {
            // no motion at all: a single step per output interval suffices
            return Ok(span);
        }
        let h1 = (0.01 / dmax).powf(0.2);
        Ok((100.0 * h0).min(h1).min(span))
    }

    fn solve(mut self, y0: B::State, times: &[f64]) -> Result<Trajectory<B::State>> {
        self.config.validate()?;
        check_times(times)?;
        if !self.backend.values(&y0).iter().all(|v| v.is_finite()) {
            return Err(FenError::NonFiniteOutput("initial state".into()));
        }
        let mut traj = Trajectory { times: vec![times[0]], states: vec![y0.clone()], nfe: 0, accepted: 0, rejected: 0 };
        if times.len() == 1 {
            return Ok(traj);
        }
        let span = times[times.len() - 1] - times[0];
        let (atol, rtol) = (self.config.atol, self.config.rtol);
        let mut t = times[0];
        let mut y = y0;
        let mut k1 = self.eval(t, &y)?;
        let mut h = self.initial_step(t, &y, &k1, span)?;

        for &t_out in &times[1..] {
            while t < t_out {
                let remaining = t_out - t;
                let clamped = h >= remaining || remaining - h <= 1e-12 * span;
                let h_try = if clamped { remaining } else { h };
                if h_try < 1e-12 * span {
                    return Err(FenError::StepUnderflow { step: h_try, t });
                }

                let mark = self.backend.mark();
                let mut k: Vec<B::State> = Vec::with_capacity(7);
                k.push(k1.clone());
                let mut y_new = None;
                for s in 1..7 {
                    let terms: Vec<(f64, &B::State)> =
                        A[s].iter().zip(&k).filter(|(a, _)| **a != 0.0).map(|(a, ks)| (h_try * a, ks)).collect();
                    let ys = self.backend.combine(&y, &terms)?;
                    let t_stage = if s == 6 && clamped { t_out } else { t + C[s] * h_try };
                    k.push(self.eval(t_stage, &ys)?);
                    if s == 6 {
                        y_new = Some(ys);
                    }
                }
                let y_new = y_new.expect("six stages");

                let yv = self.backend.values(&y);
                let yn = self.backend.values(&y_new);
                let kv: Vec<&[f64]> = k.iter().map(|ks| self.backend.values(ks)).collect();
                let err = rms(
                    (0..yv.len()).map(|i| {
                        let e: f64 = (0..7).map(|s| E[s] * kv[s][i]).sum::<f64>() * h_try;
                        e / (atol + rtol * yv[i].abs().max(yn[i].abs()))
                    }),
                    yv.len(),
                );
                if !err.is_finite() {
                    return Err(FenError::NonFiniteOutput("error estimate".into()));
                }

                let factor = if err == 0.0 {
                    self.config.max_factor
                } else {
                    (self.config.safety * err.powf(-0.2)).clamp(self.config.min_factor, self.config.max_factor)
                };
                if err <= 1.0 {
                    traj.accepted += 1;
                    t = if clamped { t_out } else { t + h_try };
                    y = y_new;
                    k1 = k.pop().expect("seven stages");
                    let h_new = h_try * factor;
                    h = if clamped { h_new.max(h) } else { h_new };
                } else {
                    traj.rejected += 1;
                    drop(k);
                    self.backend.rollback(mark);
                    h = h_try * factor.min(1.0);
                }
            }
            traj.times.push(t_out);
            traj.states.push(y.clone());
        }
        traj.nfe = self.nfe;
        Ok(traj)
    }
}

/// Solves `dy/dt = f(t, y)` and returns the states at `times`, the first of
/// which is the initial time.
pub fn dopri5_solve<F>(f: F, y0: &Tensor, times: &[f64], config: &SolverConfig) -> Result<Trajectory>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    Solver { backend: Plain(f), config, nfe: 0 }.solve(y0.clone(), times)
}

/// Like [`dopri5_solve`], but records every accepted stage on `graph` so
/// that losses on the returned states can be differentiated. Rejected
/// attempts are removed from the graph; step sizes are constants.
pub fn solve_with_gradients<F>(graph: &mut Graph, f: F, y0: Var, times: &[f64], config: &SolverConfig) -> Result<GraphTrajectory>
where
    F: FnMut(&mut Graph, f64, Var) -> Result<Var>,
{
    Solver { backend: Recorded { graph, f }, config, nfe: 0 }.solve(y0, times)
}
