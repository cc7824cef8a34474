//! Gradient descent and masked stochastic descent with a gradient-norm stop
//! rule and monitoring of the per-node balance `Diag(W1W1ᵀ) - Diag(W2ᵀW2)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::{grad_dropout, grad_scaled, stochastic_direction, Gradient};
use crate::model::{dropout_objective, scaled_risk, DataMatrix, DropoutSpec, Weights};
use crate::{Error, Result};

/// Loss growth factor over the initial loss that counts as divergence.
const BLOWUP_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub grad_tol: f64,
    pub t_max: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            grad_tol: 1e-5,
            t_max: 500_000,
        }
    }
}

impl StopRule {
    pub fn new(grad_tol: f64, t_max: u64) -> Result<Self> {
        let rule = StopRule { grad_tol, t_max };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) || !self.grad_tol.is_finite() {
            return Err(Error::Domain(format!(
                "grad_tol must be positive, got {}",
                self.grad_tol
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Domain("t_max must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Recording stride used when none is given: every step for budgets up
    /// to `1e5`, otherwise every tenth.
    pub fn default_stride(&self) -> u64 {
        if self.t_max <= 100_000 {
            1
        } else {
            10
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    GradTol,
    TMax,
}

impl std::fmt::Display for TerminatedBy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TerminatedBy::GradTol => "grad_tol",
            TerminatedBy::TMax => "t_max",
        })
    }
}

/// Which loss the descent minimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// The dropout objective for the given variant and retain probability.
    J(DropoutSpec),
    /// The scaled risk with strength `λ`.
    I(f64),
}

impl Objective {
    pub fn value(&self, y: &DataMatrix, w: &Weights) -> Result<f64> {
        match self {
            Objective::J(spec) => dropout_objective(y, w, spec),
            Objective::I(lambda) => scaled_risk(y, w, *lambda),
        }
    }

    pub fn gradient(&self, y: &DataMatrix, w: &Weights) -> Result<Gradient> {
        match self {
            Objective::J(spec) => grad_dropout(y, w, spec),
            Objective::I(lambda) => grad_scaled(y, w, *lambda),
        }
    }
}

/// Step size as a function of the iteration count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaSchedule {
    Constant(f64),
    /// `eta0 / (1 + n / t0)`.
    InverseTime {
        eta0: f64,
        t0: f64,
    },
}

impl EtaSchedule {
    pub fn at(&self, n: u64) -> f64 {
        match *self {
            EtaSchedule::Constant(eta) => eta,
            EtaSchedule::InverseTime { eta0, t0 } => eta0 / (1.0 + n as f64 / t0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            EtaSchedule::Constant(eta) => eta > 0.0 && eta.is_finite(),
            EtaSchedule::InverseTime { eta0, t0 } => {
                eta0 > 0.0 && eta0.is_finite() && t0 > 0.0 && t0.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "step sizes must be positive: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    /// Record every `stride` iterations; `None` picks [`StopRule::default_stride`].
    pub stride: Option<u64>,
    /// Keep a copy of the weights at every recorded iteration.
    pub keep_weights: bool,
}

impl RunOptions {
    pub fn with_stride(stride: u64) -> Self {
        RunOptions {
            stride: Some(stride),
            keep_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Iteration index of each recorded point.
    pub iterations: Vec<u64>,
    pub grad_norms: Vec<f64>,
    pub losses: Vec<f64>,
    /// `||b(t) - b(0)||_max` with `b = Diag(W1W1ᵀ) - Diag(W2ᵀW2)`.
    pub balance_drift: Vec<f64>,
    pub t: u64,
    pub terminated_by: TerminatedBy,
    pub final_weights: Weights,
    pub record_stride: u64,
    /// False if a recorded loss ever increased.
    pub monotone: bool,
    pub snapshots: Option<Vec<Weights>>,
}

fn balance(w: &Weights) -> Vec<f64> {
    w.in_norms_sq()
        .into_iter()
        .zip(w.out_norms_sq())
        .map(|(d, c)| d - c)
        .collect()
}

fn max_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Shared descent loop; `step` maps `(n, W(n), ∇(W(n)))` to `W(n+1)`.
fn descend<F>(
    y: &DataMatrix,
    w0: &Weights,
    objective: &Objective,
    stop: StopRule,
    options: RunOptions,
    mut step: F,
) -> Result<Trajectory>
where
    F: FnMut(u64, &Weights, &Gradient) -> Result<Weights>,
{
    stop.validate()?;
    let stride = options.stride.unwrap_or_else(|| stop.default_stride());
    if stride == 0 {
        return Err(Error::Domain("record stride must be ≥ 1".into()));
    }
    if !w0.is_finite() {
        return Err(Error::Domain("initial weights are not finite".into()));
    }

    let initial_balance = balance(w0);
    let initial_loss = objective.value(y, w0)?;
    let blowup = BLOWUP_FACTOR * initial_loss.max(f64::MIN_POSITIVE);

    let mut traj = Trajectory {
        iterations: Vec::new(),
        grad_norms: Vec::new(),
        losses: Vec::new(),
        balance_drift: Vec::new(),
        t: 0,
        terminated_by: TerminatedBy::TMax,
        final_weights: w0.clone(),
        record_stride: stride,
        monotone: true,
        snapshots: options.keep_weights.then(Vec::new),
    };

    let mut w = w0.clone();
    let mut last_finite = w0.clone();
    let mut n = 0u64;
    loop {
        let loss = objective.value(y, &w)?;
        let grad = objective.gradient(y, &w)?;
        let grad_norm = grad.frobenius_norm();
        if !w.is_finite() || !loss.is_finite() || !grad_norm.is_finite() || loss > blowup {
            return Err(Error::Divergence {
                iteration: n,
                last_finite: Box::new(last_finite),
            });
        }

        let finished = if grad_norm < stop.grad_tol {
            Some(TerminatedBy::GradTol)
        } else if n >= stop.t_max {
            Some(TerminatedBy::TMax)
        } else {
            None
        };

        if n.is_multiple_of(stride) || finished.is_some() {
            if let Some(&prev) = traj.losses.last() {
                if loss > prev {
                    traj.monotone = false;
                }
            }
            traj.iterations.push(n);
            traj.grad_norms.push(grad_norm);
            traj.losses.push(loss);
            traj.balance_drift
                .push(max_deviation(&balance(&w), &initial_balance));
            if let Some(s) = traj.snapshots.as_mut() {
                s.push(w.clone());
            }
        }

        if let Some(reason) = finished {
            traj.t = n;
            traj.terminated_by = reason;
            traj.final_weights = w;
            return Ok(traj);
        }

        let next = step(n, &w, &grad)?;
        last_finite = std::mem::replace(&mut w, next);
        n += 1;
    }
}

/// Plain gradient descent `W ← W - η∇(W)` on the chosen objective.
pub fn gd_run(
    y: &DataMatrix,
    w0: &Weights,
    objective: &Objective,
    eta: f64,
    stop: StopRule,
    options: RunOptions,
) -> Result<Trajectory> {
    EtaSchedule::Constant(eta).validate()?;
    descend(y, w0, objective, stop, options, |_, w, g| {
        Ok(w.axpy(-eta, &g.as_weights()))
    })
}

/// Descent along freshly masked gradients. The stop rule and the recorded
/// norms use the exact gradient of the dropout objective.
pub fn sgd_run<R: Rng + ?Sized>(
    y: &DataMatrix,
    w0: &Weights,
    spec: &DropoutSpec,
    schedule: EtaSchedule,
    stop: StopRule,
    rng: &mut R,
    options: RunOptions,
) -> Result<Trajectory> {
    schedule.validate()?;
    descend(y, w0, &Objective::J(*spec), stop, options, |n, w, _| {
        let direction = stochastic_direction(y, w, spec, rng)?;
        Ok(w.axpy(-schedule.at(n), &direction.as_weights()))
    })
}

/// Largest recorded balance drift, 0 for an empty record.
pub fn balance_drift_max(traj: &Trajectory) -> f64 {
    traj.balance_drift.iter().copied().fold(0.0, f64::max)
}
