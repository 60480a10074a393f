//! Projected gradient descent over switching schedules with Armijo steps,
//! wrapped in an outer loop that adds a switching location whenever the
//! locally optimal schedule drives the agent onto a mission boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ipa::{ipa_gradient, IpaError};
use crate::model::{check_schedule, MissionConfig, ScheduleError, SwitchingSchedule};
use crate::sim::{simulate_cost, simulate_with, Recording, SimError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ipa(#[from] IpaError),
    #[error("invalid optimizer settings: {0}")]
    Settings(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmijoSettings {
    pub initial_step: f64,
    pub backtrack: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoSettings {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            backtrack: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    /// Stop when the projected gradient norm drops below this.
    pub eps: f64,
    /// Iteration cap per dimension phase.
    pub max_iters: usize,
    pub armijo: ArmijoSettings,
    /// How many times the number of switching locations may grow.
    pub max_growth: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            eps: 2e-10,
            max_iters: 1000,
            armijo: ArmijoSettings::default(),
            max_growth: 10,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let a = &self.armijo;
        if !(self.eps > 0.0) {
            return Err(OptimizeError::Settings("eps must be positive"));
        }
        if !(a.initial_step > 0.0) {
            return Err(OptimizeError::Settings("initial step must be positive"));
        }
        if !(a.backtrack > 0.0 && a.backtrack < 1.0) {
            return Err(OptimizeError::Settings(
                "backtrack factor must lie in (0, 1)",
            ));
        }
        if !(a.sufficient_decrease > 0.0 && a.sufficient_decrease < 1.0) {
            return Err(OptimizeError::Settings(
                "sufficient-decrease constant must lie in (0, 1)",
            ));
        }
        Ok(())
    }
}

/// Tolerance for treating two switching locations (or a location and a
/// box face) as coincident.
const ACTIVE_TOL: f64 = 1e-12;

/// Projects `grad` so that the step `θ - η·d` respects every constraint that
/// is active at `theta`.
///
/// Adjacent locations that coincide and would be pushed across each other
/// are tied and share their average component; ties chain. Tied groups
/// sitting on a box face and pointing outward get a zero component.
pub fn project_direction(
    grad: &[f64],
    theta: &SwitchingSchedule,
    length: f64,
) -> Result<Vec<f64>, ScheduleError> {
    let th = theta.as_slice();
    check_schedule(th, length)?;
    assert_eq!(grad.len(), th.len(), "gradient and schedule lengths differ");
    let n = th.len();
    let tol = ACTIVE_TOL * length.max(1.0);
    let mut tied = vec![false; n];
    let mut dir = grad.to_vec();
    for _ in 0..=n {
        // blocks are maximal runs joined by `tied[j]` (j tied to j - 1)
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && tied[end] {
                end += 1;
            }
            let avg = grad[start..end].iter().sum::<f64>() / (end - start) as f64;
            let value = th[start];
            let outward = (value >= length - tol && avg < 0.0) || (value <= tol && avg > 0.0);
            dir[start..end].fill(if outward { 0.0 } else { avg });
            start = end;
        }
        let mut changed = false;
        for j in 1..n {
            if tied[j] || (th[j] - th[j - 1]).abs() > tol {
                continue;
            }
            // θ_j moves by -η d_j; even locations (odd index) must stay at or
            // below their predecessor, odd ones at or above
            let violates = if j % 2 == 1 {
                dir[j] < dir[j - 1]
            } else {
                dir[j] > dir[j - 1]
            };
            if violates {
                tied[j] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmijoOutcome {
    /// Accepted step size, or zero when the search stalled.
    pub step: f64,
    pub theta: Vec<f64>,
    pub cost: f64,
    pub backtracks: usize,
    pub stalled: bool,
}

/// Backtracking search on an arbitrary cost with a projection onto the
/// feasible set.
pub fn armijo_search<E>(
    mut cost: impl FnMut(&[f64]) -> Result<f64, E>,
    project: impl Fn(&[f64]) -> Vec<f64>,
    theta: &[f64],
    direction: &[f64],
    current: f64,
    settings: &ArmijoSettings,
) -> Result<ArmijoOutcome, E> {
    let norm2: f64 = direction.iter().map(|d| d * d).sum();
    let mut step = settings.initial_step;
    for backtracks in 0..=settings.max_backtracks {
        let trial: Vec<f64> = theta
            .iter()
            .zip(direction)
            .map(|(t, d)| t - step * d)
            .collect();
        let trial = project(&trial);
        let value = cost(&trial)?;
        if norm2 > 0.0 && value <= current - settings.sufficient_decrease * step * norm2 {
            return Ok(ArmijoOutcome {
                step,
                theta: trial,
                cost: value,
                backtracks,
                stalled: false,
            });
        }
        step *= settings.backtrack;
    }
    Ok(ArmijoOutcome {
        step: 0.0,
        theta: theta.to_vec(),
        cost: current,
        backtracks: settings.max_backtracks,
        stalled: true,
    })
}

/// Armijo step along `-direction` from `theta` using the simulated cost.
pub fn armijo_step(
    config: &MissionConfig,
    theta: &SwitchingSchedule,
    direction: &[f64],
    current: f64,
    settings: &ArmijoSettings,
) -> Result<ArmijoOutcome, SimError> {
    let length = config.length;
    armijo_search(
        |t| simulate_cost(config, t),
        |t| SwitchingSchedule::project(t, length).into_vec(),
        theta.as_slice(),
        direction,
        current,
        settings,
    )
}

/// One run of the inner descent loop at a fixed number of locations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phase {
    pub dimension: usize,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub iterations: usize,
    /// Cost before the first and after every accepted step.
    pub cost_history: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
    pub stalled: bool,
    pub interior: bool,
    /// The final trajectory of this phase reflected off a wall after its
    /// last location. Appending `s(T)` then changes the cost.
    pub reflected: bool,
    /// Cost change caused by appending a location at the start of this
    /// phase (`None` for the first phase).
    pub growth_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerReport {
    pub theta_star: SwitchingSchedule,
    pub cost_star: f64,
    pub phases: Vec<Phase>,
    /// Projected-gradient norm at `theta_star`.
    pub grad_norm: f64,
    pub converged: bool,
    /// The final trajectory never touches `0` or `L`.
    pub interior: bool,
    /// Some final location sits on a box face.
    pub on_box_face: bool,
}

impl OptimizerReport {
    pub fn dimension_history(&self) -> Vec<usize> {
        self.phases.iter().map(|p| p.dimension).collect()
    }

    pub fn iterations(&self) -> Vec<usize> {
        self.phases.iter().map(|p| p.iterations).collect()
    }

    pub fn cost_history(&self) -> Vec<f64> {
        self.phases
            .iter()
            .flat_map(|p| p.cost_history.iter().copied())
            .collect()
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }
}

/// Default seed: `max(1, ⌊T/L⌋)` locations alternating between `0.9 L` and `0.1 L`.
pub fn default_seed(config: &MissionConfig) -> SwitchingSchedule {
    let n = ((config.horizon / config.length).floor() as usize).max(1);
    let theta = (0..n)
        .map(|j| {
            if j % 2 == 0 {
                0.9 * config.length
            } else {
                0.1 * config.length
            }
        })
        .collect();
    SwitchingSchedule::new(theta, config.length).expect("alternating seed is feasible")
}

struct Evaluation {
    cost: f64,
    direction: Vec<f64>,
    norm: f64,
    interior: bool,
    final_position: f64,
    reflected: bool,
}

fn evaluate(
    config: &MissionConfig,
    theta: &SwitchingSchedule,
) -> Result<Evaluation, OptimizeError> {
    let traj = simulate_with(config, theta.as_slice(), Recording::Full)?;
    let grad = ipa_gradient(config, theta, &traj)?;
    let direction = project_direction(&grad.grad, theta, config.length)?;
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    Ok(Evaluation {
        cost: traj.cost,
        direction,
        norm,
        interior: traj.satisfies_interior_condition(),
        final_position: traj.final_position,
        reflected: traj.reflected(),
    })
}

fn descend(
    config: &MissionConfig,
    mut theta: SwitchingSchedule,
    settings: &OptimizerSettings,
    growth_delta: Option<f64>,
) -> Result<(Phase, SwitchingSchedule, Evaluation), OptimizeError> {
    let start = theta.as_slice().to_vec();
    let mut eval = evaluate(config, &theta)?;
    let mut history = vec![eval.cost];
    let mut iterations = 0;
    let mut stalled = false;
    while eval.norm >= settings.eps && iterations < settings.max_iters {
        let step = armijo_step(config, &theta, &eval.direction, eval.cost, &settings.armijo)?;
        if step.stalled {
            stalled = true;
            break;
        }
        theta = SwitchingSchedule::new(step.theta, config.length)?;
        eval = evaluate(config, &theta)?;
        history.push(eval.cost);
        iterations += 1;
        log::debug!(
            "N = {} iter {iterations}: J = {:.10} |grad| = {:.3e} step = {:.3e}",
            theta.len(),
            eval.cost,
            eval.norm,
            step.step
        );
    }
    let phase = Phase {
        dimension: theta.len(),
        start,
        end: theta.as_slice().to_vec(),
        iterations,
        cost_history: history,
        grad_norm: eval.norm,
        converged: eval.norm < settings.eps,
        stalled,
        interior: eval.interior,
        reflected: eval.reflected,
        growth_delta,
    };
    Ok((phase, theta, eval))
}

/// Runs the full descent-and-grow procedure from `theta0` (or the default
/// seed).
pub fn optimize(
    config: &MissionConfig,
    theta0: Option<SwitchingSchedule>,
    settings: &OptimizerSettings,
) -> Result<OptimizerReport, OptimizeError> {
    settings.validate()?;
    config.validate().map_err(SimError::from)?;
    let mut theta = match theta0 {
        Some(t) => {
            check_schedule(t.as_slice(), config.length)?;
            t
        }
        None => default_seed(config),
    };
    let mut phases = Vec::new();
    let mut growth_delta = None;
    loop {
        let (phase, next, eval) = descend(config, theta, settings, growth_delta)?;
        theta = next;
        let done = phase.interior || phases.len() >= settings.max_growth;
        phases.push(phase);
        if done {
            let on_box_face = theta.as_slice().iter().any(|&v| {
                v <= ACTIVE_TOL || v >= config.length - ACTIVE_TOL * config.length.max(1.0)
            });
            return Ok(OptimizerReport {
                cost_star: eval.cost,
                grad_norm: eval.norm,
                converged: eval.norm < settings.eps,
                interior: eval.interior,
                on_box_face,
                theta_star: theta,
                phases,
            });
        }
        let mut grown = theta.as_slice().to_vec();
        grown.push(eval.final_position);
        theta = SwitchingSchedule::project(&grown, config.length);
        let after = simulate_cost(config, theta.as_slice())?;
        growth_delta = Some(after - eval.cost);
        log::info!(
            "boundary touched with N = {}; growing to N = {} (delta J = {:.3e})",
            theta.len() - 1,
            theta.len(),
            after - eval.cost
        );
    }
}
