//! Infinitesimal perturbation analysis of the mean uncertainty with respect
//! to the switching locations.
//!
//! Two propagation routes are provided. [`ipa_gradient`] uses the closed
//! forms: after `θ_j` is first reached, `∂s/∂θ_j = (-1)^j · 2u(t)`; the
//! sensitivities `∂R_i/∂θ_j` are piecewise linear in time with slope
//! `-B · ∂p_i/∂s · ∂s/∂θ_j` while point `i` is in sensing range, frozen out of
//! range, and reset to zero whenever the queue empties. [`general_form`]
//! propagates the generic hybrid-system equations instead (flow
//! `d/dt x' = ∂f/∂x · x'`, jumps `x'(τ+) = x'(τ-) + [f(τ-) - f(τ+)] τ'`, and
//! event-time sensitivities from the guard functions) and therefore checks
//! the closed forms independently.
//!
//! Indices `j` are 0-based in code; the sign conventions use the 1-based
//! position `j + 1`.

use serde::Serialize;
use thiserror::Error;

use crate::model::{check_schedule, MissionConfig, SwitchingSchedule};
use crate::par::{self, Execution};
use crate::sim::{simulate_with, EventKind, ModeSet, Recording, SimError, Trajectory};

/// Agreement required between the closed-form and general-form routes.
pub const CROSS_CHECK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IpaError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("trajectory was simulated with a different schedule or mission")]
    Mismatch,
    #[error("trajectory has no recorded pieces")]
    MissingPieces,
    #[error("gradient routes disagree by {0:e}")]
    CrossCheck(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum GradientWarning {
    /// A queue-empty guard was reached tangentially; its event-time
    /// sensitivity is undefined.
    Grazing { time: f64 },
    /// A queue emptied but the point did not stay empty.
    EmptyWithoutDwell { time: f64, point: usize },
}

/// Sensitivities carried along the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientState {
    /// First time each `θ_j` was reached, if ever.
    pub activation: Vec<Option<f64>>,
    /// `∂R_i/∂θ_j` at the end of the run, row-major `M × N`.
    pub dr: Vec<f64>,
    /// `∇J`.
    pub grad: Vec<f64>,
    pub warnings: Vec<GradientWarning>,
}

impl GradientState {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// `(-1)^j` for the 1-based location number of 0-based index `j`.
fn parity(j: usize) -> f64 {
    if j.is_multiple_of(2) {
        -1.0
    } else {
        1.0
    }
}

/// `∂s/∂θ_j` at time `t` under control `u`, given the activation time of
/// location `j` (0-based).
pub fn grad_s(j: usize, t: f64, u: f64, activation: Option<f64>) -> f64 {
    match activation {
        Some(a) if t >= a => parity(j) * 2.0 * u,
        _ => 0.0,
    }
}

/// `∂p_i/∂s` for a point in the given mode class.
fn dp_ds(set: ModeSet, range: f64) -> f64 {
    match set {
        ModeSet::Q3 => 1.0 / range,
        ModeSet::Q4 => -1.0 / range,
        ModeSet::Q1 | ModeSet::Q2 => 0.0,
    }
}

fn check_inputs(
    config: &MissionConfig,
    schedule: &[f64],
    trajectory: &Trajectory,
) -> Result<(), IpaError> {
    if trajectory.theta != schedule
        || trajectory.point_count != config.len()
        || trajectory.t_start != 0.0
        || trajectory.t_end != config.horizon
    {
        return Err(IpaError::Mismatch);
    }
    if !trajectory.has_pieces() {
        return Err(IpaError::MissingPieces);
    }
    Ok(())
}

/// Closed-form gradient of `J` over a trajectory produced by
/// [`crate::sim::simulate`] for the same schedule.
pub fn ipa_gradient(
    config: &MissionConfig,
    schedule: &SwitchingSchedule,
    trajectory: &Trajectory,
) -> Result<GradientState, IpaError> {
    closed_form(config, schedule.as_slice(), trajectory, None)
}

/// Like [`ipa_gradient`] and also returns `∂R/∂θ` (row-major `M × N`) at the
/// start of every segment, after that segment's events were applied.
pub fn ipa_trace(
    config: &MissionConfig,
    schedule: &SwitchingSchedule,
    trajectory: &Trajectory,
) -> Result<(GradientState, Vec<Vec<f64>>), IpaError> {
    let mut trace = Vec::with_capacity(trajectory.segments.len());
    let state = closed_form(config, schedule.as_slice(), trajectory, Some(&mut trace))?;
    Ok((state, trace))
}

fn closed_form(
    config: &MissionConfig,
    theta: &[f64],
    trajectory: &Trajectory,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<GradientState, IpaError> {
    check_inputs(config, theta, trajectory)?;
    let m = config.len();
    let n = theta.len();
    let service = config.service;
    let mut activation = vec![None; n];
    let mut dr = vec![0.0; m * n];
    let mut grad = vec![0.0; n];
    let mut warnings: Vec<GradientWarning> = trajectory
        .grazing
        .iter()
        .map(|&time| GradientWarning::Grazing { time })
        .collect();

    for (k, seg) in trajectory.segments.iter().enumerate() {
        for ev in trajectory.events_of(k) {
            if let EventKind::SwitchingPoint(j) = ev.kind {
                activation[j].get_or_insert(ev.time);
            }
        }
        let pieces = trajectory.pieces_of(k);
        for ev in trajectory.events_of(k) {
            if let EventKind::QueueEmpty(i) = ev.kind {
                if pieces[i].mode.mode_set() != ModeSet::Q1 {
                    warnings.push(GradientWarning::EmptyWithoutDwell {
                        time: ev.time,
                        point: i,
                    });
                }
            }
        }
        let d = seg.duration();
        let u = seg.velocity;
        // ∂s/∂θ_j is constant on the segment
        let ds: Vec<f64> = (0..n)
            .map(|j| grad_s(j, seg.t_start, u, activation[j]))
            .collect();
        for (i, piece) in pieces.iter().enumerate() {
            if piece.mode.mode_set() == ModeSet::Q1 {
                dr[i * n..(i + 1) * n].fill(0.0);
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(dr.clone());
        }
        for (i, piece) in pieces.iter().enumerate() {
            let row = &mut dr[i * n..(i + 1) * n];
            match piece.mode.mode_set() {
                ModeSet::Q1 => {}
                ModeSet::Q2 => {
                    for j in 0..n {
                        grad[j] += row[j] * d;
                    }
                }
                set => {
                    let gain = -service * dp_ds(set, config.range);
                    for j in 0..n {
                        let slope = gain * ds[j];
                        grad[j] += d * (row[j] + 0.5 * slope * d);
                        row[j] += slope * d;
                    }
                }
            }
        }
    }
    let horizon = config.horizon;
    for g in &mut grad {
        *g /= horizon;
    }
    Ok(GradientState {
        activation,
        dr,
        grad,
        warnings,
    })
}

/// Result of the general-form propagation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralForm {
    /// `∇J` after the boundary terms cancel.
    pub grad: Vec<f64>,
    /// `∇J` assembled with explicit `R_i(τ_k) ∇τ_k` terms at every event.
    pub grad_with_boundary_terms: Vec<f64>,
    /// `∂s/∂θ` at the end of the run.
    pub ds: Vec<f64>,
    /// `∂R/∂θ` at the end of the run, row-major `M × N`.
    pub dr: Vec<f64>,
    /// Largest `|R_i(τ_k-) - R_i(τ_k+)|` and rate jump seen at non-emptying events.
    pub max_rate_jump: f64,
    pub warnings: Vec<GradientWarning>,
}

/// Generic hybrid-system sensitivity propagation over a recorded trajectory.
pub fn general_form(
    config: &MissionConfig,
    schedule: &SwitchingSchedule,
    trajectory: &Trajectory,
) -> Result<GeneralForm, IpaError> {
    let theta = schedule.as_slice();
    check_inputs(config, theta, trajectory)?;
    let m = config.len();
    let n = theta.len();
    let service = config.service;
    let mut ds = vec![0.0; n];
    let mut dr = vec![0.0; m * n];
    let mut grad = vec![0.0; n];
    let mut boundary = vec![0.0; n];
    let mut max_rate_jump: f64 = 0.0;
    let mut warnings = Vec::new();
    let mut u = 1.0;
    let mut tau_prime = vec![0.0; n];
    let mut emptied = vec![false; m];

    for (k, seg) in trajectory.segments.iter().enumerate() {
        let next = trajectory.pieces_of(k);
        let prev = (k > 0).then(|| {
            let p = &trajectory.segments[k - 1];
            (trajectory.pieces_of(k - 1), p.duration())
        });
        let f_minus = |i: usize| prev.map_or(next[i].rate, |(pp, d)| pp[i].rate_at(d));
        let r_minus = |i: usize| prev.map_or(next[i].start, |(pp, d)| pp[i].value(d));

        // sensitivity of this boundary's event time, shared by the
        // Leibniz terms on both sides of it
        let mut group_tau: Option<Vec<f64>> = None;
        let mut position_tau: Option<Vec<f64>> = None;
        emptied.fill(false);
        for ev in trajectory.events_of(k) {
            match ev.kind {
                EventKind::QueueEmpty(i) => {
                    emptied[i] = true;
                    let fm = f_minus(i);
                    if fm.abs() < 1e-12 {
                        warnings.push(GradientWarning::Grazing { time: ev.time });
                        continue;
                    }
                    let fp = next[i].rate;
                    for j in 0..n {
                        tau_prime[j] = -dr[i * n + j] / fm;
                    }
                    for j in 0..n {
                        dr[i * n + j] += (fm - fp) * tau_prime[j];
                    }
                    group_tau.get_or_insert_with(|| tau_prime.clone());
                }
                EventKind::SwitchingPoint(jj) => {
                    for j in 0..n {
                        let dg_dtheta = if j == jj { -1.0 } else { 0.0 };
                        tau_prime[j] = -(dg_dtheta + ds[j]) / u;
                    }
                    let u_plus = -u;
                    for j in 0..n {
                        ds[j] += (u - u_plus) * tau_prime[j];
                    }
                    u = u_plus;
                    group_tau.get_or_insert_with(|| tau_prime.clone());
                    position_tau = Some(tau_prime.clone());
                }
                EventKind::BoundaryReflect(_) => {
                    for j in 0..n {
                        tau_prime[j] = -ds[j] / u;
                    }
                    let u_plus = -u;
                    for j in 0..n {
                        ds[j] += (u - u_plus) * tau_prime[j];
                    }
                    u = u_plus;
                    group_tau.get_or_insert_with(|| tau_prime.clone());
                    position_tau = Some(tau_prime.clone());
                }
                EventKind::RegionCross { .. } => {
                    if u != 0.0 {
                        for j in 0..n {
                            tau_prime[j] = -ds[j] / u;
                        }
                        group_tau.get_or_insert_with(|| tau_prime.clone());
                        position_tau.get_or_insert_with(|| tau_prime.clone());
                    }
                }
                EventKind::InflowChange(_) | EventKind::ControlUpdate | EventKind::HorizonEnd => {}
            }
        }
        // every other state component jumps by its (nominally zero) rate jump
        if let Some(tp) = &position_tau {
            for i in (0..m).filter(|&i| !emptied[i]) {
                let jump = f_minus(i) - next[i].rate;
                max_rate_jump = max_rate_jump.max(jump.abs());
                for j in 0..n {
                    dr[i * n + j] += jump * tp[j];
                }
            }
        }
        if let Some(tp) = &group_tau {
            // + R(τ_k-)∇τ_k closes the previous segment, - R(τ_k+)∇τ_k opens this one
            for (i, piece) in next.iter().enumerate().take(m) {
                let diff = r_minus(i) - piece.start;
                max_rate_jump = max_rate_jump.max(diff.abs());
                for j in 0..n {
                    boundary[j] += diff * tp[j];
                }
            }
        }

        // flow: d/dt ∂R_i/∂θ = ∂f_i/∂s · ∂s/∂θ
        let d = seg.duration();
        for (i, piece) in next.iter().enumerate() {
            let gain = -service * dp_ds(piece.mode.mode_set(), config.range);
            for j in 0..n {
                let slope = gain * ds[j];
                let x = &mut dr[i * n + j];
                grad[j] += d * (*x + 0.5 * slope * d);
                *x += slope * d;
            }
        }
        u = seg.velocity;
    }
    let horizon = config.horizon;
    let cancelled: Vec<f64> = grad.iter().map(|g| g / horizon).collect();
    let explicit = grad
        .iter()
        .zip(&boundary)
        .map(|(g, b)| (g + b) / horizon)
        .collect();
    Ok(GeneralForm {
        grad: cancelled,
        grad_with_boundary_terms: explicit,
        ds,
        dr,
        max_rate_jump,
        warnings,
    })
}

/// Closed-form gradient, verified against the general-form route.
pub fn cross_checked_gradient(
    config: &MissionConfig,
    schedule: &SwitchingSchedule,
    trajectory: &Trajectory,
) -> Result<GradientState, IpaError> {
    let closed = ipa_gradient(config, schedule, trajectory)?;
    let general = general_form(config, schedule, trajectory)?;
    let diff = closed
        .grad
        .iter()
        .zip(&general.grad)
        .chain(closed.dr.iter().zip(&general.dr))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if diff > CROSS_CHECK_TOL {
        return Err(IpaError::CrossCheck(diff));
    }
    Ok(closed)
}

/// Simulates and differentiates in one call.
pub fn cost_and_gradient(
    config: &MissionConfig,
    schedule: &SwitchingSchedule,
) -> Result<(Trajectory, GradientState), IpaError> {
    let traj = simulate_with(config, schedule.as_slice(), Recording::Full)?;
    let grad = ipa_gradient(config, schedule, &traj)?;
    Ok((traj, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SkipReason {
    /// `θ ± h e_j` leaves the feasible set.
    Infeasible,
    /// The perturbation changed which queues empty or how often the agent
    /// reverses, so `J` is not smooth across the stencil.
    EventStructure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdGradient {
    pub step: f64,
    /// Central differences; `None` where the component was skipped.
    pub values: Vec<Option<f64>>,
    pub skipped: Vec<(usize, SkipReason)>,
}

/// Per-point queue-empty counts plus reversal counts.
fn structure(traj: &Trajectory) -> (Vec<usize>, usize, usize) {
    let mut empties = vec![0; traj.point_count];
    let mut switches = 0;
    let mut reflects = 0;
    for e in &traj.events {
        match e.kind {
            EventKind::QueueEmpty(i) => empties[i] += 1,
            EventKind::SwitchingPoint(_) => switches += 1,
            EventKind::BoundaryReflect(_) => reflects += 1,
            _ => {}
        }
    }
    (empties, switches, reflects)
}

/// Central-difference estimate of `∇J`; the `2N` simulations fan out under
/// `exec`.
pub fn finite_difference_gradient(
    config: &MissionConfig,
    schedule: &SwitchingSchedule,
    step: f64,
    exec: Execution,
) -> Result<FdGradient, SimError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let theta = schedule.as_slice();
    let base = simulate_with(config, theta, Recording::EventsOnly)?;
    let base_structure = structure(&base);
    let n = theta.len();
    let jobs: Vec<(usize, f64)> = (0..n).flat_map(|j| [(j, step), (j, -step)]).collect();
    let runs = par::map(exec, &jobs, |&(j, h)| {
        let mut p = theta.to_vec();
        p[j] += h;
        if check_schedule(&p, config.length).is_err() {
            return Ok(None);
        }
        simulate_with(config, &p, Recording::EventsOnly).map(Some)
    });
    let mut values = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    let mut runs = runs.into_iter();
    for j in 0..n {
        let plus = runs.next().expect("two runs per component")?;
        let minus = runs.next().expect("two runs per component")?;
        match (plus, minus) {
            (Some(p), Some(m)) => {
                if structure(&p) != base_structure || structure(&m) != base_structure {
                    skipped.push((j, SkipReason::EventStructure));
                    values.push(None);
                } else {
                    values.push(Some((p.cost - m.cost) / (2.0 * step)));
                }
            }
            _ => {
                skipped.push((j, SkipReason::Infeasible));
                values.push(None);
            }
        }
    }
    Ok(FdGradient {
        step,
        values,
        skipped,
    })
}

/// Component-wise comparison row for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub index: usize,
    pub ipa: f64,
    pub fd: Option<f64>,
    pub rel_err: Option<f64>,
}

/// Denominator floor for near-zero components. Central differences at the
/// default step carry round-off up to about 1e-9.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn grad_check_table(ipa: &GradientState, fd: &FdGradient) -> Vec<GradCheckRow> {
    ipa.grad
        .iter()
        .zip(&fd.values)
        .enumerate()
        .map(|(index, (&g, &f))| GradCheckRow {
            index,
            ipa: g,
            fd: f,
            rel_err: f.map(|f| relative_error(g, f)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SamplePoint;

    fn example_one() -> MissionConfig {
        MissionConfig::uniform(20.0, 4.0, 3.0, 36.0, 21, 0.01, 2.0).unwrap()
    }

    #[test]
    fn grad_s_sign_pattern() {
        // θ_1 (index 0, odd) after the first switch, moving left
        assert_eq!(grad_s(0, 5.0, -1.0, Some(1.0)), 2.0);
        // θ_2 (index 1, even) after the second switch, moving right
        assert_eq!(grad_s(1, 5.0, 1.0, Some(3.0)), 2.0);
        assert_eq!(grad_s(1, 2.0, 1.0, Some(3.0)), 0.0);
        assert_eq!(grad_s(0, 2.0, 1.0, None), 0.0);
    }

    #[test]
    fn unreached_location_has_zero_gradient() {
        let cfg = MissionConfig::new(
            20.0,
            2.0,
            3.0,
            8.0,
            vec![
                SamplePoint::new(3.0, 0.2, 1.0),
                SamplePoint::new(6.0, 0.2, 1.0),
            ],
        )
        .unwrap();
        // θ_2 = 1 is never reached: the agent turns at 7 and needs t = 13
        let sched = SwitchingSchedule::new(vec![7.0, 1.0], 20.0).unwrap();
        let (traj, g) = cost_and_gradient(&cfg, &sched).unwrap();
        assert!(g.activation[1].is_none());
        assert_eq!(g.grad[1], 0.0);
        let fd = finite_difference_gradient(&cfg, &sched, 1e-6, Execution::Sequential).unwrap();
        assert_eq!(fd.values[1], Some(0.0));
        assert!(traj.cost > 0.0);
    }

    #[test]
    fn gradient_matches_fd_on_example_one_seed() {
        let cfg = example_one();
        let sched = SwitchingSchedule::new(vec![12.0], 20.0).unwrap();
        let (_, g) = cost_and_gradient(&cfg, &sched).unwrap();
        let fd = finite_difference_gradient(&cfg, &sched, 1e-6 * cfg.length, Execution::Sequential)
            .unwrap();
        let f = fd.values[0].expect("component evaluated");
        assert!(
            relative_error(g.grad[0], f) < 1e-4,
            "{} vs {}",
            g.grad[0],
            f
        );
    }

    #[test]
    fn routes_agree_on_example_one() {
        let cfg = example_one();
        for theta in [
            vec![12.0],
            vec![17.81, 1.29],
            vec![12.0, 4.0, 16.0],
            vec![5.0, 5.0, 9.0],
        ] {
            let sched = SwitchingSchedule::new(theta, 20.0).unwrap();
            let traj = simulate_with(&cfg, sched.as_slice(), Recording::Full).unwrap();
            let closed = ipa_gradient(&cfg, &sched, &traj).unwrap();
            let general = general_form(&cfg, &sched, &traj).unwrap();
            for (a, b) in closed.grad.iter().zip(&general.grad) {
                assert!((a - b).abs() < CROSS_CHECK_TOL, "{a} vs {b}");
            }
            for (a, b) in general.grad.iter().zip(&general.grad_with_boundary_terms) {
                assert!((a - b).abs() < 1e-9);
            }
            assert!(cross_checked_gradient(&cfg, &sched, &traj).is_ok());
        }
    }

    #[test]
    fn boundary_component_is_skipped() {
        let cfg = example_one();
        let sched = SwitchingSchedule::new(vec![10.0, 10.0], 20.0).unwrap();
        let fd = finite_difference_gradient(&cfg, &sched, 1e-5, Execution::Parallel).unwrap();
        assert!(fd.skipped.iter().any(|&(_, r)| r == SkipReason::Infeasible));
    }

    #[test]
    fn mismatched_trajectory_rejected() {
        let cfg = example_one();
        let traj = simulate_with(&cfg, &[12.0], Recording::Full).unwrap();
        let other = SwitchingSchedule::new(vec![13.0], 20.0).unwrap();
        assert_eq!(ipa_gradient(&cfg, &other, &traj), Err(IpaError::Mismatch));
        let bare = simulate_with(&cfg, &[12.0], Recording::EventsOnly).unwrap();
        let same = SwitchingSchedule::new(vec![12.0], 20.0).unwrap();
        assert_eq!(
            ipa_gradient(&cfg, &same, &bare),
            Err(IpaError::MissingPieces)
        );
    }
}
