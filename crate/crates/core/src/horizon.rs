//! Online receding-horizon control: at each decision time pick the constant
//! control that minimises the uncertainty integral over the planning window,
//! apply it for the action interval, repeat.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConfigError, MissionConfig};
use crate::par::{self, Execution};
use crate::sim::{simulate_constant, Event, EventKind, Recording, SimError, Start, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HorizonError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid receding-horizon settings: {0}")]
    Settings(&'static str),
    #[error("invalid controller state: {0}")]
    State(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Search {
    /// `u ∈ {-1, +1}`.
    Binary,
    /// `u ∈ [-1, 1]`, grid search refined by golden section.
    #[default]
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhSettings {
    /// Planning window `H`.
    pub planning: f64,
    /// Action interval `h`.
    pub action: f64,
    pub search: Search,
    pub grid_points: usize,
    #[serde(default)]
    pub execution: Execution,
}

pub const DEFAULT_GRID_POINTS: usize = 41;
/// Width at which golden-section refinement stops.
pub const REFINE_WIDTH: f64 = 1e-4;

impl RhSettings {
    /// `H = 2r` (clipped to `T`) and `h = H / 2`.
    pub fn defaults(config: &MissionConfig) -> Self {
        let planning = (2.0 * config.range).min(config.horizon);
        Self {
            planning,
            action: 0.5 * planning,
            search: Search::default(),
            grid_points: DEFAULT_GRID_POINTS,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self, config: &MissionConfig) -> Result<(), HorizonError> {
        if !(self.action > 0.0 && self.action.is_finite()) {
            return Err(HorizonError::Settings("action interval must be positive"));
        }
        if !(self.planning >= self.action) {
            return Err(HorizonError::Settings(
                "planning window must be at least the action interval",
            ));
        }
        if !(self.planning <= config.horizon) {
            return Err(HorizonError::Settings(
                "planning window must not exceed the mission horizon",
            ));
        }
        if self.search == Search::Continuous && self.grid_points < 2 {
            return Err(HorizonError::Settings(
                "continuous search needs at least 2 grid points",
            ));
        }
        Ok(())
    }
}

/// Controller state at a decision time.
#[derive(Debug, Clone, PartialEq)]
pub struct RhState {
    pub time: f64,
    pub position: f64,
    pub uncertainty: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhDecision {
    pub control: f64,
    /// `∫ Σ_i R_i` over the (clipped) planning window under `control`.
    pub window_integral: f64,
    pub evaluations: usize,
}

/// `∫_t^{min(t+H, T)} Σ_i R_i dτ` under the constant control `u`.
pub fn window_integral(
    config: &MissionConfig,
    state: &RhState,
    planning: f64,
    control: f64,
) -> Result<f64, SimError> {
    let end = (state.time + planning).min(config.horizon);
    let traj = simulate_constant(
        config,
        Start {
            time: state.time,
            end,
            position: state.position,
            uncertainty: state.uncertainty.clone(),
            velocity: control,
        },
        Recording::EventsOnly,
    )?;
    Ok(traj.integral)
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    u: f64,
    value: f64,
}

impl Candidate {
    /// Lower value wins; near-ties go to the larger control.
    fn beats(&self, other: &Candidate) -> bool {
        let tol = 1e-9 * self.value.abs().max(other.value.abs()).max(1.0);
        if (self.value - other.value).abs() <= tol {
            self.u > other.u
        } else {
            self.value < other.value
        }
    }
}

fn best_of(cands: &[Candidate]) -> Candidate {
    let mut best = cands[0];
    for c in &cands[1..] {
        if c.beats(&best) {
            best = *c;
        }
    }
    best
}

fn check_state(config: &MissionConfig, state: &RhState) -> Result<(), HorizonError> {
    if !(state.position >= 0.0 && state.position <= config.length) {
        return Err(HorizonError::State("position outside the mission space"));
    }
    if state.uncertainty.len() != config.len() {
        return Err(HorizonError::State(
            "uncertainty length differs from point count",
        ));
    }
    if state
        .uncertainty
        .iter()
        .any(|r| !(*r >= 0.0) || !r.is_finite())
    {
        return Err(HorizonError::State(
            "uncertainty must be finite and non-negative",
        ));
    }
    if !(state.time >= 0.0 && state.time < config.horizon) {
        return Err(HorizonError::State("decision time outside [0, T)"));
    }
    Ok(())
}

/// Chooses the constant control for the window starting at `state`.
pub fn rh_step(
    config: &MissionConfig,
    state: &RhState,
    settings: &RhSettings,
) -> Result<RhDecision, HorizonError> {
    config.validate()?;
    settings.validate(config)?;
    check_state(config, state)?;
    let eval = |u: f64| -> Result<Candidate, SimError> {
        Ok(Candidate {
            u,
            value: window_integral(config, state, settings.planning, u)?,
        })
    };
    let grid: Vec<f64> = match settings.search {
        Search::Binary => vec![1.0, -1.0],
        Search::Continuous => {
            let n = settings.grid_points;
            (0..n)
                .map(|k| {
                    if k + 1 == n {
                        1.0
                    } else {
                        -1.0 + 2.0 * k as f64 / (n - 1) as f64
                    }
                })
                .collect()
        }
    };
    let cands = par::map(settings.execution, &grid, |&u| eval(u))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut evaluations = cands.len();
    let mut best = best_of(&cands);

    if settings.search == Search::Continuous {
        let k = grid.iter().position(|&u| u == best.u).unwrap_or(0);
        let lo = grid[k.saturating_sub(1)];
        let hi = grid[(k + 1).min(grid.len() - 1)];
        let (refined, n) = golden_section(lo, hi, REFINE_WIDTH, |u| eval(u).map(|c| c.value))?;
        evaluations += n;
        let refined = eval(refined)?;
        evaluations += 1;
        if refined.beats(&best) {
            best = refined;
        }
    }
    Ok(RhDecision {
        control: best.u,
        window_integral: best.value,
        evaluations,
    })
}

/// Golden-section search for a minimiser of `f` on `[a, b]`; returns the
/// bracket midpoint and the number of evaluations.
fn golden_section<F, E>(mut a: f64, mut b: f64, width: f64, f: F) -> Result<(f64, usize), E>
where
    F: Fn(f64) -> Result<f64, E>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut n = 2;
    while b - a > width {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
        n += 1;
    }
    Ok((0.5 * (a + b), n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhRun {
    pub trajectory: Trajectory,
    pub cost: f64,
    /// `(decision time, control)` for every window.
    pub controls: Vec<(f64, f64)>,
}

/// Runs the closed loop from `s(0) = 0` over `[0, T]`.
pub fn rh_run(config: &MissionConfig, settings: &RhSettings) -> Result<RhRun, HorizonError> {
    config.validate()?;
    settings.validate(config)?;
    let m = config.len();
    let tol = 1e-12 * config.horizon.max(1.0);
    let mut state = RhState {
        time: 0.0,
        position: 0.0,
        uncertainty: config.initial_uncertainty(),
    };
    let mut out = Trajectory {
        theta: Vec::new(),
        point_count: m,
        t_start: 0.0,
        t_end: config.horizon,
        segments: Vec::new(),
        pieces: Vec::new(),
        events: Vec::new(),
        integral: 0.0,
        cost: 0.0,
        final_position: 0.0,
        final_uncertainty: state.uncertainty.clone(),
        touched_boundary: false,
        grazing: Vec::new(),
    };
    let mut controls = Vec::new();

    while config.horizon - state.time > tol {
        let decision = rh_step(config, &state, settings)?;
        controls.push((state.time, decision.control));
        let end = (state.time + settings.action).min(config.horizon);
        let end = if config.horizon - end <= tol {
            config.horizon
        } else {
            end
        };
        let piece = simulate_constant(
            config,
            Start {
                time: state.time,
                end,
                position: state.position,
                uncertainty: state.uncertainty.clone(),
                velocity: decision.control,
            },
            Recording::Full,
        )?;
        append(&mut out, piece, state.time);
        state = RhState {
            time: end,
            position: out.final_position,
            uncertainty: out.final_uncertainty.clone(),
        };
    }
    out.events.push(Event {
        time: config.horizon,
        kind: EventKind::HorizonEnd,
    });
    out.cost = out.integral / config.horizon;
    Ok(RhRun {
        cost: out.cost,
        trajectory: out,
        controls,
    })
}

fn append(out: &mut Trajectory, piece: Trajectory, time: f64) {
    let base = out.events.len();
    out.events.push(Event {
        time,
        kind: EventKind::ControlUpdate,
    });
    // the window's own trailing horizon marker is dropped
    let body: Vec<Event> = piece
        .events
        .iter()
        .copied()
        .filter(|e| e.kind != EventKind::HorizonEnd)
        .collect();
    let offset = base + 1;
    for (k, mut seg) in piece.segments.iter().copied().enumerate() {
        seg.events_from = if k == 0 {
            base
        } else {
            seg.events_from + offset
        };
        seg.events_to = (seg.events_to + offset).min(offset + body.len());
        out.segments.push(seg);
    }
    out.events.extend(body);
    out.pieces.extend(piece.pieces);
    out.integral += piece.integral;
    out.final_position = piece.final_position;
    out.final_uncertainty = piece.final_uncertainty;
    out.touched_boundary |= piece.touched_boundary;
    out.grazing.extend(piece.grazing);
}
