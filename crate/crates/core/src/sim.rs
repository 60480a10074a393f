//! Exact event-driven simulation of the agent / uncertainty hybrid system.
//!
//! Between two consecutive events the agent moves at constant velocity and
//! every point's uncertainty rate is affine in time, so each `R_i` is a
//! quadratic polynomial on a segment. Event times are therefore distances
//! (position guards) or closed-form quadratic roots (queue-empty guards);
//! no numerical integrator is involved anywhere.

use serde::Serialize;
use thiserror::Error;

use crate::model::{
    check_schedule, detection_probability, ConfigError, MissionConfig, SamplePoint, ScheduleError,
    SwitchingSchedule,
};

/// Hard cap on processed event groups, far above any realistic mission.
const MAX_EVENT_GROUPS: usize = 50_000_000;

/// Relative width inside which a quadratic discriminant counts as zero.
const GRAZING_REL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("non-finite simulation input: {0}")]
    NonFinite(&'static str),
    #[error("event budget exhausted at t = {0}")]
    EventBudget(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Direction {
    Right,
    Left,
}

impl Direction {
    pub fn of(velocity: f64) -> Self {
        if velocity < 0.0 {
            Direction::Left
        } else {
            Direction::Right
        }
    }
}

/// Where the agent sits relative to one sample point.
///
/// The five boundaries are `α - r`, `α - r(1 - A/B)`, `α`, `α + r(1 - A/B)`
/// and `α + r`; `EmptyDwell` overrides the positional label while the
/// point's queue is pinned at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Region {
    FarLeft,
    NearLeftRising,
    NearLeftFalling,
    NearRightFalling,
    NearRightRising,
    FarRight,
    EmptyDwell,
}

impl Region {
    fn from_index(k: u8) -> Self {
        match k {
            0 => Region::FarLeft,
            1 => Region::NearLeftRising,
            2 => Region::NearLeftFalling,
            3 => Region::NearRightFalling,
            4 => Region::NearRightRising,
            _ => Region::FarRight,
        }
    }
}

/// Coarse mode classes used by the gradient recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ModeSet {
    /// Queue empty and held there.
    Q1,
    /// Out of sensing range.
    Q2,
    /// In range, agent left of the point.
    Q3,
    /// In range, agent at or right of the point.
    Q4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PointMode {
    pub direction: Direction,
    pub region: Region,
}

impl PointMode {
    pub fn mode_set(&self) -> ModeSet {
        match self.region {
            Region::EmptyDwell => ModeSet::Q1,
            Region::FarLeft | Region::FarRight => ModeSet::Q2,
            Region::NearLeftRising | Region::NearLeftFalling => ModeSet::Q3,
            Region::NearRightFalling | Region::NearRightRising => ModeSet::Q4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Wall {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum EventKind {
    /// Agent reached switching location `j` (0-based) and reversed.
    SwitchingPoint(usize),
    QueueEmpty(usize),
    /// Agent crossed boundary `boundary` (0..5, left to right) of a point.
    RegionCross {
        point: usize,
        boundary: u8,
    },
    BoundaryReflect(Wall),
    /// A point's scheduled inflow rate changed.
    InflowChange(usize),
    /// Receding-horizon controller applied a new constant control.
    ControlUpdate,
    HorizonEnd,
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::SwitchingPoint(_) => "switching_point",
            EventKind::QueueEmpty(_) => "queue_empty",
            EventKind::RegionCross { .. } => "region_cross",
            EventKind::BoundaryReflect(_) => "boundary_reflect",
            EventKind::InflowChange(_) => "inflow_change",
            EventKind::ControlUpdate => "control_update",
            EventKind::HorizonEnd => "horizon_end",
        }
    }

    /// 1-based detail string for exports.
    pub fn detail(&self) -> String {
        match self {
            EventKind::SwitchingPoint(j) => format!("theta_{}", j + 1),
            EventKind::QueueEmpty(i) | EventKind::InflowChange(i) => format!("point_{}", i + 1),
            EventKind::RegionCross { point, boundary } => {
                format!("point_{}:boundary_{}", point + 1, boundary)
            }
            EventKind::BoundaryReflect(Wall::Lower) => "lower".into(),
            EventKind::BoundaryReflect(Wall::Upper) => "upper".into(),
            EventKind::ControlUpdate | EventKind::HorizonEnd => String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
}

/// One point's uncertainty over a segment:
/// `R(t_start + τ) = start + rate·τ + curvature·τ²/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointPiece {
    pub start: f64,
    pub rate: f64,
    pub curvature: f64,
    pub mode: PointMode,
}

impl PointPiece {
    pub fn value(&self, tau: f64) -> f64 {
        self.start + tau * (self.rate + 0.5 * self.curvature * tau)
    }

    pub fn rate_at(&self, tau: f64) -> f64 {
        self.rate + self.curvature * tau
    }

    /// `∫_0^tau R`.
    pub fn integral(&self, tau: f64) -> f64 {
        tau * (self.start + tau * (0.5 * self.rate + self.curvature * tau / 6.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub s_start: f64,
    pub velocity: f64,
    /// Events processed at `t_start`, as a range into `Trajectory::events`.
    pub events_from: usize,
    pub events_to: usize,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn position_at(&self, t: f64) -> f64 {
        self.s_start + self.velocity * (t - self.t_start)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub theta: Vec<f64>,
    pub point_count: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub segments: Vec<Segment>,
    /// Row-major `segments × points`; empty when pieces were not recorded.
    pub pieces: Vec<PointPiece>,
    pub events: Vec<Event>,
    /// `∫ Σ_i R_i dt` over the simulated window.
    pub integral: f64,
    /// Window-normalised cost `integral / (t_end - t_start)`.
    pub cost: f64,
    pub final_position: f64,
    pub final_uncertainty: Vec<f64>,
    /// The agent sat on `0` or `L` at some time after the start.
    pub touched_boundary: bool,
    /// Times of queue-empty events whose guard was hit tangentially.
    pub grazing: Vec<f64>,
}

impl Trajectory {
    pub fn pieces_of(&self, segment: usize) -> &[PointPiece] {
        let m = self.point_count;
        &self.pieces[segment * m..(segment + 1) * m]
    }

    pub fn has_pieces(&self) -> bool {
        !self.pieces.is_empty() || self.segments.is_empty()
    }

    pub fn events_of(&self, segment: usize) -> &[Event] {
        let seg = &self.segments[segment];
        &self.events[seg.events_from..seg.events_to]
    }

    pub fn reflected(&self) -> bool {
        self.events
            .iter()
            .any(|e| matches!(e.kind, EventKind::BoundaryReflect(_)))
    }

    /// The agent never reflected and never sat on `0` or `L` after the start.
    pub fn satisfies_interior_condition(&self) -> bool {
        !self.touched_boundary && !self.reflected()
    }

    fn locate(&self, t: f64) -> usize {
        let idx = self.segments.partition_point(|s| s.t_end < t);
        idx.min(self.segments.len().saturating_sub(1))
    }

    pub fn position_at(&self, t: f64) -> f64 {
        if self.segments.is_empty() {
            return self.final_position;
        }
        let seg = &self.segments[self.locate(t)];
        seg.position_at(t.clamp(seg.t_start, seg.t_end))
    }

    /// Agent position and all uncertainties at time `t`.
    pub fn state_at(&self, t: f64) -> (f64, Vec<f64>) {
        if self.segments.is_empty() {
            return (self.final_position, self.final_uncertainty.clone());
        }
        let k = self.locate(t);
        let seg = &self.segments[k];
        let t = t.clamp(seg.t_start, seg.t_end);
        let tau = t - seg.t_start;
        let r = self
            .pieces_of(k)
            .iter()
            .map(|p| p.value(tau).max(0.0))
            .collect();
        (seg.position_at(t), r)
    }

    /// Event kinds in processing order; used to detect when a perturbation
    /// changes the discrete structure of the run.
    pub fn event_signature(&self) -> Vec<EventKind> {
        self.events.iter().map(|e| e.kind).collect()
    }
}

/// Critical agent positions for one point, left to right.
pub fn critical_positions(position: f64, inflow: f64, service: f64, range: f64) -> [f64; 5] {
    let inner = range * (1.0 - inflow / service);
    [
        position - range,
        position - inner,
        position,
        position + inner,
        position + range,
    ]
}

fn positional_index(crit: &[f64; 5], s: f64, dir: Direction, tol: f64) -> u8 {
    // A boundary the agent sits on belongs to the region it is entering.
    match dir {
        Direction::Right => crit.iter().filter(|&&c| c <= s + tol).count() as u8,
        Direction::Left => crit.iter().filter(|&&c| c < s - tol).count() as u8,
    }
}

fn is_falling(region_index: u8) -> bool {
    region_index == 2 || region_index == 3
}

/// Mode of one point for an agent at `s` moving with velocity sign `u`.
pub fn classify_mode(
    point: &SamplePoint,
    s: f64,
    u: f64,
    uncertainty: f64,
    config: &MissionConfig,
) -> PointMode {
    let crit = critical_positions(point.position, point.inflow, config.service, config.range);
    let direction = Direction::of(u);
    let k = positional_index(&crit, s, direction, 0.0);
    let region = if uncertainty == 0.0 && is_falling(k) {
        Region::EmptyDwell
    } else {
        Region::from_index(k)
    };
    PointMode { direction, region }
}

/// Exact cost `(1/T) ∫ Σ_i R_i dt` of a recorded trajectory.
pub fn cost(trajectory: &Trajectory) -> f64 {
    if trajectory.pieces.is_empty() && !trajectory.segments.is_empty() {
        return trajectory.cost;
    }
    let integral: f64 = trajectory
        .segments
        .iter()
        .enumerate()
        .map(|(k, seg)| {
            let d = seg.duration();
            trajectory
                .pieces_of(k)
                .iter()
                .map(|p| p.integral(d))
                .sum::<f64>()
        })
        .sum();
    integral / (trajectory.t_end - trajectory.t_start)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    /// Keep per-point polynomial pieces (needed for gradients and export).
    Full,
    /// Keep segments and events only.
    EventsOnly,
}

/// Simulates the full horizon under a switching schedule, starting at
/// `s(0) = 0` moving right.
pub fn simulate(
    config: &MissionConfig,
    schedule: &SwitchingSchedule,
) -> Result<Trajectory, SimError> {
    simulate_with(config, schedule.as_slice(), Recording::Full)
}

/// Like [`simulate`] but accepts a raw slice and a recording mode.
pub fn simulate_with(
    config: &MissionConfig,
    theta: &[f64],
    recording: Recording,
) -> Result<Trajectory, SimError> {
    config.validate()?;
    check_schedule(theta, config.length)?;
    let mut engine = Engine::new(
        config,
        Start {
            time: 0.0,
            end: config.horizon,
            position: 0.0,
            uncertainty: config.initial_uncertainty(),
            velocity: 1.0,
        },
        theta,
        false,
        recording,
    )?;
    engine.run()?;
    Ok(engine.finish())
}

/// Cost alone, without recording pieces.
pub fn simulate_cost(config: &MissionConfig, theta: &[f64]) -> Result<f64, SimError> {
    Ok(simulate_with(config, theta, Recording::EventsOnly)?.cost)
}

/// Initial state for a window simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Start {
    pub time: f64,
    pub end: f64,
    pub position: f64,
    pub uncertainty: Vec<f64>,
    pub velocity: f64,
}

/// Simulates `[start.time, start.end]` under a constant control, reflecting
/// off the mission boundaries. Time-varying inflow is honoured.
pub fn simulate_constant(
    config: &MissionConfig,
    start: Start,
    recording: Recording,
) -> Result<Trajectory, SimError> {
    if !start.velocity.is_finite() || !start.position.is_finite() {
        return Err(SimError::NonFinite("initial state"));
    }
    let mut engine = Engine::new(config, start, &[], true, recording)?;
    engine.run()?;
    Ok(engine.finish())
}

struct Engine<'a> {
    cfg: &'a MissionConfig,
    tol: f64,
    t_start: f64,
    t_end: f64,
    crit: Vec<[f64; 5]>,
    inflow: Vec<f64>,
    profile_next: Vec<usize>,
    honour_profile: bool,
    theta: &'a [f64],
    next_switch: usize,
    t: f64,
    s: f64,
    v: f64,
    r: Vec<f64>,
    snap: Vec<f64>,
    region: Vec<u8>,
    dwell: Vec<bool>,
    rate: Vec<f64>,
    curvature: Vec<f64>,
    recording: Recording,
    segments: Vec<Segment>,
    pieces: Vec<PointPiece>,
    events: Vec<Event>,
    pending_from: usize,
    integral: f64,
    touched: bool,
    grazing: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(
        cfg: &'a MissionConfig,
        start: Start,
        theta: &'a [f64],
        honour_profile: bool,
        recording: Recording,
    ) -> Result<Self, SimError> {
        let m = cfg.len();
        if start.uncertainty.len() != m {
            return Err(SimError::NonFinite("uncertainty vector length"));
        }
        if start.uncertainty.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(SimError::NonFinite("initial uncertainty"));
        }
        if !(start.end.is_finite() && start.time.is_finite()) || start.end < start.time {
            return Err(SimError::NonFinite("time window"));
        }
        let tol = 1e-12 * cfg.horizon.max(1.0);
        let mut profile_next = vec![0; m];
        let inflow: Vec<f64> = cfg
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if honour_profile {
                    profile_next[i] = p.inflow_changes.partition_point(|c| c.time <= start.time);
                    p.inflow_at(start.time)
                } else {
                    p.inflow
                }
            })
            .collect();
        let crit = cfg
            .points
            .iter()
            .zip(&inflow)
            .map(|(p, &a)| critical_positions(p.position, a, cfg.service, cfg.range))
            .collect();
        let snap = start
            .uncertainty
            .iter()
            .zip(&cfg.points)
            .map(|(_, p)| 1e-12 * p.initial.max(1.0))
            .collect();
        Ok(Self {
            cfg,
            tol,
            t_start: start.time,
            t_end: start.end,
            crit,
            inflow,
            profile_next,
            honour_profile,
            theta,
            next_switch: 0,
            t: start.time,
            s: start.position.clamp(0.0, cfg.length),
            v: start.velocity,
            r: start.uncertainty,
            snap,
            region: vec![0; m],
            dwell: vec![false; m],
            rate: vec![0.0; m],
            curvature: vec![0.0; m],
            recording,
            segments: Vec::new(),
            pieces: Vec::new(),
            events: Vec::new(),
            pending_from: 0,
            integral: 0.0,
            touched: false,
            grazing: Vec::new(),
        })
    }

    fn direction(&self) -> Direction {
        Direction::of(self.v)
    }

    fn classify_all(&mut self, log: bool) {
        let dir = self.direction();
        for i in 0..self.r.len() {
            let k = positional_index(&self.crit[i], self.s, dir, self.tol);
            if log && k != self.region[i] {
                let boundary = if k > self.region[i] { k - 1 } else { k };
                self.push(EventKind::RegionCross { point: i, boundary });
            }
            self.region[i] = k;
        }
    }

    fn update_dwell(&mut self) {
        for i in 0..self.r.len() {
            self.dwell[i] = self.r[i] == 0.0 && is_falling(self.region[i]);
        }
    }

    fn push(&mut self, kind: EventKind) {
        self.events.push(Event { time: self.t, kind });
    }

    fn apply_switches_and_walls(&mut self) {
        let mut changed = false;
        while self.next_switch < self.theta.len()
            && (self.theta[self.next_switch] - self.s).abs() <= self.tol
        {
            self.s = self.theta[self.next_switch];
            self.v = -self.v;
            self.push(EventKind::SwitchingPoint(self.next_switch));
            self.next_switch += 1;
            changed = true;
        }
        let len = self.cfg.length;
        if self.v > 0.0 && self.s >= len - self.tol {
            self.s = len;
            self.v = -self.v;
            self.push(EventKind::BoundaryReflect(Wall::Upper));
            changed = true;
        } else if self.v < 0.0 && self.s <= self.tol {
            self.s = 0.0;
            self.v = -self.v;
            self.push(EventKind::BoundaryReflect(Wall::Lower));
            changed = true;
        }
        if changed {
            self.classify_all(false);
        }
    }

    fn prepare_segment(&mut self) {
        let b = self.cfg.service;
        let slope = b / self.cfg.range * self.v;
        for i in 0..self.r.len() {
            if self.dwell[i] {
                self.rate[i] = 0.0;
                self.curvature[i] = 0.0;
                continue;
            }
            let p = detection_probability(self.cfg.points[i].position, self.s, self.cfg.range);
            self.rate[i] = match self.region[i] {
                0 | 5 => self.inflow[i],
                _ => self.inflow[i] - b * p,
            };
            self.curvature[i] = match self.region[i] {
                1 | 2 => -slope,
                3 | 4 => slope,
                _ => 0.0,
            };
        }
    }

    /// Smallest positive root of `r + a τ + b τ²/2` and whether it is tangential.
    fn empty_time(r: f64, a: f64, b: f64) -> Option<(f64, bool)> {
        if r <= 0.0 {
            return None;
        }
        let half = 0.5 * b;
        if half.abs() <= f64::EPSILON * a.abs().max(1e-300) {
            return (a < 0.0).then(|| (-r / a, false));
        }
        let disc = a * a - 4.0 * half * r;
        let scale = (a * a).max((4.0 * half * r).abs());
        if disc < 0.0 {
            if disc > -GRAZING_REL * scale {
                let vertex = -a / b;
                return (vertex > 0.0).then_some((vertex, true));
            }
            return None;
        }
        let grazing = disc <= GRAZING_REL * scale;
        let sq = disc.sqrt();
        let q = -0.5 * (a + a.signum() * sq);
        let mut best: Option<f64> = None;
        for root in [q / half, if q != 0.0 { r / q } else { f64::NAN }] {
            if root.is_finite() && root > 0.0 {
                best = Some(best.map_or(root, |b: f64| b.min(root)));
            }
        }
        best.map(|t| (t, grazing))
    }

    fn run(&mut self) -> Result<(), SimError> {
        self.classify_all(false);
        self.apply_switches_and_walls();
        self.update_dwell();
        self.check_touch();

        let m = self.r.len();
        let mut empties: Vec<(usize, f64, bool)> = Vec::new();
        for _ in 0..MAX_EVENT_GROUPS {
            let remaining = self.t_end - self.t;
            if remaining <= self.tol {
                self.t = self.t_end;
                self.push(EventKind::HorizonEnd);
                return Ok(());
            }
            self.prepare_segment();

            // position guards
            let speed = self.v.abs();
            let mut target: Option<f64> = None;
            if speed > 0.0 {
                let ahead = |c: f64| {
                    if self.v > 0.0 {
                        c - self.s
                    } else {
                        self.s - c
                    }
                };
                let mut best = f64::INFINITY;
                let mut consider = |c: f64| {
                    let d = ahead(c);
                    if d > self.tol && d < best {
                        best = d;
                        target = Some(c);
                    }
                };
                for c in self.crit.iter().flatten() {
                    consider(*c);
                }
                if let Some(&th) = self.theta.get(self.next_switch) {
                    consider(th);
                }
                consider(if self.v > 0.0 { self.cfg.length } else { 0.0 });
            }
            let position_dt = target.map_or(f64::INFINITY, |c| (c - self.s).abs() / speed);

            // queue-empty guards
            empties.clear();
            let mut empty_dt = f64::INFINITY;
            for i in 0..m {
                if self.dwell[i] {
                    continue;
                }
                if let Some((tau, grazing)) =
                    Self::empty_time(self.r[i], self.rate[i], self.curvature[i])
                {
                    empties.push((i, tau, grazing));
                    empty_dt = empty_dt.min(tau);
                }
            }

            // inflow schedule
            let mut profile_dt = f64::INFINITY;
            if self.honour_profile {
                for (i, p) in self.cfg.points.iter().enumerate() {
                    if let Some(c) = p.inflow_changes.get(self.profile_next[i]) {
                        profile_dt = profile_dt.min(c.time - self.t);
                    }
                }
            }

            let dt = position_dt
                .min(empty_dt)
                .min(profile_dt)
                .min(remaining)
                .max(0.0);
            let at_horizon = remaining <= dt + self.tol;
            let dt = if at_horizon { remaining } else { dt };

            // record the segment that ends here
            let events_to = self.events.len();
            self.segments.push(Segment {
                t_start: self.t,
                t_end: self.t + dt,
                s_start: self.s,
                velocity: self.v,
                events_from: self.pending_from,
                events_to,
            });
            self.pending_from = events_to;
            let dir = self.direction();
            for i in 0..m {
                let piece = PointPiece {
                    start: self.r[i],
                    rate: self.rate[i],
                    curvature: self.curvature[i],
                    mode: PointMode {
                        direction: dir,
                        region: if self.dwell[i] {
                            Region::EmptyDwell
                        } else {
                            Region::from_index(self.region[i])
                        },
                    },
                };
                self.integral += piece.integral(dt);
                if self.recording == Recording::Full {
                    self.pieces.push(piece);
                }
                if !self.dwell[i] {
                    self.r[i] = piece.value(dt);
                }
            }

            // advance
            self.t = if at_horizon { self.t_end } else { self.t + dt };
            self.s = match target {
                Some(c) if position_dt <= dt + self.tol => c,
                _ => self.s + self.v * dt,
            }
            .clamp(0.0, self.cfg.length);

            // queue-empty events first
            for &(i, tau, grazing) in &empties {
                if tau <= dt + self.tol {
                    self.r[i] = 0.0;
                    self.events.push(Event {
                        time: self.t,
                        kind: EventKind::QueueEmpty(i),
                    });
                    if grazing {
                        self.grazing.push(self.t);
                    }
                }
            }
            for i in 0..m {
                if self.r[i] < 0.0 {
                    self.r[i] = 0.0;
                }
                let falling = self.rate[i] + self.curvature[i] * dt < 0.0;
                if self.r[i] > 0.0 && self.r[i] < self.snap[i] && falling && !self.dwell[i] {
                    self.r[i] = 0.0;
                    self.push(EventKind::QueueEmpty(i));
                }
            }

            if self.honour_profile {
                for i in 0..m {
                    let point = &self.cfg.points[i];
                    let mut changed = false;
                    while let Some(c) = point.inflow_changes.get(self.profile_next[i]) {
                        if c.time > self.t + self.tol {
                            break;
                        }
                        self.inflow[i] = c.rate;
                        self.profile_next[i] += 1;
                        changed = true;
                    }
                    if changed {
                        self.crit[i] = critical_positions(
                            point.position,
                            self.inflow[i],
                            self.cfg.service,
                            self.cfg.range,
                        );
                        self.push(EventKind::InflowChange(i));
                    }
                }
            }

            self.classify_all(true);
            self.apply_switches_and_walls();
            self.update_dwell();
            self.check_touch();
        }
        Err(SimError::EventBudget(self.t))
    }

    fn check_touch(&mut self) {
        if self.t > self.t_start && (self.s <= self.tol || self.s >= self.cfg.length - self.tol) {
            self.touched = true;
        }
    }

    fn finish(self) -> Trajectory {
        let window = self.t_end - self.t_start;
        Trajectory {
            theta: self.theta.to_vec(),
            point_count: self.r.len(),
            t_start: self.t_start,
            t_end: self.t_end,
            segments: self.segments,
            pieces: self.pieces,
            events: self.events,
            integral: self.integral,
            cost: if window > 0.0 {
                self.integral / window
            } else {
                0.0
            },
            final_position: self.s,
            final_uncertainty: self.r,
            touched_boundary: self.touched,
            grazing: self.grazing,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_one() -> MissionConfig {
        MissionConfig::uniform(20.0, 4.0, 3.0, 36.0, 21, 0.01, 2.0).unwrap()
    }

    fn single(position: f64, horizon: f64) -> MissionConfig {
        MissionConfig::new(
            20.0,
            4.0,
            3.0,
            horizon,
            vec![SamplePoint::new(position, 0.05, 1.5)],
        )
        .unwrap()
    }

    #[test]
    fn out_of_range_point_grows_linearly() {
        let cfg = single(10.0, 4.0);
        let traj = simulate_with(&cfg, &[2.0], Recording::Full).unwrap();
        let expected = 1.5 + 0.05 * 4.0 / 2.0;
        assert!((traj.cost - expected).abs() < 1e-12);
        assert!((cost(&traj) - expected).abs() < 1e-12);
        // agent never reaches α - r = 6
        assert!(traj.events.iter().all(|e| !matches!(
            e.kind,
            EventKind::QueueEmpty(_) | EventKind::RegionCross { .. }
        )));
    }

    #[test]
    fn constant_uncertainty_cost() {
        // uncertainty held at zero everywhere: agent parked on the point
        let cfg = MissionConfig::new(20.0, 4.0, 3.0, 10.0, vec![SamplePoint::new(0.0, 0.1, 0.0)])
            .unwrap();
        let traj = simulate_constant(
            &cfg,
            Start {
                time: 0.0,
                end: 10.0,
                position: 0.0,
                uncertainty: vec![0.0],
                velocity: 0.0,
            },
            Recording::Full,
        )
        .unwrap();
        assert_eq!(traj.cost, 0.0);
        assert_eq!(traj.pieces[0].mode.region, Region::EmptyDwell);
    }

    #[test]
    fn linear_queue_empty_time() {
        // rate -d constant: agent parked on the point, R = c - (B - A) t
        let cfg = MissionConfig::new(20.0, 4.0, 3.0, 10.0, vec![SamplePoint::new(5.0, 1.0, 4.0)])
            .unwrap();
        let traj = simulate_constant(
            &cfg,
            Start {
                time: 0.0,
                end: 10.0,
                position: 5.0,
                uncertainty: vec![4.0],
                velocity: 0.0,
            },
            Recording::Full,
        )
        .unwrap();
        let empty = traj
            .events
            .iter()
            .find(|e| e.kind == EventKind::QueueEmpty(0))
            .unwrap();
        assert!((empty.time - 2.0).abs() < 1e-14);
        // ∫ = 4*2/2 over 10 time units
        assert!((traj.cost - 0.4).abs() < 1e-14);
    }

    #[test]
    fn classify_examples() {
        let cfg = example_one();
        let p = &cfg.points[10];
        let far = classify_mode(p, 5.0, 1.0, 2.0, &cfg);
        assert_eq!(far.region, Region::FarLeft);
        assert_eq!(far.mode_set(), ModeSet::Q2);
        let at = classify_mode(p, 10.0, 1.0, 2.0, &cfg);
        assert_eq!(at.region, Region::NearRightFalling);
        let at_left = classify_mode(p, 10.0, -1.0, 2.0, &cfg);
        assert_eq!(at_left.region, Region::NearLeftFalling);
        let dwell = classify_mode(p, 9.0, 1.0, 0.0, &cfg);
        assert_eq!(dwell.region, Region::EmptyDwell);
        assert_eq!(dwell.mode_set(), ModeSet::Q1);
        // empty but in the rising band: the queue refills
        let rising = classify_mode(p, 6.005, 1.0, 0.0, &cfg);
        assert_eq!(rising.region, Region::NearLeftRising);
        // boundary α - r while moving right belongs to the band being entered
        assert_eq!(
            classify_mode(p, 6.0, 1.0, 1.0, &cfg).region,
            Region::NearLeftRising
        );
        assert_eq!(
            classify_mode(p, 6.0, -1.0, 1.0, &cfg).region,
            Region::FarLeft
        );
        assert_eq!(
            classify_mode(p, 14.5, 1.0, 1.0, &cfg).region,
            Region::FarRight
        );
    }

    #[test]
    fn zero_length_dwell_logs_both_switches() {
        let cfg = example_one();
        let traj = simulate_with(&cfg, &[10.0, 10.0], Recording::Full).unwrap();
        let straight = simulate_with(&cfg, &[], Recording::Full).unwrap();
        let switches: Vec<_> = traj
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::SwitchingPoint(_)))
            .collect();
        assert_eq!(switches.len(), 2);
        assert_eq!(switches[0].time, switches[1].time);
        assert!((traj.cost - straight.cost).abs() < 1e-12);
    }

    #[test]
    fn reflection_beyond_last_switch() {
        let cfg = example_one();
        let traj = simulate_with(&cfg, &[], Recording::Full).unwrap();
        assert!(traj.reflected());
        assert!(!traj.satisfies_interior_condition());
        // reflect at L = 20 at t = 20, then move left 16 units
        assert!((traj.final_position - 4.0).abs() < 1e-9);
    }

    #[test]
    fn switch_at_upper_wall_is_not_a_reflection() {
        let cfg = example_one();
        let traj = simulate_with(&cfg, &[20.0], Recording::Full).unwrap();
        assert!(!traj.reflected());
        assert!(traj.touched_boundary);
    }

    #[test]
    fn example_one_seed_cost() {
        // forward Euler with dt = 1e-3 gives 17.16984
        let traj = simulate_with(&example_one(), &[12.0], Recording::Full).unwrap();
        assert!((traj.cost - 17.1698).abs() < 1e-3, "J = {}", traj.cost);
        let opt = simulate_with(&example_one(), &[17.81, 1.29], Recording::Full).unwrap();
        assert!((opt.cost - 10.24).abs() < 0.01, "J = {}", opt.cost);
    }

    #[test]
    fn queue_roots() {
        assert_eq!(Engine::empty_time(1.0, 0.5, 0.0), None);
        let (t, g) = Engine::empty_time(3.0, -1.5, 0.0).unwrap();
        assert!((t - 2.0).abs() < 1e-15 && !g);
        // (τ - 1)^2 touches zero tangentially
        let (t, g) = Engine::empty_time(1.0, -2.0, 2.0).unwrap();
        assert!((t - 1.0).abs() < 1e-9 && g);
        // 2 - 3τ + τ² = (τ-1)(τ-2)
        let (t, _) = Engine::empty_time(2.0, -3.0, 2.0).unwrap();
        assert!((t - 1.0).abs() < 1e-14);
    }
}
