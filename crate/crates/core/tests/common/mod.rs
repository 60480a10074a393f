#![allow(dead_code)]

use patrol_core::sim::Trajectory;
use patrol_core::{MissionConfig, SamplePoint, SwitchingSchedule};
use rand::Rng;

pub fn example_one() -> MissionConfig {
    MissionConfig::uniform(20.0, 4.0, 3.0, 36.0, 21, 0.01, 2.0).unwrap()
}

pub fn example_two() -> MissionConfig {
    MissionConfig::uniform(100.0, 4.0, 3.0, 980.0, 101, 0.01, 2.0).unwrap()
}

/// A small random mission: up to six points on a short segment.
pub fn random_config<R: Rng>(rng: &mut R) -> MissionConfig {
    let length = rng.gen_range(5.0..15.0);
    let range = rng.gen_range(1.0..4.0);
    let service = rng.gen_range(1.0..4.0);
    let horizon = rng.gen_range(5.0..20.0);
    let m = rng.gen_range(1..=6);
    let mut pos: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..length)).collect();
    pos.sort_by(f64::total_cmp);
    let points = pos
        .into_iter()
        .map(|a| {
            SamplePoint::new(
                a,
                rng.gen_range(0.01..0.5 * service),
                rng.gen_range(0.0..3.0),
            )
        })
        .collect();
    MissionConfig::new(length, range, service, horizon, points).unwrap()
}

/// A random feasible schedule with `0..=max_n` locations.
pub fn random_schedule<R: Rng>(
    rng: &mut R,
    config: &MissionConfig,
    max_n: usize,
) -> SwitchingSchedule {
    let n = rng.gen_range(0..=max_n);
    let l = config.length;
    let draw: Vec<f64> = (0..n)
        .map(|j| {
            if j % 2 == 0 {
                rng.gen_range(0.4 * l..l)
            } else {
                rng.gen_range(0.0..0.6 * l)
            }
        })
        .collect();
    SwitchingSchedule::project(&draw, l)
}

/// Forward-Euler reference for the agent / uncertainty system.
///
/// The agent starts at 0 moving right, reverses at each switching location
/// in turn and reflects off the walls once the schedule is exhausted.
/// Uncertainties use `R += (A - B p(s)) dt` clipped at zero; the cost is a
/// trapezoidal integral of `Σ R`.
pub struct EulerRun {
    pub cost: f64,
    pub final_position: f64,
    pub final_uncertainty: Vec<f64>,
}

pub fn euler(config: &MissionConfig, theta: &[f64], dt: f64) -> EulerRun {
    let l = config.length;
    let steps = (config.horizon / dt).round() as usize;
    let dt = config.horizon / steps as f64;
    let mut s = 0.0f64;
    let mut u = 1.0f64;
    let mut k = 0;
    let mut r: Vec<f64> = config.points.iter().map(|p| p.initial).collect();
    let total = |r: &[f64]| r.iter().sum::<f64>();
    let mut integral = 0.0;
    let mut prev = total(&r);
    let prob = |s: f64, a: f64| {
        let d = (s - a).abs();
        if d <= config.range {
            1.0 - d / config.range
        } else {
            0.0
        }
    };
    for _ in 0..steps {
        // uncertainty at the midpoint position of the step
        let mid = {
            let mut m = s + 0.5 * u * dt;
            if m > l {
                m = 2.0 * l - m;
            }
            if m < 0.0 {
                m = -m;
            }
            m
        };
        for (i, p) in config.points.iter().enumerate() {
            let rate = p.inflow - config.service * prob(mid, p.position);
            r[i] = (r[i] + rate * dt).max(0.0);
        }
        s += u * dt;
        loop {
            match theta.get(k) {
                Some(&th) if (u > 0.0 && s >= th) || (u < 0.0 && s <= th) => {
                    s = 2.0 * th - s;
                    u = -u;
                    k += 1;
                }
                Some(_) => break,
                None => {
                    if s > l {
                        s = 2.0 * l - s;
                        u = -1.0;
                    } else if s < 0.0 {
                        s = -s;
                        u = 1.0;
                    }
                    break;
                }
            }
        }
        let now = total(&r);
        integral += 0.5 * (prev + now) * dt;
        prev = now;
    }
    EulerRun {
        cost: integral / config.horizon,
        final_position: s,
        final_uncertainty: r,
    }
}

const TOL: f64 = 1e-9;

/// `R ≥ 0`, `s ∈ [0, L]`, slope `±1` (or at most 1 when `unit_speed` is off),
/// contiguous segments and time-ordered events.
pub fn check_trajectory(
    cfg: &MissionConfig,
    traj: &Trajectory,
    unit_speed: bool,
) -> Result<(), String> {
    let l = cfg.length;
    let mut t = traj.t_start;
    for (k, seg) in traj.segments.iter().enumerate() {
        if (seg.t_start - t).abs() > TOL || seg.t_end < seg.t_start {
            return Err(format!("segment {k} does not continue at {t}"));
        }
        t = seg.t_end;
        for s in [seg.s_start, seg.position_at(seg.t_end)] {
            if !(-TOL..=l + TOL).contains(&s) {
                return Err(format!("position {s} outside [0, {l}]"));
            }
        }
        let speed = seg.velocity.abs();
        if (unit_speed && speed != 1.0) || speed > 1.0 {
            return Err(format!("segment {k} has speed {speed}"));
        }
        let d = seg.duration();
        for (i, p) in traj.pieces_of(k).iter().enumerate() {
            let mut lowest = p.value(0.0).min(p.value(d));
            if p.curvature > 0.0 {
                let vertex = -p.rate / p.curvature;
                if vertex > 0.0 && vertex < d {
                    lowest = lowest.min(p.value(vertex));
                }
            }
            if lowest < -TOL {
                return Err(format!("R_{} dips to {lowest} in segment {k}", i + 1));
            }
        }
    }
    if (t - traj.t_end).abs() > TOL {
        return Err(format!("segments end at {t}, not {}", traj.t_end));
    }
    if !traj.events.windows(2).all(|w| w[1].time >= w[0].time) {
        return Err("events out of order".into());
    }
    Ok(())
}
