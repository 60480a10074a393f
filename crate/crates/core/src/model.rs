//! Mission description, sensing model and the uncertainty-rate law.
//!
//! An agent patrols the segment `[0, L]` with unit maximum speed. Every
//! sample point carries an uncertainty value that behaves like a fluid
//! queue: it fills at the inflow rate `A` and drains at the service rate
//! `B * p(s)`, where `p` is the linear-decay detection probability of an
//! agent located at `s`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation failures for mission data. Each variant maps to a stable code
/// used by the CLI's machine-readable error output.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("field `{0}` must be finite")]
    NonFinite(&'static str),
    #[error("field `{0}` must be strictly positive")]
    NonPositive(&'static str),
    #[error("mission has no sample points")]
    EmptyPoints,
    #[error("sample point {index} at {position} lies outside [0, {length}]")]
    PositionOutOfRange {
        index: usize,
        position: f64,
        length: f64,
    },
    #[error("sample point positions must be nondecreasing (point {index})")]
    Unsorted { index: usize },
    #[error("sample point {index} has inflow {inflow}; require 0 < A < B = {service}")]
    InflowNotBelowService {
        index: usize,
        inflow: f64,
        service: f64,
    },
    #[error("sample point {index} has non-positive inflow {inflow}")]
    NonPositiveInflow { index: usize, inflow: f64 },
    #[error("sample point {index} has negative initial uncertainty {initial}")]
    NegativeInitial { index: usize, initial: f64 },
    #[error("sample point {index} has an invalid inflow profile: {reason}")]
    BadProfile { index: usize, reason: String },
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::NonFinite(_) => "non_finite",
            ConfigError::NonPositive(_) => "non_positive",
            ConfigError::EmptyPoints => "empty_points",
            ConfigError::PositionOutOfRange { .. } => "position_out_of_range",
            ConfigError::Unsorted { .. } => "unsorted_positions",
            ConfigError::InflowNotBelowService { .. } => "inflow_not_below_service",
            ConfigError::NonPositiveInflow { .. } => "non_positive_inflow",
            ConfigError::NegativeInitial { .. } => "negative_initial",
            ConfigError::BadProfile { .. } => "bad_inflow_profile",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("uncertainty must be nonnegative, got {0}")]
    NegativeUncertainty(f64),
    #[error("joint detection needs at least one agent")]
    NoAgents,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("switching location {index} = {value} is not finite")]
    NonFinite { index: usize, value: f64 },
    #[error("switching location {index} = {value} lies outside [0, {length}]")]
    OutOfBox {
        index: usize,
        value: f64,
        length: f64,
    },
    #[error("switching locations {prev} and {index} violate the alternating order")]
    OrderViolated { prev: usize, index: usize },
}

/// Piecewise-constant inflow override: from `time` onward the inflow is `rate`.
///
/// Only the receding-horizon controller reads this; the gradient machinery
/// assumes constant inflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflowChange {
    pub time: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    /// Location of the point in `[0, L]`.
    pub position: f64,
    /// Uncertainty inflow rate `A`.
    pub inflow: f64,
    /// Uncertainty at time zero.
    pub initial: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inflow_changes: Vec<InflowChange>,
}

impl SamplePoint {
    pub fn new(position: f64, inflow: f64, initial: f64) -> Self {
        Self {
            position,
            inflow,
            initial,
            inflow_changes: Vec::new(),
        }
    }

    /// Inflow in effect at time `t` when time-varying inflow is honoured.
    pub fn inflow_at(&self, t: f64) -> f64 {
        self.inflow_changes
            .iter()
            .take_while(|c| c.time <= t)
            .last()
            .map_or(self.inflow, |c| c.rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionConfig {
    /// Mission-space length `L`.
    pub length: f64,
    /// Sensing range `r`.
    pub range: f64,
    /// Maximum service rate `B`.
    pub service: f64,
    /// Time horizon `T`.
    pub horizon: f64,
    pub points: Vec<SamplePoint>,
}

impl MissionConfig {
    pub fn new(
        length: f64,
        range: f64,
        service: f64,
        horizon: f64,
        points: Vec<SamplePoint>,
    ) -> Result<Self, ConfigError> {
        let cfg = Self {
            length,
            range,
            service,
            horizon,
            points,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `count` points evenly spaced over `[0, L]`, both endpoints included.
    /// A single point is placed at the middle of the segment.
    pub fn uniform(
        length: f64,
        range: f64,
        service: f64,
        horizon: f64,
        count: usize,
        inflow: f64,
        initial: f64,
    ) -> Result<Self, ConfigError> {
        if count == 0 {
            return Err(ConfigError::EmptyPoints);
        }
        let points = (0..count)
            .map(|i| {
                let position = if count == 1 {
                    0.5 * length
                } else {
                    length * i as f64 / (count - 1) as f64
                };
                SamplePoint::new(position, inflow, initial)
            })
            .collect();
        Self::new(length, range, service, horizon, points)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("L", self.length),
            ("r", self.range),
            ("B", self.service),
            ("T", self.horizon),
        ] {
            if !v.is_finite() {
                return Err(ConfigError::NonFinite(name));
            }
            if v <= 0.0 {
                return Err(ConfigError::NonPositive(name));
            }
        }
        if self.points.is_empty() {
            return Err(ConfigError::EmptyPoints);
        }
        let mut prev = f64::NEG_INFINITY;
        for (index, p) in self.points.iter().enumerate() {
            if !p.position.is_finite() || !p.inflow.is_finite() || !p.initial.is_finite() {
                return Err(ConfigError::NonFinite("points"));
            }
            if p.position < 0.0 || p.position > self.length {
                return Err(ConfigError::PositionOutOfRange {
                    index,
                    position: p.position,
                    length: self.length,
                });
            }
            if p.position < prev {
                return Err(ConfigError::Unsorted { index });
            }
            prev = p.position;
            if p.inflow <= 0.0 {
                return Err(ConfigError::NonPositiveInflow {
                    index,
                    inflow: p.inflow,
                });
            }
            if p.inflow >= self.service {
                return Err(ConfigError::InflowNotBelowService {
                    index,
                    inflow: p.inflow,
                    service: self.service,
                });
            }
            if p.initial < 0.0 {
                return Err(ConfigError::NegativeInitial {
                    index,
                    initial: p.initial,
                });
            }
            let mut last = 0.0;
            for c in &p.inflow_changes {
                let reason = if !c.time.is_finite() || !c.rate.is_finite() {
                    Some("non-finite entry".to_string())
                } else if c.time <= last && !(last == 0.0 && c.time == 0.0) {
                    Some(format!("change times must increase (at t = {})", c.time))
                } else if c.rate <= 0.0 || c.rate >= self.service {
                    Some(format!("rate {} must satisfy 0 < A < B", c.rate))
                } else {
                    None
                };
                if let Some(reason) = reason {
                    return Err(ConfigError::BadProfile { index, reason });
                }
                last = c.time;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_inflow_changes(&self) -> bool {
        self.points.iter().any(|p| !p.inflow_changes.is_empty())
    }

    pub fn initial_uncertainty(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.initial).collect()
    }
}

/// Ordered switching locations `[θ_1, …, θ_N]`.
///
/// Odd-numbered locations (1-based) turn the agent from moving right to
/// moving left, even-numbered ones turn it back, so the sequence must
/// alternate: `θ_j <= θ_{j-1}` for even `j` and `θ_j >= θ_{j-1}` for odd `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SwitchingSchedule(Vec<f64>);

impl SwitchingSchedule {
    pub fn new(theta: Vec<f64>, length: f64) -> Result<Self, ScheduleError> {
        check_schedule(&theta, length)?;
        Ok(Self(theta))
    }

    /// Builds a schedule from values listed with all odd-numbered locations
    /// first and all even-numbered ones after, e.g. `[a1, a3, a5, b2, b4]`.
    pub fn from_grouped(grouped: &[f64], length: f64) -> Result<Self, ScheduleError> {
        let odd = grouped.len().div_ceil(2);
        let (hi, lo) = grouped.split_at(odd);
        let mut theta = Vec::with_capacity(grouped.len());
        for (k, &v_hi) in hi.iter().enumerate() {
            theta.push(v_hi);
            if let Some(&v) = lo.get(k) {
                theta.push(v);
            }
        }
        Self::new(theta, length)
    }

    /// Nearest feasible schedule under the forward-sweep rule: each location
    /// is clipped against its predecessor by parity, then clamped to `[0, L]`.
    pub fn project(theta: &[f64], length: f64) -> Self {
        let mut out = theta.to_vec();
        for j in 1..out.len() {
            out[j] = if j % 2 == 1 {
                out[j].min(out[j - 1])
            } else {
                out[j].max(out[j - 1])
            };
        }
        for v in &mut out {
            *v = v.clamp(0.0, length);
        }
        Self(out)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// The same locations listed odd-numbered first, then even-numbered.
    pub fn grouped(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.0.iter().step_by(2).copied().collect();
        out.extend(self.0.iter().skip(1).step_by(2));
        out
    }
}

pub fn check_schedule(theta: &[f64], length: f64) -> Result<(), ScheduleError> {
    for (index, &value) in theta.iter().enumerate() {
        if !value.is_finite() {
            return Err(ScheduleError::NonFinite { index, value });
        }
        if !(0.0..=length).contains(&value) {
            return Err(ScheduleError::OutOfBox {
                index,
                value,
                length,
            });
        }
        if index > 0 {
            let prev = theta[index - 1];
            // index is 0-based: index 1 is the 2nd (even) location.
            let ok = if index % 2 == 1 {
                value <= prev
            } else {
                value >= prev
            };
            if !ok {
                return Err(ScheduleError::OrderViolated {
                    prev: index - 1,
                    index,
                });
            }
        }
    }
    Ok(())
}

/// Linear-decay detection probability of an event at `x` for an agent at `s`.
pub fn detection_probability(x: f64, s: f64, range: f64) -> f64 {
    let d = (x - s).abs();
    if d <= range {
        1.0 - d / range
    } else {
        0.0
    }
}

/// `1 - Π(1 - p(x, s_k))` over all agents.
pub fn joint_detection_probability(
    x: f64,
    positions: &[f64],
    range: f64,
) -> Result<f64, ModelError> {
    if positions.is_empty() {
        return Err(ModelError::NoAgents);
    }
    let miss: f64 = positions
        .iter()
        .map(|&s| 1.0 - detection_probability(x, s, range))
        .product();
    Ok(1.0 - miss)
}

/// Time derivative of one point's uncertainty.
pub fn uncertainty_rate(
    uncertainty: f64,
    probability: f64,
    inflow: f64,
    service: f64,
) -> Result<f64, ModelError> {
    if uncertainty < 0.0 || uncertainty.is_nan() {
        return Err(ModelError::NegativeUncertainty(uncertainty));
    }
    let net = inflow - service * probability;
    if uncertainty == 0.0 && net < 0.0 {
        Ok(0.0)
    } else {
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn detection_edge_values() {
        assert_eq!(detection_probability(3.0, 3.0, 4.0), 1.0);
        assert_eq!(detection_probability(7.0, 3.0, 4.0), 0.0);
        assert_eq!(detection_probability(-1.0, 3.0, 4.0), 0.0);
        assert_eq!(detection_probability(5.0, 3.0, 4.0), 0.5);
        assert_eq!(detection_probability(10.0, 3.0, 4.0), 0.0);
    }

    #[test]
    fn joint_detection() {
        assert_eq!(joint_detection_probability(2.0, &[2.0], 4.0).unwrap(), 1.0);
        let p = joint_detection_probability(0.0, &[2.0, -2.0], 4.0).unwrap();
        assert!((p - 0.75).abs() < 1e-15);
        assert_eq!(
            joint_detection_probability(0.0, &[9.0, -5.0, 100.0], 4.0).unwrap(),
            0.0
        );
        assert_eq!(
            joint_detection_probability(0.0, &[], 4.0),
            Err(ModelError::NoAgents)
        );
    }

    #[test]
    fn rate_law() {
        assert_eq!(uncertainty_rate(0.0, 1.0, 0.01, 3.0).unwrap(), 0.0);
        assert_eq!(uncertainty_rate(5.0, 0.0, 0.01, 3.0).unwrap(), 0.01);
        assert!((uncertainty_rate(1.0, 1.0, 0.01, 3.0).unwrap() - (0.01 - 3.0)).abs() < 1e-15);
        // empty queue that is not being served fills again
        assert_eq!(uncertainty_rate(0.0, 0.0, 0.01, 3.0).unwrap(), 0.01);
        assert!(uncertainty_rate(-1e-9, 0.5, 0.01, 3.0).is_err());
    }

    #[test]
    fn uniform_grid_example() {
        let cfg = MissionConfig::uniform(20.0, 4.0, 3.0, 36.0, 21, 0.01, 2.0).unwrap();
        assert_eq!(cfg.len(), 21);
        for (i, p) in cfg.points.iter().enumerate() {
            assert_eq!(p.position, i as f64);
        }
    }

    #[test]
    fn config_validation_errors() {
        let bad_b = MissionConfig::uniform(20.0, 4.0, 0.01, 36.0, 3, 0.01, 2.0);
        assert!(matches!(
            bad_b,
            Err(ConfigError::InflowNotBelowService { .. })
        ));
        let empty = MissionConfig::new(20.0, 4.0, 3.0, 36.0, vec![]);
        assert_eq!(empty, Err(ConfigError::EmptyPoints));
        let unsorted = MissionConfig::new(
            20.0,
            4.0,
            3.0,
            36.0,
            vec![
                SamplePoint::new(5.0, 0.1, 1.0),
                SamplePoint::new(2.0, 0.1, 1.0),
            ],
        );
        assert_eq!(unsorted, Err(ConfigError::Unsorted { index: 1 }));
        let neg = MissionConfig::new(20.0, 4.0, 3.0, 36.0, vec![SamplePoint::new(5.0, 0.1, -1.0)]);
        assert!(matches!(neg, Err(ConfigError::NegativeInitial { .. })));
        assert_eq!(
            MissionConfig::uniform(-1.0, 4.0, 3.0, 36.0, 3, 0.1, 1.0),
            Err(ConfigError::NonPositive("L"))
        );
    }

    #[test]
    fn schedule_order_constraint() {
        assert!(SwitchingSchedule::new(vec![12.0, 4.0, 16.0], 20.0).is_ok());
        assert!(SwitchingSchedule::new(vec![12.0, 16.0, 4.0], 20.0).is_err());
        assert!(SwitchingSchedule::new(vec![5.0, 5.0, 5.0], 20.0).is_ok());
        assert!(SwitchingSchedule::new(vec![21.0], 20.0).is_err());
        let s = SwitchingSchedule::from_grouped(&[12.0, 16.0, 4.0], 20.0).unwrap();
        assert_eq!(s.as_slice(), &[12.0, 4.0, 16.0]);
        assert_eq!(s.grouped(), vec![12.0, 16.0, 4.0]);
    }

    #[test]
    fn projection_is_feasible() {
        let p = SwitchingSchedule::project(&[25.0, 30.0, -3.0, 2.0], 20.0);
        assert!(check_schedule(p.as_slice(), 20.0).is_ok());
        assert_eq!(p.as_slice(), &[20.0, 20.0, 20.0, 2.0]);
    }

    proptest! {
        #[test]
        fn detection_symmetric_and_bounded(x in -50.0..50.0f64, s in -50.0..50.0f64, r in 0.1..10.0f64) {
            let p = detection_probability(x, s, r);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert_eq!(p, detection_probability(s, x, r));
            prop_assert_eq!(joint_detection_probability(x, &[s], r).unwrap(), p);
        }

        #[test]
        fn detection_piecewise_linear(x in -20.0..20.0f64, r in 0.5..5.0f64, h in 1e-4..1e-2f64) {
            // away from the breakpoints |x - s| in {0, r} the second difference vanishes
            let s = 0.0;
            let d = (x - s).abs();
            prop_assume!(d > 2.0 * h && (d - r).abs() > 2.0 * h);
            let second = detection_probability(x + h, s, r) - 2.0 * detection_probability(x, s, r)
                + detection_probability(x - h, s, r);
            prop_assert!(second.abs() < 1e-12);
        }

        #[test]
        fn joint_monotone(x in -10.0..10.0f64, a in -10.0..10.0f64, b in -10.0..10.0f64) {
            let one = joint_detection_probability(x, &[a], 4.0).unwrap();
            let two = joint_detection_probability(x, &[a, b], 4.0).unwrap();
            prop_assert!(two >= one - 1e-15);
        }

        #[test]
        fn empty_queue_never_goes_negative(p in 0.0..=1.0f64, a in 0.001..1.0f64, extra in 0.001..5.0f64) {
            let b = a + extra;
            prop_assert!(uncertainty_rate(0.0, p, a, b).unwrap() >= 0.0);
        }

        #[test]
        fn projected_schedules_are_feasible(raw in proptest::collection::vec(-5.0..25.0f64, 0..8)) {
            let p = SwitchingSchedule::project(&raw, 20.0);
            prop_assert!(check_schedule(p.as_slice(), 20.0).is_ok());
        }
    }
}
