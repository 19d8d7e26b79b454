//! Scenario definition: a TOML-serializable description of the road network,
//! the fleet, the sensors, and every tuning constant one episode needs.
//!
//! Initial target and robot placement is generated deterministically from
//! the counts and the network (no RNG), so scaled-up variants of a scenario
//! are reproducible without listing every start pose.

use crate::estimation::{TargetEstimate, UncertaintyBound};
use crate::geometry::{Mat4, Pose, Vec4};
use crate::roadnet::{ProcessNoise, RoadNetwork, RoadNetworkError, TargetTruth};
use crate::sensing::SensorSpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("network: {0}")]
    Network(#[from] RoadNetworkError),
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub hubs: Vec<[f64; 2]>,
    pub roads: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetSpec {
    pub count: usize,
    pub speed_min: f64,
    pub speed_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobotSpec {
    pub count: usize,
    pub v_max: f64,
    pub omega_max: f64,
    /// Average speed the routing layer plans with, m/s.
    pub routing_speed: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensorConfig {
    pub range_limit: f64,
    pub capacity: usize,
    pub altitude: f64,
    pub range_noise_base: f64,
    pub range_noise_slope: f64,
    pub bearing_noise_base: f64,
    pub bearing_noise_slope: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimationConfig {
    /// Covariance-determinant bound per target.
    pub gamma: f64,
    /// Continuous-time white-noise intensity of the motion model.
    pub process_intensity: f64,
    /// Seconds per step.
    pub step_interval: f64,
    /// Initial belief covariance diagonal (px, py, vx, vy).
    pub initial_cov: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReassignMode {
    Periodic,
    OnSelectionChange,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoordinatorConfig {
    /// Assignment rollout horizon, steps.
    pub assignment_horizon: usize,
    /// Steps between routing solves.
    pub assignment_period: usize,
    /// NMPC horizon, steps.
    pub control_horizon: usize,
    /// Steps between NMPC solves (queued controls are consumed in between).
    pub control_period: usize,
    /// Initial steps excluded from violation statistics while the fleet
    /// deploys.
    pub grace: usize,
    pub reassign: ReassignMode,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NmpcConfig {
    pub effort_v: f64,
    pub effort_omega: f64,
    /// Global scale of the standoff-tracking cost term.
    pub track_weight: f64,
    /// Tracking emphasis for assigned targets that are not the scheduled
    /// focus.
    pub background_lambda: f64,
    /// Weight of the summed-determinant objective in the unbounded variant.
    pub det_weight: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Default episode length, steps.
    pub duration: usize,
    pub network: NetworkSpec,
    pub targets: TargetSpec,
    pub robots: RobotSpec,
    pub sensor: SensorConfig,
    pub estimation: EstimationConfig,
    pub coordinator: CoordinatorConfig,
    pub nmpc: NmpcConfig,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Full validation; error messages name the offending field.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if self.duration == 0 {
            return Err(invalid("duration", "must be at least 1 step"));
        }
        let t = &self.targets;
        if t.speed_min <= 0.0 || t.speed_max < t.speed_min {
            return Err(invalid(
                "targets.speed_min/speed_max",
                "need 0 < speed_min <= speed_max",
            ));
        }
        let r = &self.robots;
        if r.v_max <= 0.0 {
            return Err(invalid("robots.v_max", "must be positive"));
        }
        if r.omega_max <= 0.0 {
            return Err(invalid("robots.omega_max", "must be positive"));
        }
        if r.routing_speed <= 0.0 || r.routing_speed > r.v_max {
            return Err(invalid(
                "robots.routing_speed",
                "must be positive and at most v_max",
            ));
        }
        self.sensor_spec()
            .validate()
            .map_err(|e| invalid("sensor", e.to_string()))?;
        let e = &self.estimation;
        if e.gamma <= 0.0 {
            return Err(invalid("estimation.gamma", "must be positive"));
        }
        if e.process_intensity < 0.0 {
            return Err(invalid("estimation.process_intensity", "must be nonnegative"));
        }
        if e.step_interval <= 0.0 {
            return Err(invalid("estimation.step_interval", "must be positive"));
        }
        if e.initial_cov.iter().any(|&v| v <= 0.0) {
            return Err(invalid("estimation.initial_cov", "entries must be positive"));
        }
        let c = &self.coordinator;
        if c.control_horizon == 0 || c.assignment_horizon == 0 {
            return Err(invalid(
                "coordinator.control_horizon/assignment_horizon",
                "horizons must be at least 1 step",
            ));
        }
        if c.control_horizon > c.assignment_horizon {
            return Err(invalid(
                "coordinator.control_horizon",
                "must not exceed assignment_horizon",
            ));
        }
        if c.control_period == 0 || c.assignment_period == 0 {
            return Err(invalid(
                "coordinator.control_period/assignment_period",
                "periods must be at least 1 step",
            ));
        }
        if c.control_period > c.assignment_period {
            return Err(invalid(
                "coordinator.control_period",
                "must not exceed assignment_period",
            ));
        }
        let n = &self.nmpc;
        if n.effort_v < 0.0 || n.effort_omega < 0.0 {
            return Err(invalid("nmpc.effort_v/effort_omega", "must be nonnegative"));
        }
        if n.track_weight < 0.0 || n.background_lambda < 0.0 || n.det_weight < 0.0 {
            return Err(invalid(
                "nmpc.track_weight/background_lambda/det_weight",
                "must be nonnegative",
            ));
        }
        self.network()?;
        Ok(())
    }

    pub fn network(&self) -> Result<RoadNetwork, RoadNetworkError> {
        RoadNetwork::new(
            self.network.hubs.clone(),
            self.network.roads.iter().map(|r| (r[0], r[1])).collect(),
        )
    }

    pub fn sensor_spec(&self) -> SensorSpec {
        SensorSpec {
            range_limit: self.sensor.range_limit,
            capacity: self.sensor.capacity,
            altitude: self.sensor.altitude,
            noise_base: (self.sensor.range_noise_base, self.sensor.bearing_noise_base),
            noise_slope: (
                self.sensor.range_noise_slope,
                self.sensor.bearing_noise_slope,
            ),
        }
    }

    pub fn process_noise(&self) -> ProcessNoise {
        ProcessNoise::from_intensity(
            self.estimation.process_intensity,
            self.estimation.step_interval,
        )
    }

    pub fn bound(&self) -> UncertaintyBound {
        UncertaintyBound::new(self.estimation.gamma)
    }

    pub fn speed_range(&self) -> (f64, f64) {
        (self.targets.speed_min, self.targets.speed_max)
    }

    /// Deterministic initial target placement: targets spread over roads by
    /// a prime stride, fractional positions by a golden-ratio sequence,
    /// alternating directions, speeds swept across the allowed range.
    pub fn spawn_targets(&self, net: &RoadNetwork) -> Vec<TargetTruth> {
        let golden = 0.618_033_988_749_894_9_f64;
        (0..self.targets.count)
            .map(|i| {
                let road = (i * 7919 + 3) % net.num_roads();
                let fraction = 0.15 + 0.7 * ((i as f64 * golden + 0.37).fract());
                let forward = i % 2 == 0;
                let span = self.targets.speed_max - self.targets.speed_min;
                let speed =
                    self.targets.speed_min + span * ((i as f64 * golden * golden + 0.11).fract());
                TargetTruth::on_road(i, net, road, fraction, forward, speed)
            })
            .collect()
    }

    /// Deterministic initial robot poses: robots cycle over hubs with a
    /// small fixed offset so they never sit exactly on a target.
    pub fn spawn_robots(&self, net: &RoadNetwork) -> Vec<Pose> {
        let golden_angle = 2.399_963_229_728_653_f64;
        (0..self.robots.count)
            .map(|j| {
                let hub = net.hub((j * 5 + 2) % net.num_hubs());
                let a = j as f64 * golden_angle;
                Pose::new(hub.x + 0.25 * a.cos(), hub.y + 0.25 * a.sin(), a)
            })
            .collect()
    }

    /// Initial beliefs: means at the true states (the deployment is assumed
    /// to begin from a converged estimate), covariance from the scenario.
    pub fn initial_beliefs(&self, truths: &[TargetTruth]) -> Vec<TargetEstimate> {
        let cov = Mat4::from_diagonal(&Vec4::new(
            self.estimation.initial_cov[0],
            self.estimation.initial_cov[1],
            self.estimation.initial_cov[2],
            self.estimation.initial_cov[3],
        ));
        truths
            .iter()
            .map(|t| TargetEstimate::new(t.state, cov, 0))
            .collect()
    }

    /// Sweep override: scales the monitoring demand, keeping fleet size
    /// equal to the target count so fleet sizing stays the free variable.
    pub fn with_target_count(mut self, count: usize) -> Self {
        self.targets.count = count;
        self.robots.count = count;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.estimation.gamma = gamma;
        self
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.sensor.capacity = capacity;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Scenario {
        Scenario {
            name: "test".into(),
            duration: 100,
            network: NetworkSpec {
                hubs: vec![[0.0, 0.0], [5.0, 0.0], [5.0, 5.0], [0.0, 5.0], [2.5, 2.5]],
                roads: vec![[0, 1], [1, 2], [2, 3], [3, 0], [0, 4], [1, 4], [2, 4], [3, 4]],
            },
            targets: TargetSpec {
                count: 3,
                speed_min: 0.2,
                speed_max: 0.6,
            },
            robots: RobotSpec {
                count: 3,
                v_max: 2.0,
                omega_max: 3.0,
                routing_speed: 1.5,
            },
            sensor: SensorConfig {
                range_limit: 1.5,
                capacity: 5,
                altitude: 0.5,
                range_noise_base: 0.05,
                range_noise_slope: 0.05,
                bearing_noise_base: 0.02,
                bearing_noise_slope: 0.05,
            },
            estimation: EstimationConfig {
                gamma: 0.1,
                process_intensity: 0.05,
                step_interval: 0.1,
                initial_cov: [0.02, 0.02, 0.01, 0.01],
            },
            coordinator: CoordinatorConfig {
                assignment_horizon: 50,
                assignment_period: 100,
                control_horizon: 10,
                control_period: 1,
                grace: 20,
                reassign: ReassignMode::Periodic,
            },
            nmpc: NmpcConfig {
                effort_v: 0.1,
                effort_omega: 0.05,
                track_weight: 1.0,
                background_lambda: 0.1,
                det_weight: 1.0,
            },
        }
    }

    #[test]
    fn toml_round_trip_preserves_scenario() {
        let s = sample();
        let text = s.to_toml();
        let back = Scenario::from_toml(&text).unwrap();
        assert_eq!(s.name, back.name);
        assert_eq!(s.network.hubs, back.network.hubs);
        assert_eq!(s.coordinator.reassign, back.coordinator.reassign);
        assert_eq!(s.estimation.gamma, back.estimation.gamma);
        back.validate().unwrap();
    }

    #[test]
    fn validation_names_offending_fields() {
        let mut s = sample();
        s.estimation.gamma = 0.0;
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("estimation.gamma"), "{err}");

        let mut s = sample();
        s.coordinator.control_horizon = 60;
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("control_horizon"), "{err}");

        let mut s = sample();
        s.robots.routing_speed = 5.0;
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("routing_speed"), "{err}");
    }

    #[test]
    fn placement_is_deterministic_and_on_network() {
        let s = sample();
        let net = s.network().unwrap();
        let a = s.spawn_targets(&net);
        let b = s.spawn_targets(&net);
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.state, y.state);
            assert_eq!(x.current_road, y.current_road);
        }
        for t in &a {
            let d = net.distance_to_road(t.current_road, t.position());
            assert!(d < 1e-9, "target off its road by {d}");
            let (lo, hi) = s.speed_range();
            assert!(t.speed >= lo && t.speed <= hi);
        }
        let r1 = s.spawn_robots(&net);
        let r2 = s.spawn_robots(&net);
        assert_eq!(r1, r2);
        assert_eq!(r1.len(), 3);
    }

    #[test]
    fn overrides_scale_the_right_fields() {
        let s = sample().with_target_count(7).with_gamma(0.3).with_capacity(2);
        assert_eq!(s.targets.count, 7);
        assert_eq!(s.robots.count, 7);
        assert_eq!(s.estimation.gamma, 0.3);
        assert_eq!(s.sensor.capacity, 2);
        s.validate().unwrap();
        let net = s.network().unwrap();
        assert_eq!(s.spawn_targets(&net).len(), 7);
        assert_eq!(s.spawn_robots(&net).len(), 7);
    }
}
