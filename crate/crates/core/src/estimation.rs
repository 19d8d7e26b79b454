//! Target state estimation: EKF prediction/update, branch-fork covariance
//! inflation at intersections, and the open-loop rollouts used by the
//! planning layers.
//!
//! Beliefs are free-space Gaussians over `(px, py, vx, vy)`. Unmonitored
//! intersection crossings are handled by moment-matching a uniform mixture
//! over the branch hypotheses, which inflates the covariance instead of
//! committing to one branch.

use crate::geometry::{state_position, state_velocity, Mat2, Mat2x4, Mat4, Pose, Vec2, Vec4};
use crate::roadnet::{ProcessNoise, RoadNetwork};
use crate::sensing::{
    linearize_clamped, noise_covariance_unchecked, predict_measurement, Measurement, SensorSpec,
};
use crate::geometry::wrap_angle;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Mean-to-hub distance below which a crossing hypothesis is considered.
/// Wide enough to absorb the lateral offset of an estimated mean (which
/// rarely passes through a hub exactly), yet well under half of any
/// practical road span so neighbouring hubs' margins stay disjoint.
pub const FORK_TRIGGER_RADIUS: f64 = 0.75;

/// Condition-number limit on the innovation covariance; worse geometry skips
/// the update.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum EstimationError {
    #[error("innovation covariance ill-conditioned (condition {condition:.3e}); update skipped")]
    IllConditioned { condition: f64 },
    #[error("estimate contains non-finite values")]
    NonFinite,
}

/// Gaussian belief over one target's 4-D state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetEstimate {
    pub mean: Vec4,
    pub cov: Mat4,
    /// Step index the belief refers to.
    pub timestamp: u64,
}

impl TargetEstimate {
    pub fn new(mean: Vec4, cov: Mat4, timestamp: u64) -> Self {
        TargetEstimate {
            mean,
            cov,
            timestamp,
        }
    }

    pub fn position(&self) -> Vec2 {
        state_position(&self.mean)
    }

    pub fn det(&self) -> f64 {
        det4(&self.cov)
    }
}

/// Per-target uncertainty bound: the determinant of the covariance must stay
/// below `gamma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyBound {
    pub gamma: f64,
}

impl UncertaintyBound {
    pub fn new(gamma: f64) -> Self {
        assert!(gamma > 0.0, "uncertainty bound must be positive");
        UncertaintyBound { gamma }
    }
}

fn symmetrize(m: Mat4) -> Mat4 {
    (m + m.transpose()) * 0.5
}

/// One covariance propagation step; `spread` adds fork inflation on top of
/// the process noise. Shared by prediction, forking and the rollouts so the
/// degenerate-window consistency between prior and posterior is exact.
fn propagate_cov(cov: &Mat4, noise: &ProcessNoise, spread: Option<&Mat4>) -> Mat4 {
    let g = noise.transition();
    let mut out = g * cov * g.transpose() + noise.covariance();
    if let Some(s) = spread {
        out += s;
    }
    symmetrize(out)
}

/// Open-loop EKF prediction (no measurement).
pub fn predict(est: &TargetEstimate, noise: &ProcessNoise) -> TargetEstimate {
    TargetEstimate {
        mean: noise.transition() * est.mean,
        cov: propagate_cov(&est.cov, noise, None),
        timestamp: est.timestamp + 1,
    }
}

/// Result of a fork step: the moment-matched estimate plus the covariance
/// inflation that was added on top of plain prediction.
#[derive(Clone, Debug)]
pub struct ForkOutcome {
    pub estimate: TargetEstimate,
    /// `(1/K) * sum (mu_k - mu)(mu_k - mu)^T`, reusable for covariance-only
    /// replays of the same rollout.
    pub spread: Mat4,
    pub hub: usize,
    pub branch_count: usize,
}

/// Moment-matched Gaussian over the K branch hypotheses at an intersection.
///
/// Caller guarantees the mean is within [`FORK_TRIGGER_RADIUS`] of an
/// intersection hub with at least two branch directions; with fewer than two
/// branches the plain [`predict`] applies instead.
pub fn fork_approximation(
    est: &TargetEstimate,
    net: &RoadNetwork,
    noise: &ProcessNoise,
) -> Option<ForkOutcome> {
    let hub = net.nearest_hub(est.position(), FORK_TRIGGER_RADIUS)?;
    if !net.is_intersection(hub) {
        return None;
    }
    let arrival = arrival_road(net, hub, state_velocity(&est.mean));
    let branches = net
        .branch_directions(hub, arrival)
        .expect("hub index comes from nearest_hub");
    if branches.len() < 2 {
        return None;
    }
    let speed = state_velocity(&est.mean).norm();
    let h = noise.interval();
    let p = est.position();
    let k = branches.len() as f64;
    let hypotheses: Vec<Vec4> = branches
        .iter()
        .map(|(_, dir)| {
            let np = p + dir * (h * speed);
            Vec4::new(np.x, np.y, dir.x * speed, dir.y * speed)
        })
        .collect();
    let mean = hypotheses.iter().sum::<Vec4>() / k;
    let mut spread = Mat4::zeros();
    for hyp in &hypotheses {
        let d = hyp - mean;
        spread += d * d.transpose();
    }
    spread /= k;
    Some(ForkOutcome {
        estimate: TargetEstimate {
            mean,
            cov: propagate_cov(&est.cov, noise, Some(&spread)),
            timestamp: est.timestamp + 1,
        },
        spread,
        hub,
        branch_count: branches.len(),
    })
}

/// Road most anti-parallel to the travel direction, i.e. the one the target
/// arrived on; `None` when the velocity is negligible.
fn arrival_road(net: &RoadNetwork, hub: usize, velocity: Vec2) -> Option<usize> {
    let speed = velocity.norm();
    if speed < 1e-9 {
        return None;
    }
    let vhat = velocity / speed;
    net.incident_roads(hub)
        .iter()
        .copied()
        .map(|r| (r, net.direction_from(r, hub).dot(&vhat)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
        .map(|(r, _)| r)
}

/// Tracks per-target fork state so one hub passage fires at most one fork.
///
/// The fork fires at hub *passage*: the first step inside the trigger margin
/// where the mean sits at or past the hub along its travel direction. Firing
/// on passage rather than margin entry keeps the fork aligned with the moment
/// the branch choice actually happens, and the wide margin tolerates the
/// lateral offset an estimated mean accumulates (it rarely threads a hub
/// exactly). While the mean stays inside the same hub's margin, no re-fire.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForkTracker {
    inside: Option<usize>,
    fired: bool,
}

impl ForkTracker {
    pub fn new() -> Self {
        ForkTracker::default()
    }

    /// Advances the belief one step: fork when the crossing hypothesis
    /// triggers, plain prediction otherwise.
    pub fn advance(
        &mut self,
        est: &TargetEstimate,
        net: &RoadNetwork,
        noise: &ProcessNoise,
    ) -> (TargetEstimate, Option<ForkOutcome>) {
        let near = net
            .nearest_hub(est.position(), FORK_TRIGGER_RADIUS)
            .filter(|&h| net.is_intersection(h));
        match near {
            None => {
                self.inside = None;
                self.fired = false;
            }
            Some(hub) => {
                if self.inside != Some(hub) {
                    self.inside = Some(hub);
                    self.fired = false;
                }
                // Longitudinal distance still to travel before the hub;
                // negative once past. Fire during the step that crosses it
                // (within half a step ahead counts as crossing now).
                let vel = state_velocity(&est.mean);
                let speed = vel.norm();
                let ahead = if speed > 1e-12 {
                    (net.hub(hub) - est.position()).dot(&vel) / speed
                } else {
                    0.0
                };
                let reaches_hub = ahead <= 0.5 * noise.interval() * speed;
                if reaches_hub && !self.fired {
                    self.fired = true;
                    if let Some(outcome) = fork_approximation(est, net, noise) {
                        return (outcome.estimate, Some(outcome));
                    }
                }
            }
        }
        (predict(est, noise), None)
    }
}

/// Measurement-free belief rollout with fork inflation at predicted
/// crossings. Index `k` holds the belief `k` steps after the input estimate.
#[derive(Clone, Debug)]
pub struct PriorRollout {
    pub target_id: usize,
    pub means: Vec<Vec4>,
    pub covs: Vec<Mat4>,
    /// Indices (into `means`/`covs`) whose covariance received fork
    /// inflation.
    pub fork_steps: BTreeSet<usize>,
    pub fork_spreads: BTreeMap<usize, Mat4>,
}

impl PriorRollout {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn det(&self, step: usize) -> f64 {
        det4(&self.covs[step])
    }

    /// Largest covariance determinant over the whole rollout.
    pub fn peak_det(&self) -> f64 {
        self.covs.iter().map(det4).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Rolls the belief forward `steps` steps without measurements.
pub fn prior_rollout(
    target_id: usize,
    est: &TargetEstimate,
    net: &RoadNetwork,
    noise: &ProcessNoise,
    steps: usize,
) -> PriorRollout {
    let mut means = Vec::with_capacity(steps + 1);
    let mut covs = Vec::with_capacity(steps + 1);
    let mut fork_steps = BTreeSet::new();
    let mut fork_spreads = BTreeMap::new();
    means.push(est.mean);
    covs.push(est.cov);
    let mut tracker = ForkTracker::new();
    let mut cur = *est;
    for k in 1..=steps {
        let (next, fork) = tracker.advance(&cur, net, noise);
        means.push(next.mean);
        covs.push(next.cov);
        if let Some(f) = fork {
            fork_steps.insert(k);
            fork_spreads.insert(k, f.spread);
        }
        cur = next;
    }
    PriorRollout {
        target_id,
        means,
        covs,
        fork_steps,
        fork_spreads,
    }
}

/// Rollout that never applies fork inflation, for ablation studies: plain
/// prediction at every step, crossings included.
pub fn prior_rollout_plain(
    target_id: usize,
    est: &TargetEstimate,
    noise: &ProcessNoise,
    steps: usize,
) -> PriorRollout {
    let mut means = Vec::with_capacity(steps + 1);
    let mut covs = Vec::with_capacity(steps + 1);
    means.push(est.mean);
    covs.push(est.cov);
    let mut cur = *est;
    for _ in 1..=steps {
        cur = predict(&cur, noise);
        means.push(cur.mean);
        covs.push(cur.cov);
    }
    PriorRollout {
        target_id,
        means,
        covs,
        fork_steps: BTreeSet::new(),
        fork_spreads: BTreeMap::new(),
    }
}

/// Idealized monitoring geometry for planning rollouts: a stationary observer
/// at a fixed standoff with zero bearing.
#[derive(Clone, Copy, Debug)]
pub struct IdealObserver {
    pub standoff: f64,
}

impl IdealObserver {
    /// Standoff `min(0.5 * range_limit, 0.5 m)`: well inside the sensing
    /// radius, clear of the overhead bearing singularity.
    pub fn for_sensor(spec: &SensorSpec) -> Self {
        IdealObserver {
            standoff: (0.5 * spec.range_limit).min(0.5),
        }
    }

    /// Observer pose servicing a target with mean state `mean`: behind the
    /// target along its velocity (east of it when nearly static), looking at
    /// it.
    pub fn pose_for(&self, mean: &Vec4) -> Pose {
        let v = state_velocity(mean);
        let dir = if v.norm() > 1e-9 {
            v / v.norm()
        } else {
            Vec2::new(1.0, 0.0)
        };
        let p = state_position(mean) - dir * self.standoff;
        Pose::new(p.x, p.y, dir.y.atan2(dir.x))
    }
}

/// Covariance-only EKF update for the ideal-observer geometry; mean is left
/// untouched (planning fiction, no real measurement exists).
fn ideal_observer_cov_update(
    cov: &Mat4,
    mean: &Vec4,
    observer: &IdealObserver,
    spec: &SensorSpec,
) -> Mat4 {
    let pose = observer.pose_for(mean);
    let h = linearize_clamped(&pose, mean, spec.altitude);
    let v = noise_covariance_unchecked(&pose, mean, spec);
    match kalman_cov_update(cov, &h, &v) {
        Ok(updated) => updated,
        Err(_) => *cov,
    }
}

/// Expected covariance sequence when the target is serviced during
/// `[window.0, window.1)` by an ideal observer: prior before, measured
/// during, measurement-free (with any post-window fork inflation) after.
pub fn posterior_rollout(
    rollout: &PriorRollout,
    window: (usize, usize),
    observer: &IdealObserver,
    spec: &SensorSpec,
    noise: &ProcessNoise,
) -> Vec<Mat4> {
    let (t_s, t_e) = window;
    let last = rollout.len() - 1;
    assert!(t_s <= t_e && t_e <= last, "window {window:?} outside rollout");
    let mut covs = Vec::with_capacity(rollout.len());
    covs.extend_from_slice(&rollout.covs[..=t_s]);
    for k in (t_s + 1)..=t_e {
        let predicted = propagate_cov(&covs[k - 1], noise, None);
        covs.push(ideal_observer_cov_update(
            &predicted,
            &rollout.means[k],
            observer,
            spec,
        ));
    }
    for k in (t_e + 1)..=last {
        covs.push(propagate_cov(
            &covs[k - 1],
            noise,
            rollout.fork_spreads.get(&k),
        ));
    }
    covs
}

/// Shared covariance/gain arithmetic behind every measurement update.
/// Returns the posterior covariance, or an error for ill-conditioned
/// innovation covariance.
fn kalman_cov_and_gain(
    cov: &Mat4,
    h: &Mat2x4,
    v: &Mat2,
) -> Result<(Mat4, nalgebra::Matrix4x2<f64>), EstimationError> {
    let s = h * cov * h.transpose() + v;
    let (a, b, d) = (s[(0, 0)], 0.5 * (s[(0, 1)] + s[(1, 0)]), s[(1, 1)]);
    let mid = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (lo, hi) = (mid - rad, mid + rad);
    if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi / lo > MAX_INNOVATION_CONDITION {
        return Err(EstimationError::IllConditioned {
            condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        });
    }
    let det = a * d - b * b;
    let s_inv = Mat2::new(d / det, -b / det, -b / det, a / det);
    let gain = cov * h.transpose() * s_inv;
    let updated = symmetrize(cov - gain * h * cov);
    Ok((updated, gain))
}

pub(crate) fn kalman_cov_update(cov: &Mat4, h: &Mat2x4, v: &Mat2) -> Result<Mat4, EstimationError> {
    kalman_cov_and_gain(cov, h, v).map(|(c, _)| c)
}

/// Generic linear(ized) measurement update from an explicit Jacobian, noise
/// covariance and innovation. The range-and-bearing update and the linear
/// test harnesses both route through here.
pub fn update_with_observation(
    est: &TargetEstimate,
    h: &Mat2x4,
    v: &Mat2,
    innovation: Vec2,
) -> Result<TargetEstimate, EstimationError> {
    let (cov, gain) = kalman_cov_and_gain(&est.cov, h, v)?;
    let mean = est.mean + gain * innovation;
    if mean.iter().any(|x| !x.is_finite()) {
        return Err(EstimationError::NonFinite);
    }
    Ok(TargetEstimate {
        mean,
        cov,
        timestamp: est.timestamp,
    })
}

/// Range-and-bearing EKF update. `est` must already be predicted (or forked)
/// to the measurement timestamp; the bearing innovation is wrapped.
pub fn ekf_update(
    est: &TargetEstimate,
    meas: &Measurement,
    robot_pose: &Pose,
    spec: &SensorSpec,
) -> Result<TargetEstimate, EstimationError> {
    let h = linearize_clamped(robot_pose, &est.mean, spec.altitude);
    let v = noise_covariance_unchecked(robot_pose, &est.mean, spec);
    let predicted = predict_measurement(robot_pose, est.position(), spec.altitude);
    let innovation = Vec2::new(meas.z.x - predicted.x, wrap_angle(meas.z.y - predicted.y));
    update_with_observation(est, &h, &v, innovation)
}

/// Closed-form 4x4 determinant (cofactor expansion over 2x2 complements); a
/// smooth composition of the entries, suitable for numeric differentiation.
pub fn det4(m: &Mat4) -> f64 {
    let s0 = m[(0, 0)] * m[(1, 1)] - m[(1, 0)] * m[(0, 1)];
    let s1 = m[(0, 0)] * m[(1, 2)] - m[(1, 0)] * m[(0, 2)];
    let s2 = m[(0, 0)] * m[(1, 3)] - m[(1, 0)] * m[(0, 3)];
    let s3 = m[(0, 1)] * m[(1, 2)] - m[(1, 1)] * m[(0, 2)];
    let s4 = m[(0, 1)] * m[(1, 3)] - m[(1, 1)] * m[(0, 3)];
    let s5 = m[(0, 2)] * m[(1, 3)] - m[(1, 2)] * m[(0, 3)];

    let c5 = m[(2, 2)] * m[(3, 3)] - m[(3, 2)] * m[(2, 3)];
    let c4 = m[(2, 1)] * m[(3, 3)] - m[(3, 1)] * m[(2, 3)];
    let c3 = m[(2, 1)] * m[(3, 2)] - m[(3, 1)] * m[(2, 2)];
    let c2 = m[(2, 0)] * m[(3, 3)] - m[(3, 0)] * m[(2, 3)];
    let c1 = m[(2, 0)] * m[(3, 2)] - m[(3, 0)] * m[(2, 2)];
    let c0 = m[(2, 0)] * m[(3, 1)] - m[(3, 0)] * m[(2, 1)];

    s0 * c5 - s1 * c4 + s2 * c3 + s3 * c2 - s4 * c1 + s5 * c0
}
