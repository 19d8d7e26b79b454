//! Episode coordinator: the dual-frequency loop that ties routing, control,
//! sensing, and estimation together around a simulated ground truth.
//!
//! A slow tick rebuilds monitoring plans from long-horizon belief rollouts
//! and sizes the active fleet; a fast tick solves one horizon problem per
//! active robot (data-parallel), applies the first control, advances the
//! truth, collects measurements, and updates beliefs. Belief updates only
//! ever consume [`Measurement`] values; true target states stay inside
//! [`TruthWorld`].

use crate::assignment::{build_instance, solve_mvrptw, MonitoringPlan};
use crate::estimation::{
    ekf_update, predict, prior_rollout, prior_rollout_plain, ForkTracker, IdealObserver,
    PriorRollout, TargetEstimate, UncertaintyBound,
};
use crate::geometry::{state_position, state_velocity, wrap_angle, Pose, Vec2};
use crate::nmpc::{
    solve, solve_unbounded, unicycle_step, ControlBounds, ControlInput, NmpcProblem, NmpcSolution,
    TargetRef,
};
use crate::par::par_map;
use crate::roadnet::{step_target, ProcessNoise, RoadNetwork, TargetTruth};
use crate::scenario::{ReassignMode, Scenario, ScenarioError};
use crate::sensing::{observe, Measurement, SensorSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

/// Offset separating the measurement-noise stream from the motion stream.
const MEASUREMENT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Episode variant: the full method or one of the ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Flexible-fleet routing plus bound-constrained horizon control.
    Full,
    /// No routing: fixed one-to-one pairing, whole fleet active throughout.
    NmpcOnly,
    /// Routing only: a scripted steer-toward-focus controller replaces the
    /// horizon solver.
    MvrpOnly,
    /// Determinant constraints dropped; the control objective instead adds
    /// the summed predicted determinants.
    NoBound,
    /// Crossing-uncertainty inflation disabled everywhere.
    NoForks,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NmpcOnly => "nmpc-only",
            Variant::MvrpOnly => "mvrp-only",
            Variant::NoBound => "no-bound",
            Variant::NoForks => "no-forks",
        }
    }

    fn uses_routing(&self) -> bool {
        !matches!(self, Variant::NmpcOnly)
    }
}

/// Per-step record emitted by the episode loop, one per step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Belief covariance determinant per target after this step's updates.
    pub dets: Vec<f64>,
    /// Robots currently activated by the router.
    pub active_count: usize,
    /// Assigned targets per robot, fleet order.
    pub assigned_counts: Vec<usize>,
    /// Targets at or above the bound this step.
    pub violations: usize,
    /// Routing solve wall time; zero on steps without a routing solve.
    pub routing_ms: f64,
    /// Control solve wall time; zero on steps that only consume queued
    /// controls.
    pub nmpc_ms: f64,
}

/// Full outcome of one episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub scenario: String,
    pub variant: Variant,
    pub seed: u64,
    pub gamma: f64,
    /// Steps excluded from the violation statistics while the fleet deploys.
    pub grace: usize,
    pub steps: Vec<StepMetrics>,
    /// Mean active fleet size over the episode.
    pub mean_active: f64,
    /// Fraction of post-grace (step, target) samples at or above the bound.
    pub violation_fraction: f64,
    /// No post-grace sample ever reached the bound.
    pub zero_violations: bool,
    /// Bound held on at least 99% of post-grace samples.
    pub success: bool,
    /// Total targets dropped from coverage across routing solves.
    pub uncovered_events: usize,
    pub routing_ms_total: f64,
    pub nmpc_ms_total: f64,
    /// Final robot poses `(x, y, theta)`, fleet order.
    pub final_poses: Vec<[f64; 3]>,
}

/// Simulated ground truth. The only values that cross from here to the
/// coordinator are measurements; belief updates never read true states.
pub struct TruthWorld {
    targets: Vec<TargetTruth>,
    speed_range: (f64, f64),
    motion_rng: ChaCha8Rng,
    measurement_rng: ChaCha8Rng,
}

impl TruthWorld {
    pub fn new(targets: Vec<TargetTruth>, speed_range: (f64, f64), seed: u64) -> Self {
        TruthWorld {
            targets,
            speed_range,
            motion_rng: ChaCha8Rng::seed_from_u64(seed),
            measurement_rng: ChaCha8Rng::seed_from_u64(seed ^ MEASUREMENT_STREAM),
        }
    }

    /// Advances every target one step, ascending id order.
    pub fn step(&mut self, net: &RoadNetwork, noise: &ProcessNoise) {
        for t in self.targets.iter_mut() {
            *t = step_target(t, net, noise, self.speed_range, &mut self.motion_rng);
        }
    }

    /// Attempts one measurement; draws noise only when the target is in
    /// range, so the stream stays deterministic under range gating.
    pub fn try_observe(
        &mut self,
        pose: &Pose,
        spec: &SensorSpec,
        robot_id: usize,
        target_id: usize,
        timestamp: u64,
    ) -> Option<Measurement> {
        observe(
            pose,
            self.targets[target_id].position(),
            spec,
            robot_id,
            target_id,
            timestamp,
            &mut self.measurement_rng,
        )
    }

    /// Read-only diagnostic access for tests; the episode loop never calls
    /// this.
    pub fn target(&self, id: usize) -> &TargetTruth {
        &self.targets[id]
    }
}

/// True when a routing solve is due this step: every `assignment_period`
/// steps, plus pending selection-change events in that trigger mode.
pub fn reassignment_due(
    step: usize,
    period: usize,
    mode: ReassignMode,
    selection_changed: bool,
) -> bool {
    step % period == 0 || (mode == ReassignMode::OnSelectionChange && selection_changed)
}

/// Advances all beliefs one step and folds in this step's measurements.
///
/// Unobserved targets evolve through the fork tracker (plain prediction when
/// `forks_enabled` is off). Observed targets use plain prediction followed by
/// sequential filter updates in ascending robot-id order regardless of input
/// order; a measurement whose update would be ill-conditioned is skipped.
pub fn update_beliefs(
    beliefs: &mut [TargetEstimate],
    trackers: &mut [ForkTracker],
    measurements: &[Measurement],
    robot_poses: &[Pose],
    net: &RoadNetwork,
    noise: &ProcessNoise,
    spec: &SensorSpec,
    forks_enabled: bool,
) {
    let mut order: Vec<usize> = (0..measurements.len()).collect();
    order.sort_by_key(|&i| (measurements[i].target_id, measurements[i].robot_id));
    let mut by_target: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        by_target
            .entry(measurements[i].target_id)
            .or_default()
            .push(i);
    }
    for (tid, belief) in beliefs.iter_mut().enumerate() {
        match by_target.get(&tid) {
            None => {
                if forks_enabled {
                    let (next, _) = trackers[tid].advance(belief, net, noise);
                    *belief = next;
                } else {
                    *belief = predict(belief, noise);
                }
            }
            Some(obs) => {
                if forks_enabled {
                    let (next, _) = trackers[tid].advance(belief, net, noise);
                    *belief = next;
                } else {
                    *belief = predict(belief, noise);
                }
                for &i in obs {
                    let m = &measurements[i];
                    if let Ok(next) = ekf_update(belief, m, &robot_poses[m.robot_id], spec) {
                        *belief = next;
                    }
                }
            }
        }
    }
}

/// Receding-horizon warm start: the previous solution with its first
/// `consumed` controls dropped and the tail padded by repetition.
fn shifted_warm(controls: &[ControlInput], consumed: usize) -> Vec<ControlInput> {
    (0..controls.len())
        .map(|i| controls[(i + consumed).min(controls.len() - 1)])
        .collect()
}

/// Steer-toward-goal policy for the routing-only baseline: turn toward the
/// goal, close to the standoff distance, slow down while badly misaligned.
fn steer_toward(
    pose: &Pose,
    goal: Vec2,
    standoff: f64,
    bounds: &ControlBounds,
    dt: f64,
) -> ControlInput {
    let delta = goal - pose.position();
    let d = delta.norm();
    if d < 1e-9 {
        return ControlInput::ZERO;
    }
    let heading_err = wrap_angle(delta.y.atan2(delta.x) - pose.theta);
    let omega = (heading_err / dt).clamp(-bounds.omega_max, bounds.omega_max);
    let cruise = ((d - standoff) / dt).clamp(0.0, bounds.v_max);
    ControlInput {
        v: cruise * heading_err.cos().max(0.0),
        omega,
    }
}

/// Steps until a rollout first predicts a bound violation.
fn steps_to_bound(rollout: &PriorRollout, gamma: f64) -> usize {
    rollout
        .covs
        .iter()
        .position(|c| crate::estimation::det4(c) >= gamma)
        .unwrap_or(usize::MAX)
}

/// Steps a patrol may still defer a target: the predicted bound crossing or
/// the coast cap, whichever is nearer. The Gaussian model understates coast
/// risk (branch choices and speed changes are maneuvers the constant-velocity
/// filter does not see), so low determinants alone must not let a target go
/// unmeasured past the planning horizon.
fn patrol_deadline(
    tid: usize,
    rollout_of: &BTreeMap<usize, &PriorRollout>,
    gamma: f64,
    last_observed: &[usize],
    step: usize,
    coast_cap: usize,
) -> usize {
    let by_bound = steps_to_bound(rollout_of[&tid], gamma);
    let by_coast = (last_observed[tid] + coast_cap).saturating_sub(step);
    by_bound.min(by_coast)
}

/// Steps a robot needs to bring a point into observation range at full
/// speed, ignoring turning: distance beyond the standoff over meters per
/// step.
fn travel_eta(from: Vec2, to: Vec2, standoff: f64, meters_per_step: f64) -> usize {
    (((to - from).norm() - standoff).max(0.0) / meters_per_step).ceil() as usize
}

/// Consecutive measured steps a patrol focus needs before release.
const PATROL_RELEASE_STREAK: usize = 3;

/// Target a robot should emphasize right now: the scheduled task while the
/// plan's schedule is live, afterwards the assigned target with the least
/// slack, deadline minus the robot's travel time to it (earliest-deadline
/// patrol between routing solves). Subtracting travel time matters: a
/// deadline that equals the travel time is already an arrival exactly at
/// the crossing, so a position-blind pick shows up a few steps late every
/// time the next target is far.
///
/// The patrol pick is sticky: once chosen, a target is held until it is
/// secured, meaning its predicted bound crossing sits at least `secure`
/// steps out, it was measured on [`PATROL_RELEASE_STREAK`] consecutive
/// recent steps, AND its believed speed is physically plausible
/// (`speed_ok`). Re-picking every tick would flip-flop between two
/// co-assigned targets whose deadlines leapfrog each other, parking the
/// robot at the edge of sensing range of both; a single long-range
/// measurement can collapse a fork posterior onto the wrong branch, so one
/// lucky fix must not count as service; and an update that leaves the
/// estimate moving faster than any target can drive is certainly corrupt,
/// so the robot stays until further measurements repair it. A commitment
/// also expires after `cap` steps so an unrecoverable belief cannot
/// monopolize the robot; the expired target is skipped for one re-pick so
/// its siblings get serviced. An active reacquisition sweep extends the
/// expiry to [`SWEEP_ABANDON`] sweep steps: breaking off a search that is
/// about to close the loop wastes everything already spent on it.
#[allow(clippy::too_many_arguments)]
fn focus_target(
    runtime: &mut RobotRuntime,
    step: usize,
    plan_age: usize,
    rollout_of: &BTreeMap<usize, &PriorRollout>,
    gamma: f64,
    last_observed: &[usize],
    streak: &[usize],
    speed_ok: &[bool],
    secure: usize,
    cap: usize,
    coast_cap: usize,
    standoff: f64,
    meters_per_step: f64,
) -> Option<usize> {
    let plan = match &runtime.plan {
        Some(p) => p,
        None => {
            runtime.patrol_focus = None;
            return None;
        }
    };
    if let Some(tid) = plan.focus_at(plan_age) {
        runtime.patrol_focus = None;
        return Some(tid);
    }
    let here = runtime.pose.position();
    let slack = |tid: usize| {
        let deadline =
            patrol_deadline(tid, rollout_of, gamma, last_observed, step, coast_cap);
        let eta = travel_eta(
            here,
            state_position(&rollout_of[&tid].means[0]),
            standoff,
            meters_per_step,
        );
        deadline.saturating_sub(eta)
    };
    let mut banned = None;
    if let Some((tid, since)) = runtime.patrol_focus {
        if plan.sequence.contains(&tid) {
            let secured = slack(tid) >= secure
                && streak[tid] >= PATROL_RELEASE_STREAK
                && speed_ok[tid];
            let sweeping = runtime
                .sweep
                .as_ref()
                .is_some_and(|s| s.target_id == tid && s.count < SWEEP_ABANDON);
            if step.saturating_sub(since) >= cap && !sweeping {
                banned = Some(tid);
            } else if !secured {
                return Some(tid);
            }
        }
    }
    let pick = plan
        .sequence
        .iter()
        .copied()
        .filter(|&tid| Some(tid) != banned || plan.sequence.len() == 1)
        .min_by_key(|&tid| (slack(tid), tid));
    runtime.patrol_focus = pick.map(|tid| (tid, step));
    pick
}

struct RobotRuntime {
    pose: Pose,
    plan: Option<MonitoringPlan>,
    solution: Option<NmpcSolution>,
    /// Controls consumed from `solution` since its solve.
    cursor: usize,
    /// Targets this robot observes this step.
    selected: Vec<usize>,
    /// Sticky patrol pick: (target, step the commitment started).
    patrol_focus: Option<(usize, usize)>,
    /// On-station stall tracking for the reacquisition sweep.
    sweep: Option<SweepState>,
}

/// A robot parked at its focus target's believed position without
/// measurements is staring at a stale estimate: the target is somewhere
/// past sensing range of the belief. Counting such steps and, past a
/// trigger, steering the robot along an expanding orbit around the
/// believed position turns a permanent loss into a short search.
#[derive(Clone, Debug)]
struct SweepState {
    target_id: usize,
    /// Consecutive stalled steps (on station, focus unmeasured).
    count: usize,
    /// Orbit phase at sweep start, anchored at the robot's own bearing
    /// from the believed position so the search begins where the robot
    /// already is.
    phase: f64,
}

/// Stalled steps before the sweep engages. Short enough to catch a
/// freshly wrong belief while the target is still nearby, long enough to
/// ignore one-step sensing dropouts.
const STALL_TRIGGER: usize = 8;
/// On-station slack beyond the observation standoff.
const STALL_NEAR_SLACK: f64 = 0.75;
/// Orbit radius at the moment measurements stopped.
const SWEEP_RADIUS_0: f64 = 0.6;
/// Radius growth per unmeasured step; the annulus expands with the
/// reachable set of the unseen target.
const SWEEP_RADIUS_RATE: f64 = 0.05;
/// Orbit radius cap, past which the sweep just keeps circling.
const SWEEP_RADIUS_MAX: f64 = 3.0;
/// Orbit angular rate per step, sized so the tangential speed stays
/// within robot limits at the radius cap.
const SWEEP_ANGULAR_RATE: f64 = 0.065;
/// Sweep step at which the search switches from the orbit to road-axis
/// chase legs. Orbits cover the near field densely but a target fleeing
/// straight down a road outruns any annulus whose tangential speed is
/// bounded; from here the sweep runs the road instead.
const CHASE_START: usize = 50;
/// Waypoint advance per step during chase legs, under the robot speed
/// limit so the robot can trail the waypoint at its standoff.
const CHASE_PACE: f64 = 0.18;
/// First chase leg length; the near field was already orbit-swept.
const CHASE_LEG_0: f64 = 1.5;
/// Leg growth per reversal, covering the growing reachable set.
const CHASE_LEG_GROWTH: f64 = 1.25;
/// Leg cap, about one block of the road network.
const CHASE_LEG_MAX: f64 = 5.6;
/// Unmeasured-step count past which a fresh sweep skips the orbit phase:
/// the target is long gone from the near field.
const SWEEP_STALE: usize = 100000;
/// Sweep steps before the search is written off and the patrol moves on.
const SWEEP_ABANDON: usize = 160;
/// Planar range under which a measurement counts as a close fix for
/// streak purposes; noise terms are near their floor there.
const TIGHT_PLANAR_RANGE: f64 = 1.3;
/// Fraction of the uncertainty bound that routing plans against; see the
/// planning-bound comment at the routing solve.
const PLANNING_MARGIN: f64 = 0.25;

/// Signed road-axis offset after walking distance `q` through ping-pong
/// chase legs: out to the first leg's end, back through the anchor to the
/// far side, and so on, each leg longer than the last. `dir0` picks the
/// first leg's direction.
fn chase_offset(q: f64, dir0: f64) -> f64 {
    let mut rest = q.max(0.0);
    let mut from = 0.0f64;
    let mut sign = dir0;
    for m in 0..64 {
        let leg = (CHASE_LEG_0 + CHASE_LEG_GROWTH * m as f64).min(CHASE_LEG_MAX);
        let to = sign * leg;
        let len = (to - from).abs();
        if rest <= len || m == 63 {
            return from + (to - from).signum() * rest.min(len);
        }
        rest -= len;
        from = to;
        sign = -sign;
    }
    unreachable!()
}

/// Runs one episode of the full method.
pub fn run_episode(
    scenario: &Scenario,
    seed: u64,
    duration: Option<usize>,
) -> Result<EpisodeReport, ScenarioError> {
    run_variant(scenario, seed, duration, Variant::Full)
}

/// Runs one episode of an ablation baseline.
pub fn run_baseline(
    scenario: &Scenario,
    seed: u64,
    duration: Option<usize>,
    variant: Variant,
) -> Result<EpisodeReport, ScenarioError> {
    run_variant(scenario, seed, duration, variant)
}

pub fn run_variant(
    scenario: &Scenario,
    seed: u64,
    duration: Option<usize>,
    variant: Variant,
) -> Result<EpisodeReport, ScenarioError> {
    scenario.validate()?;
    let net = scenario.network()?;
    let spec = scenario.sensor_spec();
    let noise = scenario.process_noise();
    let bound = scenario.bound();
    let observer = IdealObserver::for_sensor(&spec);
    let bounds = ControlBounds {
        v_max: scenario.robots.v_max,
        omega_max: scenario.robots.omega_max,
    };
    let cfg = &scenario.coordinator;
    let duration = duration.unwrap_or(scenario.duration);
    let n = scenario.robots.count;
    let m = scenario.targets.count;
    let gamma = scenario.estimation.gamma;
    let dt = scenario.estimation.step_interval;
    let forks_enabled = variant != Variant::NoForks;

    let initial_targets = scenario.spawn_targets(&net);
    let mut beliefs = scenario.initial_beliefs(&initial_targets);
    let mut world = TruthWorld::new(initial_targets, scenario.speed_range(), seed);
    let mut trackers = vec![ForkTracker::new(); m];
    let mut robots: Vec<RobotRuntime> = scenario
        .spawn_robots(&net)
        .into_iter()
        .map(|pose| RobotRuntime {
            pose,
            plan: None,
            solution: None,
            cursor: 0,
            selected: Vec::new(),
            patrol_focus: None,
            sweep: None,
        })
        .collect();
    let mut active: BTreeSet<usize> = BTreeSet::new();
    if variant == Variant::NmpcOnly {
        // Fixed pairing: robot i monitors target i (mod M), fleet fully
        // active for the whole episode.
        active = (0..n).collect();
        for (i, r) in robots.iter_mut().enumerate() {
            r.plan = (m > 0).then(|| MonitoringPlan {
                robot_id: i,
                sequence: vec![i % m],
                schedule: vec![(0, usize::MAX)],
            });
        }
    }

    let mut plan_age = 0usize;
    let mut selection_changed = false;
    let mut uncovered_events = 0usize;
    let mut metrics: Vec<StepMetrics> = Vec::with_capacity(duration);
    let robot_ids: Vec<usize> = (0..n).collect();
    // Step each target was last measured; beliefs start exact at spawn.
    let mut last_observed = vec![0usize; m];
    // Consecutive steps each target has been measured, up to the last step.
    let mut streak = vec![0usize; m];
    // Posterior state at each target's most recent measurement: the last
    // place the target verifiably was (sweep anchor) and its velocity
    // there (first chase direction).
    let mut last_meas_pos: Vec<Vec2> = beliefs.iter().map(|b| b.position()).collect();
    let mut last_meas_vel: Vec<Vec2> =
        beliefs.iter().map(|b| state_velocity(&b.mean)).collect();

    for step in 0..duration {
        // Slow tick: rebuild plans and resize the active fleet.
        let mut routing_ms = 0.0;
        if variant.uses_routing()
            && reassignment_due(step, cfg.assignment_period, cfg.reassign, selection_changed)
        {
            let started = Instant::now();
            let target_ids: Vec<usize> = (0..m).collect();
            let rollouts: Vec<PriorRollout> = par_map(&target_ids, |&tid| {
                if forks_enabled {
                    prior_rollout(tid, &beliefs[tid], &net, &noise, cfg.assignment_horizon)
                } else {
                    prior_rollout_plain(tid, &beliefs[tid], &noise, cfg.assignment_horizon)
                }
            });
            let starts: Vec<[f64; 2]> = robots
                .iter()
                .map(|r| [r.pose.x, r.pose.y])
                .collect();
            // Plan service windows against a margin below the bound: the
            // Gaussian rollouts understate how fast uncertainty really
            // grows through intersections (branch and speed randomness is
            // folded into a single mixture), so windows built against the
            // raw bound close visits too late. The margin pulls every
            // deadline earlier and lets the solver enlist robots before
            // targets become urgent.
            let plan_bound = UncertaintyBound::new(bound.gamma * PLANNING_MARGIN);
            let built = build_instance(
                &rollouts,
                &plan_bound,
                &observer,
                &spec,
                &noise,
                &robot_ids,
                &starts,
                scenario.robots.routing_speed,
                spec.capacity,
            );
            let result = solve_mvrptw(&built.instance);
            uncovered_events += built.unserviceable.len() + result.uncovered.len();
            for r in robots.iter_mut() {
                r.plan = None;
            }
            for plan in result.plans {
                let id = plan.robot_id;
                robots[id].plan = Some(plan);
            }
            for (id, r) in robots.iter_mut().enumerate() {
                if !result.active_set.contains(&id) {
                    r.solution = None;
                    r.selected.clear();
                }
            }
            active = result.active_set;
            // Best-effort coverage: a target the solver could not place
            // would otherwise vanish from every sequence and grow without
            // bound, so hand it to the nearest active robot's patrol.
            let mut orphans: BTreeSet<usize> =
                built.unserviceable.iter().copied().collect();
            orphans.extend(result.uncovered.iter().copied());
            for tid in orphans {
                let pos = beliefs[tid].position();
                let nearest = active.iter().copied().min_by(|&a, &b| {
                    let da = (robots[a].pose.position() - pos).norm();
                    let db = (robots[b].pose.position() - pos).norm();
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                });
                let Some(rid) = nearest else { continue };
                let plan = robots[rid].plan.get_or_insert_with(|| MonitoringPlan {
                    robot_id: rid,
                    sequence: Vec::new(),
                    schedule: Vec::new(),
                });
                if !plan.sequence.contains(&tid) {
                    plan.sequence.push(tid);
                }
            }
            plan_age = 0;
            selection_changed = false;
            routing_ms = started.elapsed().as_secs_f64() * 1e3;
        }

        // Fast tick: one horizon solve per active robot, data-parallel.
        let mut nmpc_ms = 0.0;
        let mut focus_dbg: Vec<(usize, Option<usize>)> = Vec::new();
        let solve_now = step % cfg.control_period == 0;
        if solve_now {
            let started = Instant::now();
            let needed: Vec<usize> = {
                let mut s = BTreeSet::new();
                for &r in &active {
                    if let Some(plan) = &robots[r].plan {
                        s.extend(plan.sequence.iter().copied());
                    }
                }
                s.into_iter().collect()
            };
            // Rollouts reach the assignment horizon so deadline patrol sees
            // past the control horizon; the solver reads only the first
            // `control_horizon` steps.
            let lookahead = cfg.assignment_horizon.max(cfg.control_horizon);
            let control_rollouts: Vec<PriorRollout> = par_map(&needed, |&tid| {
                if forks_enabled {
                    prior_rollout(tid, &beliefs[tid], &net, &noise, lookahead)
                } else {
                    prior_rollout_plain(tid, &beliefs[tid], &noise, lookahead)
                }
            });
            let rollout_of: BTreeMap<usize, &PriorRollout> = needed
                .iter()
                .copied()
                .zip(control_rollouts.iter())
                .collect();
            let jobs: Vec<usize> = active.iter().copied().collect();
            // Commitment updates mutate per-robot state, so focus picks run
            // sequentially before the parallel solves.
            let secure = (cfg.assignment_horizon / 2).max(1);
            let cap = (cfg.assignment_period / 2).max(1);
            let coast_cap = (cfg.assignment_horizon * 7 / 10).max(1);
            // An estimate moving faster than any target can drive, or
            // slower than any target ever does (opposite fork branches
            // averaging to a standstill), is the signature of a belief
            // that cannot be extrapolated; releasing the robot then loses
            // the target.
            let speed_cap = scenario.targets.speed_max * 1.25 + 0.05;
            let speed_floor = scenario.targets.speed_min * 0.5;
            let speed_ok: Vec<bool> = beliefs
                .iter()
                .map(|b| {
                    let sp = state_velocity(&b.mean).norm();
                    (speed_floor..=speed_cap).contains(&sp)
                })
                .collect();
            let standoff = IdealObserver::for_sensor(&spec).standoff;
            let meters_per_step = scenario.robots.v_max * dt;
            let focuses: Vec<Option<usize>> = jobs
                .iter()
                .map(|&rid| {
                    focus_target(
                        &mut robots[rid],
                        step,
                        plan_age,
                        &rollout_of,
                        gamma,
                        &last_observed,
                        &streak,
                        &speed_ok,
                        secure,
                        cap,
                        coast_cap,
                        standoff,
                        meters_per_step,
                    )
                })
                .collect();
            let job_focus: Vec<(usize, Option<usize>)> =
                jobs.iter().copied().zip(focuses).collect();
            focus_dbg = job_focus.clone();
            // Reacquisition sweeps: a robot on station whose focus target
            // has stopped producing measurements is staring at a stale
            // estimate. Instead of hovering there, it searches around the
            // target's last measured position (the last place the target
            // verifiably was): first an orbit whose radius grows with the
            // time since that measurement, matching the unseen target's
            // reachable set, then ping-pong legs along the road axis the
            // target was on, since a road-following target outruns any
            // speed-bounded orbit. The search is injected as a synthetic
            // rollout whose means trace the path, so the solver needs no
            // extra machinery.
            let mut sweep_of: BTreeMap<usize, PriorRollout> = BTreeMap::new();
            for &(rid, focus) in &job_focus {
                let tid = match focus {
                    Some(tid) => tid,
                    None => {
                        robots[rid].sweep = None;
                        continue;
                    }
                };
                let center = last_meas_pos[tid];
                let unmeasured = step.saturating_sub(last_observed[tid]);
                let near = (robots[rid].pose.position() - beliefs[tid].position()).norm()
                    <= standoff + STALL_NEAR_SLACK;
                let offset = robots[rid].pose.position() - center;
                // A long-lost target lets the sweep begin while the robot
                // is still inbound, and skips the pointless orbit phase.
                let stale = unmeasured > SWEEP_STALE;
                let start = near || (stale && offset.norm() <= 4.0);
                let state = &mut robots[rid].sweep;
                if unmeasured == 0 || state.as_ref().is_some_and(|s| s.target_id != tid) {
                    *state = None;
                }
                if unmeasured > 0 {
                    match state {
                        Some(s) if s.count >= STALL_TRIGGER || near => s.count += 1,
                        Some(_) => *state = None,
                        None if start => {
                            *state = Some(SweepState {
                                target_id: tid,
                                count: if stale { CHASE_START } else { 1 },
                                phase: offset.y.atan2(offset.x),
                            });
                        }
                        None => {}
                    }
                }
                if let Some(s) = &robots[rid].sweep {
                    if s.count >= STALL_TRIGGER {
                        let axis = net.nearest_road_direction(center);
                        let dir0 = if last_meas_vel[tid].dot(&axis) < -0.05 {
                            -1.0
                        } else {
                            1.0
                        };
                        let mut synth = rollout_of[&tid].clone();
                        for (j, mean) in synth.means.iter_mut().enumerate() {
                            let ck = s.count + j;
                            let p = if ck < CHASE_START {
                                let radius = (SWEEP_RADIUS_0
                                    + SWEEP_RADIUS_RATE * (unmeasured + j) as f64)
                                    .min(SWEEP_RADIUS_MAX);
                                let angle = s.phase
                                    + SWEEP_ANGULAR_RATE * (ck - STALL_TRIGGER) as f64;
                                center + radius * Vec2::new(angle.cos(), angle.sin())
                            } else {
                                center + axis * chase_offset(
                                    CHASE_PACE * (ck - CHASE_START) as f64,
                                    dir0,
                                )
                            };
                            mean[0] = p.x;
                            mean[1] = p.y;
                            mean[2] = 0.0;
                            mean[3] = 0.0;
                        }
                        sweep_of.insert(rid, synth);
                    }
                }
            }
            if variant != Variant::MvrpOnly {
                let solutions = par_map(&job_focus, |&(rid, focus)| {
                    let r = &robots[rid];
                    let plan = r.plan.as_ref()?;
                    let targets: Vec<TargetRef> = plan
                        .sequence
                        .iter()
                        .map(|&tid| TargetRef {
                            target_id: tid,
                            rollout: if focus == Some(tid) {
                                sweep_of.get(&rid).unwrap_or(&rollout_of[&tid])
                            } else {
                                rollout_of[&tid]
                            },
                            gamma,
                            track_lambda: if focus == Some(tid) {
                                1.0
                            } else {
                                scenario.nmpc.background_lambda
                            },
                        })
                        .collect();
                    let problem = NmpcProblem {
                        horizon: cfg.control_horizon,
                        dt,
                        start: r.pose,
                        targets,
                        spec: &spec,
                        noise: &noise,
                        bounds,
                        effort_weights: (scenario.nmpc.effort_v, scenario.nmpc.effort_omega),
                        track_weight: scenario.nmpc.track_weight,
                    };
                    let warm = r
                        .solution
                        .as_ref()
                        .map(|s| shifted_warm(&s.controls, r.cursor));
                    Some(match variant {
                        Variant::NoBound => {
                            solve_unbounded(&problem, scenario.nmpc.det_weight, warm.as_deref())
                        }
                        _ => solve(&problem, warm.as_deref()),
                    })
                });
                for (&rid, solution) in jobs.iter().zip(solutions) {
                    if let Some(sol) = solution {
                        let prev: BTreeSet<usize> =
                            robots[rid].selected.iter().copied().collect();
                        let now: BTreeSet<usize> = sol.selected.iter().copied().collect();
                        if robots[rid].solution.is_some() && prev != now {
                            selection_changed = true;
                        }
                        robots[rid].selected = sol.selected.clone();
                        robots[rid].solution = Some(sol);
                        robots[rid].cursor = 0;
                    }
                }
            } else {
                // Routing-only baseline: scripted control, no solver.
                for (rid, focus) in job_focus {
                    let (plan, pose) = match &robots[rid].plan {
                        Some(p) => (p.clone(), robots[rid].pose),
                        None => continue,
                    };
                    let control = focus
                        .map(|tid| {
                            steer_toward(
                                &pose,
                                beliefs[tid].position(),
                                observer.standoff,
                                &bounds,
                                dt,
                            )
                        })
                        .unwrap_or(ControlInput::ZERO);
                    let mut selected: Vec<usize> = plan.sequence.clone();
                    selected.truncate(spec.capacity);
                    robots[rid].selected = selected;
                    robots[rid].solution = Some(NmpcSolution {
                        controls: vec![control; cfg.control_horizon],
                        states: Vec::new(),
                        selected: robots[rid].selected.clone(),
                        predicted_dets: Vec::new(),
                        status: crate::nmpc::SolveStatus::MaxIterations,
                        iterations: 0,
                        penalty_rounds: 0,
                        gradient_norm: f64::NAN,
                        max_violation: 0.0,
                        round_violations: Vec::new(),
                    });
                    robots[rid].cursor = 0;
                }
            }
            nmpc_ms = started.elapsed().as_secs_f64() * 1e3;
        }

        // Apply one control per active robot; inactive robots hold position.
        for rid in 0..n {
            if !active.contains(&rid) {
                continue;
            }
            let r = &mut robots[rid];
            let control = match &r.solution {
                Some(sol) => {
                    let u = sol.controls[r.cursor.min(sol.controls.len() - 1)];
                    r.cursor += 1;
                    u
                }
                None => ControlInput::ZERO,
            };
            r.pose = unicycle_step(&r.pose, control, dt);
        }

        // Truth advances, then active robots observe their selected targets
        // in ascending robot-id order.
        world.step(&net, &noise);
        let timestamp = (step + 1) as u64;
        let mut measurements: Vec<Measurement> = Vec::new();
        for rid in 0..n {
            if !active.contains(&rid) {
                continue;
            }
            for &tid in &robots[rid].selected {
                if let Some(meas) =
                    world.try_observe(&robots[rid].pose, &spec, rid, tid, timestamp)
                {
                    measurements.push(meas);
                }
            }
        }
        let measured_now: BTreeSet<usize> =
            measurements.iter().map(|m| m.target_id).collect();
        // Streaks count only close-range fixes: measurements taken near the
        // range limit carry the largest noise and the worst geometry, and
        // a run of them can "confirm" a corrupted velocity. A far fix keeps
        // the target observed but does not advance its streak.
        let tight_slant = (TIGHT_PLANAR_RANGE.powi(2) + spec.altitude.powi(2)).sqrt();
        let tight_now: BTreeSet<usize> = measurements
            .iter()
            .filter(|m| m.z[0] <= tight_slant)
            .map(|m| m.target_id)
            .collect();
        for tid in 0..m {
            if measured_now.contains(&tid) {
                last_observed[tid] = step + 1;
                if tight_now.contains(&tid) {
                    streak[tid] += 1;
                }
            } else {
                streak[tid] = 0;
            }
        }
        let poses: Vec<Pose> = robots.iter().map(|r| r.pose).collect();
        update_beliefs(
            &mut beliefs,
            &mut trackers,
            &measurements,
            &poses,
            &net,
            &noise,
            &spec,
            forks_enabled,
        );
        for &tid in &measured_now {
            last_meas_pos[tid] = beliefs[tid].position();
            last_meas_vel[tid] = state_velocity(&beliefs[tid].mean);
        }

        if std::env::var_os("ROADWATCH_TRACE").is_some() {
            let per_target: Vec<String> = beliefs
                .iter()
                .enumerate()
                .map(|(tid, b)| {
                    let truth = world.target(tid).position();
                    let err = (b.position() - truth).norm();
                    let seen = if measured_now.contains(&tid) { "*" } else { "" };
                    let verbose = std::env::var("ROADWATCH_TRACE")
                        .ok()
                        .and_then(|v| v.parse::<usize>().ok())
                        .is_some_and(|v| v == tid + 2);
                    if err > 1.0 || verbose {
                        format!(
                            "t{tid}{seen} det {:.3} err {:.2} bel({:.2},{:.2} v {:.2},{:.2}) true({:.2},{:.2})",
                            b.det(),
                            err,
                            b.mean[0],
                            b.mean[1],
                            b.mean[2],
                            b.mean[3],
                            truth.x,
                            truth.y
                        )
                    } else {
                        format!("t{tid}{seen} det {:.3} err {:.2}", b.det(), err)
                    }
                })
                .collect();
            let per_robot: Vec<String> = robots
                .iter()
                .enumerate()
                .filter(|(rid, _)| active.contains(rid))
                .map(|(rid, r)| {
                    let focus = focus_dbg
                        .iter()
                        .find(|(j, _)| *j == rid)
                        .and_then(|(_, f)| *f)
                        .map_or_else(|| "-".into(), |t| t.to_string());
                    let sweep = r
                        .sweep
                        .as_ref()
                        .map_or(String::new(), |s| format!(" S{}:{}", s.target_id, s.count));
                    format!(
                        "r{rid}@({:.1},{:.1}) f{focus}{sweep} sel {:?}",
                        r.pose.x, r.pose.y, r.selected
                    )
                })
                .collect();
            eprintln!(
                "step {step} meas {} | {} | {}",
                measurements.len(),
                per_target.join("  "),
                per_robot.join("  ")
            );
        }

        let dets: Vec<f64> = beliefs.iter().map(|b| b.det()).collect();
        let violations = dets.iter().filter(|&&d| d >= gamma).count();
        metrics.push(StepMetrics {
            step,
            dets,
            active_count: active.len(),
            assigned_counts: robots
                .iter()
                .map(|r| r.plan.as_ref().map_or(0, |p| p.sequence.len()))
                .collect(),
            violations,
            routing_ms,
            nmpc_ms,
        });
        plan_age += 1;
    }

    Ok(summarize(
        scenario, variant, seed, gamma, cfg.grace, metrics, uncovered_events, &robots,
    ))
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    scenario: &Scenario,
    variant: Variant,
    seed: u64,
    gamma: f64,
    grace: usize,
    metrics: Vec<StepMetrics>,
    uncovered_events: usize,
    robots: &[RobotRuntime],
) -> EpisodeReport {
    let steps = metrics.len();
    let m = scenario.targets.count;
    let mean_active = if steps == 0 {
        0.0
    } else {
        metrics.iter().map(|s| s.active_count as f64).sum::<f64>() / steps as f64
    };
    let post_grace: Vec<&StepMetrics> = metrics.iter().filter(|s| s.step >= grace).collect();
    let samples = post_grace.len() * m;
    let violating: usize = post_grace.iter().map(|s| s.violations).sum();
    let violation_fraction = if samples == 0 {
        0.0
    } else {
        violating as f64 / samples as f64
    };
    let routing_ms_total = metrics.iter().map(|s| s.routing_ms).sum();
    let nmpc_ms_total = metrics.iter().map(|s| s.nmpc_ms).sum();
    EpisodeReport {
        scenario: scenario.name.clone(),
        variant,
        seed,
        gamma,
        grace,
        mean_active,
        violation_fraction,
        zero_violations: violating == 0,
        success: violation_fraction <= 0.01,
        uncovered_events,
        routing_ms_total,
        nmpc_ms_total,
        final_poses: robots
            .iter()
            .map(|r| [r.pose.x, r.pose.y, r.pose.theta])
            .collect(),
        steps: metrics,
    }
}
