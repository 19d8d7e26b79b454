//! Per-robot trajectory optimization: drive a unicycle so that every
//! selected target's covariance determinant stays under its bound, at
//! minimal control effort.
//!
//! The covariance recursion inside the rollout mirrors the estimation layer
//! exactly, with one smoothing: the in-range measurement gate is a steep
//! logistic in the robot-target distance (saturating to exactly 0/1 away
//! from the boundary), so entering sensing range is differentiable for the
//! numerical optimizer. Target means are frozen at their current prediction;
//! only covariances respond to the hypothetical measurements.

use crate::estimation::{det4, IdealObserver, PriorRollout};
use crate::geometry::{wrap_angle, Pose, Vec2};
use crate::roadnet::ProcessNoise;
use crate::sensing::{linearize_clamped, noise_covariance_unchecked, SensorSpec};
use serde::{Deserialize, Serialize};

/// Logistic gate length scale, meters.
const GATE_SHARPNESS: f64 = 0.05;
/// Logistic arguments beyond this saturate to exactly 0 or 1.
const GATE_SATURATION: f64 = 18.0;
/// Central-difference step for the numerical gradient.
const FD_STEP: f64 = 1e-5;
const PENALTY_INIT: f64 = 1e4;
const PENALTY_ESCALATION: f64 = 10.0;
const PENALTY_ROUNDS: usize = 4;
const MAX_INNER_ITERATIONS: usize = 150;
const GRADIENT_TOLERANCE: f64 = 1e-4;
const ARMIJO_SLOPE: f64 = 1e-4;
const LBFGS_MEMORY: usize = 5;
/// Constraint values closer to the bound than this count as a kink for
/// gradient validation.
const KINK_TOLERANCE: f64 = 1e-9;
/// Fraction of the standoff distance below which the robot crowds the
/// target: bearing geometry degenerates near zero planar separation and
/// corrupts the filter, so the tracking cost repels the robot from there.
const CROWDING_RADIUS_FACTOR: f64 = 0.6;
/// Stiffness of the crowding repulsion relative to the standoff tracking
/// term.
const CROWDING_STIFFNESS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RobotStatus {
    Active,
    Inactive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose,
    pub status: RobotStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub v: f64,
    pub omega: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { v: 0.0, omega: 0.0 };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub v_max: f64,
    pub omega_max: f64,
}

impl ControlBounds {
    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            v: u.v.clamp(-self.v_max, self.v_max),
            omega: u.omega.clamp(-self.omega_max, self.omega_max),
        }
    }
}

/// One assigned target as the solver sees it.
pub struct TargetRef<'a> {
    pub target_id: usize,
    /// Measurement-free prediction over (at least) the control horizon.
    pub rollout: &'a PriorRollout,
    /// Determinant bound for this target.
    pub gamma: f64,
    /// Relative weight of the standoff-tracking pull toward this target.
    pub track_lambda: f64,
}

/// Per-robot optimization problem over one control horizon.
pub struct NmpcProblem<'a> {
    pub horizon: usize,
    /// Seconds per step.
    pub dt: f64,
    pub start: Pose,
    pub targets: Vec<TargetRef<'a>>,
    pub spec: &'a SensorSpec,
    pub noise: &'a ProcessNoise,
    pub bounds: ControlBounds,
    /// Diagonal control-effort weights (v, omega).
    pub effort_weights: (f64, f64),
    /// Global scale of the standoff-tracking term.
    pub track_weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct NmpcSolution {
    pub controls: Vec<ControlInput>,
    /// Robot poses, `horizon + 1` entries starting at the initial pose.
    pub states: Vec<Pose>,
    /// Selected target ids, capacity-limited, highest predicted risk first.
    pub selected: Vec<usize>,
    /// Per selected target: predicted determinant at each step (0..=horizon).
    pub predicted_dets: Vec<Vec<f64>>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub penalty_rounds: usize,
    pub gradient_norm: f64,
    /// Largest det excess over the bound anywhere in the prediction.
    pub max_violation: f64,
    /// Worst controllable violation per penalty round (monotonicity
    /// diagnostic).
    pub round_violations: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SolveTrace {
    pub entries: Vec<TraceEntry>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceEntry {
    pub round: usize,
    pub iteration: usize,
    pub objective: f64,
    pub violation: f64,
    pub gradient_norm: f64,
}

/// Exact unicycle step.
pub fn unicycle_step(pose: &Pose, u: ControlInput, dt: f64) -> Pose {
    Pose {
        x: pose.x + dt * u.v * pose.theta.cos(),
        y: pose.y + dt * u.v * pose.theta.sin(),
        theta: wrap_angle(pose.theta + dt * u.omega),
    }
}

/// Indices (into `problem.targets`) of the capacity-limited selection:
/// targets with the largest peak predicted determinant over the horizon,
/// ties to the lower target id.
pub fn select_targets(problem: &NmpcProblem) -> Vec<usize> {
    let mut peaks: Vec<(usize, f64)> = problem
        .targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let top = t.rollout.len().min(problem.horizon + 1);
            let peak = t.rollout.covs[..top]
                .iter()
                .map(det4)
                .fold(f64::NEG_INFINITY, f64::max);
            (i, peak)
        })
        .collect();
    peaks.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(problem.targets[a.0].target_id.cmp(&problem.targets[b.0].target_id))
    });
    let take = peaks.len().min(problem.spec.capacity);
    let mut sel: Vec<usize> = peaks[..take].iter().map(|&(i, _)| i).collect();
    sel.sort_unstable();
    sel
}

/// Smooth in-range measurement gate in [0, 1]; exactly 0 far outside the
/// range limit and exactly 1 well inside it.
fn gate(distance: f64, range_limit: f64) -> f64 {
    let arg = (range_limit - distance) / GATE_SHARPNESS;
    if arg >= GATE_SATURATION {
        1.0
    } else if arg <= -GATE_SATURATION {
        0.0
    } else {
        1.0 / (1.0 + (-arg).exp())
    }
}

/// Single-shooting evaluation of a control sequence.
#[derive(Clone, Debug)]
pub struct RolloutEval {
    /// Control effort plus standoff tracking (no penalty terms).
    pub cost: f64,
    pub states: Vec<Pose>,
    /// Per selected target (order of `selection`), dets at steps 0..=horizon.
    pub dets: Vec<Vec<f64>>,
    /// Sum of squared bound violations over steps >= 1 (the controllable
    /// part of the horizon).
    pub violation_sq: f64,
    /// Largest det excess anywhere, step 0 included.
    pub max_violation: f64,
    /// Largest det excess over steps >= 1.
    pub controllable_violation: f64,
}

/// Evaluates cost, predicted covariances, and constraint violations for
/// `controls` with the given target selection.
pub fn rollout_cost_and_constraints(
    problem: &NmpcProblem,
    selection: &[usize],
    controls: &[ControlInput],
) -> RolloutEval {
    assert_eq!(controls.len(), problem.horizon);
    for &i in selection {
        assert!(
            problem.targets[i].rollout.len() > problem.horizon,
            "rollout shorter than the control horizon"
        );
    }
    let standoff = IdealObserver::for_sensor(problem.spec).standoff;
    let (qv, qw) = problem.effort_weights;
    let mut states = Vec::with_capacity(problem.horizon + 1);
    states.push(problem.start);
    let mut covs: Vec<_> = selection
        .iter()
        .map(|&i| problem.targets[i].rollout.covs[0])
        .collect();
    let mut dets: Vec<Vec<f64>> = covs
        .iter()
        .map(|c| {
            let mut v = Vec::with_capacity(problem.horizon + 1);
            v.push(det4(c));
            v
        })
        .collect();
    let mut cost = 0.0;
    let mut violation_sq = 0.0;
    let mut max_violation = f64::NEG_INFINITY;
    let mut controllable_violation = f64::NEG_INFINITY;
    for (si, &i) in selection.iter().enumerate() {
        max_violation = max_violation.max(dets[si][0] - problem.targets[i].gamma);
    }
    for (t, &u) in controls.iter().enumerate() {
        let pose = unicycle_step(states.last().unwrap(), u, problem.dt);
        cost += qv * u.v * u.v + qw * u.omega * u.omega;
        for (si, &ti) in selection.iter().enumerate() {
            let target = &problem.targets[ti];
            let mean = &target.rollout.means[t + 1];
            let delta = Vec2::new(mean[0], mean[1]) - pose.position();
            let d = delta.norm();
            let s = gate(d, problem.spec.range_limit);
            let mut cov = {
                let g = problem.noise.transition();
                let mut c = g * covs[si] * g.transpose() + problem.noise.covariance();
                if let Some(spread) = target.rollout.fork_spreads.get(&(t + 1)) {
                    c += spread * (1.0 - s);
                }
                (c + c.transpose()) * 0.5
            };
            if s > 0.0 {
                let h = linearize_clamped(&pose, mean, problem.spec.altitude);
                let v = noise_covariance_unchecked(&pose, mean, problem.spec);
                if let Ok(updated) = crate::estimation::kalman_cov_update(&cov, &h, &v) {
                    cov = cov - (cov - updated) * s;
                    cov = (cov + cov.transpose()) * 0.5;
                }
            }
            covs[si] = cov;
            let det = det4(&cov);
            dets[si].push(det);
            let g = det - target.gamma;
            max_violation = max_violation.max(g);
            controllable_violation = controllable_violation.max(g);
            let excess = g.max(0.0);
            violation_sq += excess * excess;
            let slack = (d - standoff).max(0.0);
            let crowd = (CROWDING_RADIUS_FACTOR * standoff - d).max(0.0);
            cost += problem.track_weight
                * (target.track_lambda * slack * slack + CROWDING_STIFFNESS * crowd * crowd);
        }
        states.push(pose);
    }
    if selection.is_empty() {
        max_violation = 0.0;
        controllable_violation = 0.0;
    }
    RolloutEval {
        cost,
        states,
        dets,
        violation_sq,
        max_violation,
        controllable_violation,
    }
}

fn controls_from_vec(x: &[f64]) -> Vec<ControlInput> {
    x.chunks_exact(2)
        .map(|c| ControlInput { v: c[0], omega: c[1] })
        .collect()
}

fn project(x: &mut [f64], bounds: &ControlBounds) {
    for c in x.chunks_exact_mut(2) {
        c[0] = c[0].clamp(-bounds.v_max, bounds.v_max);
        c[1] = c[1].clamp(-bounds.omega_max, bounds.omega_max);
    }
}

/// Penalized objective and its pieces, as the inner solver sees them.
fn penalized<'p>(
    problem: &'p NmpcProblem,
    selection: &'p [usize],
    mu: f64,
) -> impl Fn(&[f64]) -> f64 + 'p {
    move |x: &[f64]| {
        let eval = rollout_cost_and_constraints(problem, selection, &controls_from_vec(x));
        eval.cost + mu * eval.violation_sq
    }
}

/// Central-difference gradient of `f`, the production gradient used by the
/// inner solver.
fn numerical_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let base = probe[i];
        probe[i] = base + step;
        let hi = f(&probe);
        probe[i] = base - step;
        let lo = f(&probe);
        probe[i] = base;
        g[i] = (hi - lo) / (2.0 * step);
    }
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Limited-memory quasi-Newton history.
struct Lbfgs {
    s: std::collections::VecDeque<Vec<f64>>,
    y: std::collections::VecDeque<Vec<f64>>,
    rho: std::collections::VecDeque<f64>,
}

impl Lbfgs {
    fn new() -> Self {
        Lbfgs {
            s: Default::default(),
            y: Default::default(),
            rho: Default::default(),
        }
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if self.s.len() == LBFGS_MEMORY {
                self.s.pop_front();
                self.y.pop_front();
                self.rho.pop_front();
            }
            self.rho.push_back(1.0 / sy);
            self.s.push_back(s);
            self.y.push_back(y);
        }
    }

    /// Two-loop recursion: approximate -H * grad.
    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = grad.to_vec();
        if self.s.is_empty() {
            for v in &mut q {
                *v = -*v;
            }
            return q;
        }
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = self.rho[i] * dot(&self.s[i], &q);
            for (qv, yv) in q.iter_mut().zip(&self.y[i]) {
                *qv -= alpha[i] * yv;
            }
        }
        let last = k - 1;
        let scale = dot(&self.s[last], &self.y[last]) / dot(&self.y[last], &self.y[last]);
        for v in &mut q {
            *v *= scale;
        }
        for i in 0..k {
            let beta = self.rho[i] * dot(&self.y[i], &q);
            for (qv, sv) in q.iter_mut().zip(&self.s[i]) {
                *qv += (alpha[i] - beta) * sv;
            }
        }
        for v in &mut q {
            *v = -*v;
        }
        q
    }
}

struct InnerResult {
    x: Vec<f64>,
    iterations: usize,
    projected_gradient_norm: f64,
}

/// Projected quasi-Newton descent with Armijo backtracking.
fn minimize<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: Vec<f64>,
    bounds: &ControlBounds,
    trace: &mut Option<(&mut SolveTrace, usize)>,
) -> InnerResult {
    let mut x = x0;
    project(&mut x, bounds);
    let mut fx = f(&x);
    let mut grad = numerical_gradient(f, &x, FD_STEP);
    let mut lbfgs = Lbfgs::new();
    let mut iterations = 0;
    let mut pg_norm = f64::INFINITY;
    for iter in 0..MAX_INNER_ITERATIONS {
        iterations = iter;
        let mut pg = x.clone();
        for (p, g) in pg.iter_mut().zip(&grad) {
            *p -= g;
        }
        project(&mut pg, bounds);
        for (p, xv) in pg.iter_mut().zip(&x) {
            *p -= xv;
        }
        pg_norm = norm(&pg);
        if let Some((t, round)) = trace {
            t.entries.push(TraceEntry {
                round: *round,
                iteration: iter,
                objective: fx,
                violation: f64::NAN,
                gradient_norm: pg_norm,
            });
        }
        if pg_norm < GRADIENT_TOLERANCE {
            break;
        }
        let mut improved = false;
        'directions: for attempt in 0..2 {
            let dir = if attempt == 0 {
                lbfgs.direction(&grad)
            } else {
                lbfgs.clear();
                grad.iter().map(|g| -g).collect()
            };
            let mut alpha = 1.0f64;
            while alpha >= 1e-10 {
                let mut cand: Vec<f64> = x
                    .iter()
                    .zip(&dir)
                    .map(|(xv, dv)| xv + alpha * dv)
                    .collect();
                project(&mut cand, bounds);
                let step: Vec<f64> = cand.iter().zip(&x).map(|(c, xv)| c - xv).collect();
                if norm(&step) < 1e-14 {
                    break;
                }
                let fc = f(&cand);
                if fc <= fx + ARMIJO_SLOPE * dot(&grad, &step) {
                    let new_grad = numerical_gradient(f, &cand, FD_STEP);
                    let yvec: Vec<f64> =
                        new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                    lbfgs.push(step, yvec);
                    let f_prev = fx;
                    x = cand;
                    fx = fc;
                    grad = new_grad;
                    improved = true;
                    if (f_prev - fx).abs() < 1e-12 * (1.0 + fx.abs()) {
                        iterations = iter + 1;
                        return InnerResult {
                            x,
                            iterations,
                            projected_gradient_norm: pg_norm,
                        };
                    }
                    break 'directions;
                }
                alpha *= 0.5;
            }
        }
        if !improved {
            break;
        }
    }
    InnerResult {
        x,
        iterations,
        projected_gradient_norm: pg_norm,
    }
}

/// Solves the horizon problem with an escalating penalty on determinant
/// violations. `warm_start` is used verbatim as the initial control guess
/// (callers in a receding-horizon loop pass the previous solution shifted by
/// one step).
pub fn solve(problem: &NmpcProblem, warm_start: Option<&[ControlInput]>) -> NmpcSolution {
    solve_traced(problem, warm_start, None)
}

pub fn solve_traced(
    problem: &NmpcProblem,
    warm_start: Option<&[ControlInput]>,
    mut trace: Option<&mut SolveTrace>,
) -> NmpcSolution {
    let selection = if problem.targets.is_empty() {
        Vec::new()
    } else {
        select_targets(problem)
    };
    let dim = 2 * problem.horizon;
    let mut x = vec![0.0; dim];
    if let Some(warm) = warm_start {
        for (i, u) in warm.iter().take(problem.horizon).enumerate() {
            x[2 * i] = u.v;
            x[2 * i + 1] = u.omega;
        }
    }
    project(&mut x, &problem.bounds);
    let mut mu = PENALTY_INIT;
    let mut iterations = 0;
    let mut rounds = 0;
    let mut grad_norm = f64::INFINITY;
    let mut round_violations = Vec::new();
    for round in 0..PENALTY_ROUNDS {
        rounds = round + 1;
        let objective = penalized(problem, &selection, mu);
        let mut tr = trace.as_deref_mut().map(|t| (t, round));
        let inner = minimize(&objective, x, &problem.bounds, &mut tr);
        x = inner.x;
        iterations += inner.iterations;
        grad_norm = inner.projected_gradient_norm;
        let eval = rollout_cost_and_constraints(problem, &selection, &controls_from_vec(&x));
        round_violations.push(eval.controllable_violation.max(0.0));
        if eval.controllable_violation <= 0.0 {
            break;
        }
        mu *= PENALTY_ESCALATION;
    }
    let controls = controls_from_vec(&x);
    let eval = rollout_cost_and_constraints(problem, &selection, &controls);
    let status = if eval.max_violation >= 0.0 {
        SolveStatus::Infeasible
    } else if grad_norm < GRADIENT_TOLERANCE {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIterations
    };
    NmpcSolution {
        controls,
        states: eval.states,
        selected: selection
            .iter()
            .map(|&i| problem.targets[i].target_id)
            .collect(),
        predicted_dets: eval.dets,
        status,
        iterations,
        penalty_rounds: rounds,
        gradient_norm: grad_norm,
        max_violation: eval.max_violation.max(0.0),
        round_violations,
    }
}

/// Ablation variant without determinant constraints: the objective instead
/// adds `det_weight` times the posterior determinants summed over the
/// horizon. One descent round, no penalty escalation. The status keeps its
/// usual meaning, so violated bounds still report [`SolveStatus::Infeasible`]
/// even though nothing enforces them here.
pub fn solve_unbounded(
    problem: &NmpcProblem,
    det_weight: f64,
    warm_start: Option<&[ControlInput]>,
) -> NmpcSolution {
    let selection = if problem.targets.is_empty() {
        Vec::new()
    } else {
        select_targets(problem)
    };
    let dim = 2 * problem.horizon;
    let mut x = vec![0.0; dim];
    if let Some(warm) = warm_start {
        for (i, u) in warm.iter().take(problem.horizon).enumerate() {
            x[2 * i] = u.v;
            x[2 * i + 1] = u.omega;
        }
    }
    project(&mut x, &problem.bounds);
    let objective = |x: &[f64]| {
        let eval = rollout_cost_and_constraints(problem, &selection, &controls_from_vec(x));
        let det_sum: f64 = eval
            .dets
            .iter()
            .map(|per_target| per_target[1..].iter().sum::<f64>())
            .sum();
        eval.cost + det_weight * det_sum
    };
    let inner = minimize(&objective, x, &problem.bounds, &mut None);
    let controls = controls_from_vec(&inner.x);
    let eval = rollout_cost_and_constraints(problem, &selection, &controls);
    let status = if eval.max_violation >= 0.0 {
        SolveStatus::Infeasible
    } else if inner.projected_gradient_norm < GRADIENT_TOLERANCE {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIterations
    };
    NmpcSolution {
        controls,
        states: eval.states,
        selected: selection
            .iter()
            .map(|&i| problem.targets[i].target_id)
            .collect(),
        predicted_dets: eval.dets,
        status,
        iterations: inner.iterations,
        penalty_rounds: 1,
        gradient_norm: inner.projected_gradient_norm,
        max_violation: eval.max_violation.max(0.0),
        round_violations: vec![eval.controllable_violation.max(0.0)],
    }
}

/// Gradient validation report.
#[derive(Clone, Debug)]
pub struct GradientReport {
    /// Max relative error between the production gradient and an independent
    /// finer-step central difference.
    pub max_relative_error: f64,
    /// Some constraint sits exactly at its bound: the penalty is
    /// nondifferentiable there and the error figure is unreliable.
    pub at_kink: bool,
}

/// Compares the production gradient (central differences at the solver's
/// step) against an independent finer central difference.
pub fn gradient_check(
    problem: &NmpcProblem,
    controls: &[ControlInput],
    penalty_mu: f64,
) -> GradientReport {
    let selection = select_targets(problem);
    let eval = rollout_cost_and_constraints(problem, &selection, controls);
    let at_kink = selection.iter().enumerate().any(|(si, &ti)| {
        eval.dets[si]
            .iter()
            .any(|d| (d - problem.targets[ti].gamma).abs() < KINK_TOLERANCE)
    });
    let f = penalized(problem, &selection, penalty_mu);
    let x: Vec<f64> = controls
        .iter()
        .flat_map(|u| [u.v, u.omega])
        .collect();
    let implemented = numerical_gradient(&f, &x, FD_STEP);
    let reference = numerical_gradient(&f, &x, FD_STEP / 10.0);
    let scale = norm(&reference).max(1e-12);
    let max_relative_error = implemented
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
        / scale;
    GradientReport {
        max_relative_error,
        at_kink,
    }
}
