//! Fleet sizing and routing: converts measurement-free belief rollouts into
//! a vehicle-routing instance with deadline windows and solves it with an
//! incremental-fleet heuristic.
//!
//! Each target becomes one service task: a location (predicted mean at the
//! window midpoint), a deadline on the service start (the step its
//! uncertainty determinant would cross the bound), and a service duration
//! sized so that after service the determinant stays below the bound through
//! the rest of the horizon. Robots are activated one at a time, closest
//! first, until the tasks can be covered.
//!
//! Scheduling semantics (shared by the solver and any external checker):
//! all tasks are ready at step 0 and windows constrain only the service
//! start, so as-soon-as-possible schedules are canonical. A route visits its
//! tasks in order; the first leg takes `ceil(dist / (speed * dt))` steps from
//! the robot start, later legs use the transit matrix; service occupies
//! `service_time` steps; a route is feasible when every non-urgent start is
//! at or before its deadline and the route holds at most `capacity` tasks.
//! Urgent tasks (already-violating targets) have their deadline waived and
//! pin the nearest available robot.

use crate::estimation::{det4, IdealObserver, PriorRollout, UncertaintyBound};
use crate::geometry::Vec2;
use crate::par::par_map_range;
use crate::roadnet::ProcessNoise;
use crate::sensing::SensorSpec;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Candidate service starts are sampled this many steps apart (the window
/// endpoints are always included).
pub const WINDOW_STRIDE: usize = 5;

/// Instances with at most this many tasks fall back to an exact search when
/// the insertion heuristic fails, so small-instance fleet sizes are minimal.
const EXACT_SEARCH_MAX_TASKS: usize = 8;

/// Node budget for the exact fallback search.
const EXACT_SEARCH_NODE_BUDGET: usize = 200_000;

/// Local-search pass cap.
const LOCAL_SEARCH_MAX_PASSES: usize = 200;

/// Service-start window of one task, in rollout-relative steps: starts are
/// admissible in `[0, latest_start]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub latest_start: usize,
    /// The bound is already violated at step 0; the window is collapsed and
    /// the task must be scheduled immediately.
    pub urgent: bool,
}

/// First step whose covariance determinant reaches the bound; never-crossing
/// rollouts get the last-but-one step as a conservative deadline.
pub fn compute_window(rollout: &PriorRollout, bound: &UncertaintyBound) -> Window {
    if rollout.det(0) >= bound.gamma {
        return Window {
            latest_start: 0,
            urgent: true,
        };
    }
    for k in 1..rollout.len() {
        if rollout.det(k) >= bound.gamma {
            return Window {
                latest_start: k,
                urgent: false,
            };
        }
    }
    Window {
        latest_start: rollout.len().saturating_sub(2),
        urgent: false,
    }
}

/// Candidate service-start steps: every `stride` steps through the window
/// plus the deadline itself.
fn sampled_starts(window: &Window, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=window.latest_start).step_by(stride.max(1)).collect();
    if *starts.last().unwrap() != window.latest_start {
        starts.push(window.latest_start);
    }
    starts
}

/// Earliest feasible service end for a given start: smallest `t_e` such that
/// the post-service covariance determinant stays below the bound through the
/// end of the rollout (post-window fork inflation included). `None` when no
/// end works.
fn earliest_feasible_end(
    rollout: &PriorRollout,
    start: usize,
    bound: &UncertaintyBound,
    observer: &IdealObserver,
    spec: &SensorSpec,
    noise: &ProcessNoise,
) -> Option<usize> {
    let last = rollout.len() - 1;
    'ends: for end in start..=last {
        let post = crate::estimation::posterior_rollout(rollout, (start, end), observer, spec, noise);
        for cov in post.iter().take(last + 1).skip(end) {
            if det4(cov) >= bound.gamma {
                continue 'ends;
            }
        }
        return Some(end);
    }
    None
}

/// Service duration covering the worst admissible start: for each sampled
/// start the earliest feasible end is found, and the longest such duration is
/// returned (at least 1 step). `None` flags an unserviceable target: no
/// admissible start admits any feasible end.
pub fn compute_service_time(
    rollout: &PriorRollout,
    window: &Window,
    bound: &UncertaintyBound,
    observer: &IdealObserver,
    spec: &SensorSpec,
    noise: &ProcessNoise,
) -> Option<usize> {
    let mut best: Option<usize> = None;
    for start in sampled_starts(window, WINDOW_STRIDE) {
        if let Some(end) = earliest_feasible_end(rollout, start, bound, observer, spec, noise) {
            let duration = (end - start).max(1);
            best = Some(best.map_or(duration, |b: usize| b.max(duration)));
        }
    }
    best
}

/// Travel steps for a straight-line distance at `speed` meters per second and
/// `dt` seconds per step, rounded up.
pub fn steps_for_distance(distance: f64, speed: f64, dt: f64) -> usize {
    ((distance / (speed * dt)) - 1e-9).ceil().max(0.0) as usize
}

fn mean_position(rollout: &PriorRollout, step: usize) -> Vec2 {
    let m = &rollout.means[step.min(rollout.len() - 1)];
    Vec2::new(m[0], m[1])
}

/// Conservative transit time from servicing `from` to starting `to`: the
/// worst straight-line travel time over sampled service-end times of `from`
/// and sampled service-start times of `to`.
pub fn compute_transit(
    from: &PriorRollout,
    from_window: &Window,
    from_service: usize,
    to: &PriorRollout,
    to_window: &Window,
    speed: f64,
    dt: f64,
) -> usize {
    let mut worst = 0usize;
    for s1 in sampled_starts(from_window, WINDOW_STRIDE) {
        let end1 = (s1 + from_service).min(from.len() - 1);
        let p1 = mean_position(from, end1);
        for s2 in sampled_starts(to_window, WINDOW_STRIDE) {
            let p2 = mean_position(to, s2);
            worst = worst.max(steps_for_distance((p1 - p2).norm(), speed, dt));
        }
    }
    worst
}

/// One target's monitoring demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceTask {
    pub target_id: usize,
    /// Predicted mean position at the window midpoint.
    pub location: [f64; 2],
    /// `(earliest, latest)` admissible service-start steps; earliest is 0.
    pub window: (usize, usize),
    pub service_time: usize,
    pub urgent: bool,
}

impl ServiceTask {
    fn location_vec(&self) -> Vec2 {
        Vec2::new(self.location[0], self.location[1])
    }
}

/// Vehicle-routing instance over one planning horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingInstance {
    pub tasks: Vec<ServiceTask>,
    /// `transit[i][j]`: steps to travel from the end of task `i` to the start
    /// of task `j`; generally asymmetric.
    pub transit: Vec<Vec<usize>>,
    pub robot_ids: Vec<usize>,
    pub robot_starts: Vec<[f64; 2]>,
    /// Average travel speed used by the routing layer, m/s.
    pub robot_speed: f64,
    /// Seconds per step.
    pub step_interval: f64,
    /// Maximum tasks per route (simultaneous-tracking capacity).
    pub capacity: usize,
    /// Steps in the planning horizon.
    pub horizon: usize,
}

/// Instance plus the targets that had to be left out because no service
/// window could restore their bound.
#[derive(Clone, Debug)]
pub struct BuiltInstance {
    pub instance: RoutingInstance,
    pub unserviceable: Vec<usize>,
}

/// Builds the routing instance from per-target rollouts. Per-target window
/// and service-time computation fans out data-parallel.
#[allow(clippy::too_many_arguments)]
pub fn build_instance(
    rollouts: &[PriorRollout],
    bound: &UncertaintyBound,
    observer: &IdealObserver,
    spec: &SensorSpec,
    noise: &ProcessNoise,
    robot_ids: &[usize],
    robot_starts: &[[f64; 2]],
    robot_speed: f64,
    capacity: usize,
) -> BuiltInstance {
    assert_eq!(robot_ids.len(), robot_starts.len());
    let horizon = rollouts.first().map_or(0, |r| r.len() - 1);
    for r in rollouts {
        assert_eq!(r.len() - 1, horizon, "rollouts must share one horizon");
    }
    let dt = noise.interval();
    let per_target = par_map_range(rollouts.len(), |i| {
        let window = compute_window(&rollouts[i], bound);
        let service = compute_service_time(&rollouts[i], &window, bound, observer, spec, noise);
        (window, service)
    });
    let mut tasks = Vec::new();
    let mut task_rollout = Vec::new();
    let mut unserviceable = Vec::new();
    for (i, (window, service)) in per_target.iter().enumerate() {
        match service {
            Some(service_time) => {
                let mid = window.latest_start / 2;
                let p = mean_position(&rollouts[i], mid);
                tasks.push(ServiceTask {
                    target_id: rollouts[i].target_id,
                    location: [p.x, p.y],
                    window: (0, window.latest_start),
                    service_time: *service_time,
                    urgent: window.urgent,
                });
                task_rollout.push(i);
            }
            None => unserviceable.push(rollouts[i].target_id),
        }
    }
    let windows: Vec<Window> = task_rollout
        .iter()
        .map(|&i| per_target[i].0)
        .collect();
    let transit = par_map_range(tasks.len(), |a| {
        (0..tasks.len())
            .map(|b| {
                if a == b {
                    0
                } else {
                    compute_transit(
                        &rollouts[task_rollout[a]],
                        &windows[a],
                        tasks[a].service_time,
                        &rollouts[task_rollout[b]],
                        &windows[b],
                        robot_speed,
                        dt,
                    )
                }
            })
            .collect()
    });
    BuiltInstance {
        instance: RoutingInstance {
            tasks,
            transit,
            robot_ids: robot_ids.to_vec(),
            robot_starts: robot_starts.to_vec(),
            robot_speed,
            step_interval: dt,
            capacity,
            horizon,
        },
        unserviceable,
    }
}

/// Robot indices ordered by minimum distance to any task location, ties
/// broken by index.
pub fn rank_robots(robot_starts: &[[f64; 2]], tasks: &[ServiceTask]) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = robot_starts
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = Vec2::new(s[0], s[1]);
            let d = tasks
                .iter()
                .map(|t| (t.location_vec() - p).norm())
                .fold(f64::INFINITY, f64::min);
            (i, d)
        })
        .collect();
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, _)| i).collect()
}

/// One robot's ordered monitoring plan; steps are rollout-relative.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitoringPlan {
    pub robot_id: usize,
    pub sequence: Vec<usize>,
    /// `(t_s, t_e)` per task in `sequence`.
    pub schedule: Vec<(usize, usize)>,
}

impl MonitoringPlan {
    /// Target currently in focus at `step`: the first task whose service has
    /// not yet ended (being serviced, or next up while in transit).
    pub fn focus_at(&self, step: usize) -> Option<usize> {
        self.schedule
            .iter()
            .position(|&(_, t_e)| step < t_e)
            .map(|i| self.sequence[i])
    }
}

/// Routing outcome: the minimal activated fleet and its plans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub active_set: BTreeSet<usize>,
    pub plans: Vec<MonitoringPlan>,
    /// Latest service end over all plans, steps.
    pub makespan: usize,
    /// Total travel steps over all plans (initial legs included).
    pub total_transit: usize,
    /// Targets no feasible plan could cover, ascending.
    pub uncovered: Vec<usize>,
    /// False when coverage is best-effort rather than complete.
    pub feasible: bool,
}

#[derive(Clone, Debug)]
struct RouteEval {
    schedule: Vec<(usize, usize)>,
    completion: usize,
    transit: usize,
}

struct Solver<'a> {
    inst: &'a RoutingInstance,
    /// Robot indices (into instance arrays) available to this attempt, rank
    /// order.
    subset: Vec<usize>,
    /// Per-route count of leading pinned (urgent) tasks local search must not
    /// move.
    pinned: Vec<usize>,
}

impl<'a> Solver<'a> {
    fn new(inst: &'a RoutingInstance, subset: Vec<usize>) -> Self {
        let pinned = vec![0; subset.len()];
        Solver {
            inst,
            subset,
            pinned,
        }
    }

    fn leg_steps(&self, slot: usize, prev: Option<usize>, task: usize) -> usize {
        match prev {
            Some(p) => self.inst.transit[p][task],
            None => {
                let s = self.inst.robot_starts[self.subset[slot]];
                let d = (Vec2::new(s[0], s[1]) - self.inst.tasks[task].location_vec()).norm();
                steps_for_distance(d, self.inst.robot_speed, self.inst.step_interval)
            }
        }
    }

    /// ASAP forward pass; `None` when a deadline or the capacity breaks.
    fn eval_route(&self, slot: usize, route: &[usize]) -> Option<RouteEval> {
        if route.len() > self.inst.capacity {
            return None;
        }
        let mut schedule = Vec::with_capacity(route.len());
        let mut t = 0usize;
        let mut transit = 0usize;
        let mut prev = None;
        for &ti in route {
            let task = &self.inst.tasks[ti];
            let travel = self.leg_steps(slot, prev, ti);
            let t_s = t + travel;
            if !task.urgent && t_s > task.window.1 {
                return None;
            }
            let t_e = t_s + task.service_time;
            schedule.push((t_s, t_e));
            transit += travel;
            t = t_e;
            prev = Some(ti);
        }
        Some(RouteEval {
            schedule,
            completion: t,
            transit,
        })
    }

    fn objective(evals: &[RouteEval]) -> (usize, usize) {
        let makespan = evals.iter().map(|e| e.completion).max().unwrap_or(0);
        let transit = evals.iter().map(|e| e.transit).sum();
        (makespan, transit)
    }

    /// Pins each urgent task (ascending target id) to the nearest still-free
    /// robot; overflow urgent tasks go back to the regular queue.
    fn pin_urgent(&mut self, routes: &mut [Vec<usize>], queue: &mut Vec<usize>) {
        let mut urgent: Vec<usize> = queue
            .iter()
            .copied()
            .filter(|&t| self.inst.tasks[t].urgent)
            .collect();
        urgent.sort_by_key(|&t| self.inst.tasks[t].target_id);
        let mut taken = vec![false; self.subset.len()];
        for &ti in &urgent {
            let loc = self.inst.tasks[ti].location_vec();
            let mut best: Option<(usize, f64)> = None;
            for (slot, &robot) in self.subset.iter().enumerate() {
                if taken[slot] {
                    continue;
                }
                let s = self.inst.robot_starts[robot];
                let d = (Vec2::new(s[0], s[1]) - loc).norm();
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((slot, d));
                }
            }
            if let Some((slot, _)) = best {
                routes[slot].insert(self.pinned[slot], ti);
                self.pinned[slot] += 1;
                taken[slot] = true;
                queue.retain(|&t| t != ti);
            }
        }
    }

    /// Cheapest feasible insertion of `ti`, lexicographic on (makespan,
    /// total transit, slot, position). Returns false when nothing fits.
    fn insert_cheapest(
        &self,
        routes: &mut [Vec<usize>],
        evals: &mut [Option<RouteEval>],
        ti: usize,
    ) -> bool {
        let base: Vec<usize> = evals
            .iter()
            .map(|e| e.as_ref().map_or(0, |e| e.completion))
            .collect();
        let base_transit: usize = evals
            .iter()
            .map(|e| e.as_ref().map_or(0, |e| e.transit))
            .sum();
        let mut best: Option<((usize, usize, usize, usize), RouteEval)> = None;
        for slot in 0..routes.len() {
            for pos in self.pinned[slot]..=routes[slot].len() {
                let mut cand = routes[slot].clone();
                cand.insert(pos, ti);
                if let Some(eval) = self.eval_route(slot, &cand) {
                    let makespan = base
                        .iter()
                        .enumerate()
                        .map(|(s, &c)| if s == slot { eval.completion } else { c })
                        .max()
                        .unwrap_or(eval.completion);
                    let transit = base_transit
                        - evals[slot].as_ref().map_or(0, |e| e.transit)
                        + eval.transit;
                    let key = (makespan, transit, slot, pos);
                    if best.as_ref().map_or(true, |(bk, _)| key < *bk) {
                        best = Some((key, eval));
                    }
                }
            }
        }
        match best {
            Some(((_, _, slot, pos), eval)) => {
                routes[slot].insert(pos, ti);
                evals[slot] = Some(eval);
                true
            }
            None => false,
        }
    }

    /// First-improvement local search (relocate, intra-route reversal,
    /// inter-route swap) on (makespan, total transit). Pinned prefixes stay.
    fn local_search(&self, routes: &mut Vec<Vec<usize>>) {
        let eval_all = |routes: &Vec<Vec<usize>>| -> Option<Vec<RouteEval>> {
            routes
                .iter()
                .enumerate()
                .map(|(s, r)| self.eval_route(s, r))
                .collect()
        };
        let Some(mut current) = eval_all(routes) else {
            return;
        };
        for _ in 0..LOCAL_SEARCH_MAX_PASSES {
            let score = Self::objective(&current);
            let mut improved = false;
            'moves: {
                // Relocate.
                for s1 in 0..routes.len() {
                    for i1 in self.pinned[s1]..routes[s1].len() {
                        for s2 in 0..routes.len() {
                            let max_pos = if s1 == s2 {
                                routes[s2].len() - 1
                            } else {
                                routes[s2].len()
                            };
                            for pos in self.pinned[s2]..=max_pos {
                                if s1 == s2 && pos == i1 {
                                    continue;
                                }
                                let mut cand = routes.clone();
                                let ti = cand[s1].remove(i1);
                                cand[s2].insert(pos, ti);
                                if let Some(evals) = eval_all(&cand) {
                                    if Self::objective(&evals) < score {
                                        *routes = cand;
                                        current = evals;
                                        improved = true;
                                        break 'moves;
                                    }
                                }
                            }
                        }
                    }
                }
                // Intra-route segment reversal.
                for s in 0..routes.len() {
                    let n = routes[s].len();
                    for i in self.pinned[s]..n {
                        for j in (i + 1)..n {
                            let mut cand = routes.clone();
                            cand[s][i..=j].reverse();
                            if let Some(evals) = eval_all(&cand) {
                                if Self::objective(&evals) < score {
                                    *routes = cand;
                                    current = evals;
                                    improved = true;
                                    break 'moves;
                                }
                            }
                        }
                    }
                }
                // Inter-route swap.
                for s1 in 0..routes.len() {
                    for s2 in (s1 + 1)..routes.len() {
                        for i1 in self.pinned[s1]..routes[s1].len() {
                            for i2 in self.pinned[s2]..routes[s2].len() {
                                let mut cand = routes.clone();
                                let a = cand[s1][i1];
                                cand[s1][i1] = cand[s2][i2];
                                cand[s2][i2] = a;
                                if let Some(evals) = eval_all(&cand) {
                                    if Self::objective(&evals) < score {
                                        *routes = cand;
                                        current = evals;
                                        improved = true;
                                        break 'moves;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }

    /// Depth-first exact cover over task-insertion choices; complete up to
    /// the node budget. Tasks are branched in deadline order.
    fn exact_cover(&self, routes: &mut Vec<Vec<usize>>, order: &[usize]) -> bool {
        let mut budget = EXACT_SEARCH_NODE_BUDGET;
        self.dfs(routes, order, 0, &mut budget)
    }

    fn dfs(
        &self,
        routes: &mut Vec<Vec<usize>>,
        order: &[usize],
        idx: usize,
        budget: &mut usize,
    ) -> bool {
        if idx == order.len() {
            return true;
        }
        let ti = order[idx];
        for slot in 0..routes.len() {
            for pos in self.pinned[slot]..=routes[slot].len() {
                if *budget == 0 {
                    return false;
                }
                *budget -= 1;
                routes[slot].insert(pos, ti);
                if self.eval_route(slot, &routes[slot]).is_some()
                    && self.dfs(routes, order, idx + 1, budget)
                {
                    return true;
                }
                routes[slot].remove(pos);
            }
        }
        false
    }

    /// Deadline-ordered task queue (urgent first via deadline 0), ties by
    /// target id.
    fn edf_queue(&self) -> Vec<usize> {
        let mut queue: Vec<usize> = (0..self.inst.tasks.len()).collect();
        queue.sort_by_key(|&t| {
            let task = &self.inst.tasks[t];
            (
                if task.urgent { 0 } else { task.window.1 },
                task.target_id,
            )
        });
        queue
    }

    /// Tries to cover every task with this robot subset. Greedy insertion,
    /// exact fallback on small instances, then local search.
    fn attempt(&mut self) -> Option<Vec<Vec<usize>>> {
        let mut routes = vec![Vec::new(); self.subset.len()];
        let mut queue = self.edf_queue();
        self.pin_urgent(&mut routes, &mut queue);
        let mut evals: Vec<Option<RouteEval>> = routes
            .iter()
            .enumerate()
            .map(|(s, r)| self.eval_route(s, r))
            .collect();
        if evals.iter().any(|e| e.is_none()) {
            return None;
        }
        let mut all_inserted = true;
        let mut greedy_routes = routes.clone();
        for &ti in &queue {
            if !self.insert_cheapest(&mut greedy_routes, &mut evals, ti) {
                all_inserted = false;
                break;
            }
        }
        let mut solution = if all_inserted {
            greedy_routes
        } else if self.inst.tasks.len() <= EXACT_SEARCH_MAX_TASKS {
            if !self.exact_cover(&mut routes, &queue) {
                return None;
            }
            routes
        } else {
            return None;
        };
        self.local_search(&mut solution);
        Some(solution)
    }

    /// Covers as many tasks as fit; returns routes plus uncovered tasks.
    fn best_effort(&mut self) -> (Vec<Vec<usize>>, Vec<usize>) {
        let mut routes = vec![Vec::new(); self.subset.len()];
        let mut remaining = self.edf_queue();
        self.pin_urgent(&mut routes, &mut remaining);
        for _ in 0..3 {
            let mut evals: Vec<Option<RouteEval>> = routes
                .iter()
                .enumerate()
                .map(|(s, r)| self.eval_route(s, r))
                .collect();
            let mut inserted_any = false;
            let mut still = Vec::new();
            for &ti in &remaining {
                if self.insert_cheapest(&mut routes, &mut evals, ti) {
                    inserted_any = true;
                } else {
                    still.push(ti);
                }
            }
            remaining = still;
            if !inserted_any || remaining.is_empty() {
                break;
            }
            self.local_search(&mut routes);
        }
        self.local_search(&mut routes);
        (routes, remaining)
    }
}

fn result_from_routes(
    inst: &RoutingInstance,
    solver: &Solver,
    routes: &[Vec<usize>],
    uncovered_tasks: &[usize],
    feasible: bool,
) -> AssignmentResult {
    let mut plans = Vec::new();
    let mut active_set = BTreeSet::new();
    let mut makespan = 0usize;
    let mut total_transit = 0usize;
    for (slot, route) in routes.iter().enumerate() {
        if route.is_empty() {
            continue;
        }
        let eval = solver
            .eval_route(slot, route)
            .expect("solver returned an infeasible route");
        let robot_id = inst.robot_ids[solver.subset[slot]];
        active_set.insert(robot_id);
        makespan = makespan.max(eval.completion);
        total_transit += eval.transit;
        plans.push(MonitoringPlan {
            robot_id,
            sequence: route.iter().map(|&t| inst.tasks[t].target_id).collect(),
            schedule: eval.schedule,
        });
    }
    plans.sort_by_key(|p| p.robot_id);
    let mut uncovered: Vec<usize> = uncovered_tasks
        .iter()
        .map(|&t| inst.tasks[t].target_id)
        .collect();
    uncovered.sort_unstable();
    AssignmentResult {
        active_set,
        plans,
        makespan,
        total_transit,
        uncovered,
        feasible,
    }
}

/// Solves the routing instance with an incremental fleet: robots join in
/// min-distance rank order until every task is covered; if even the full
/// fleet cannot cover everything, a best-effort maximal cover is returned
/// with the leftovers listed. Deterministic for identical instances.
pub fn solve_mvrptw(inst: &RoutingInstance) -> AssignmentResult {
    if inst.tasks.is_empty() {
        return AssignmentResult {
            active_set: BTreeSet::new(),
            plans: Vec::new(),
            makespan: 0,
            total_transit: 0,
            uncovered: Vec::new(),
            feasible: true,
        };
    }
    let ranked = rank_robots(&inst.robot_starts, &inst.tasks);
    for k in 1..=ranked.len() {
        let mut solver = Solver::new(inst, ranked[..k].to_vec());
        if let Some(routes) = solver.attempt() {
            return result_from_routes(inst, &solver, &routes, &[], true);
        }
    }
    let mut solver = Solver::new(inst, ranked.clone());
    let (routes, uncovered) = solver.best_effort();
    result_from_routes(inst, &solver, &routes, &uncovered, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mat4, Vec4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet};

    /// Rollout with prescribed determinant sequence (isotropic covariances)
    /// and a straight constant-velocity mean path.
    fn synthetic_rollout(dets: &[f64], start: [f64; 2], vel: [f64; 2], dt: f64) -> PriorRollout {
        PriorRollout {
            target_id: 0,
            means: (0..dets.len())
                .map(|k| {
                    Vec4::new(
                        start[0] + vel[0] * dt * k as f64,
                        start[1] + vel[1] * dt * k as f64,
                        vel[0],
                        vel[1],
                    )
                })
                .collect(),
            covs: dets
                .iter()
                .map(|d| Mat4::from_diagonal(&Vec4::from_element(d.powf(0.25))))
                .collect(),
            fork_steps: BTreeSet::new(),
            fork_spreads: BTreeMap::new(),
        }
    }

    fn bound() -> UncertaintyBound {
        UncertaintyBound::new(0.1)
    }

    fn default_spec() -> SensorSpec {
        SensorSpec {
            range_limit: 1.5,
            capacity: 5,
            altitude: 0.5,
            noise_base: (0.05, 0.02),
            noise_slope: (0.05, 0.05),
        }
    }

    #[test]
    fn window_geometric_growth_crosses_at_step_13() {
        let dets: Vec<f64> = (0..51).map(|t| 0.01 * 1.2f64.powi(t)).collect();
        let roll = synthetic_rollout(&dets, [0.0, 0.0], [0.0, 0.0], 0.1);
        let w = compute_window(&roll, &bound());
        assert_eq!(w.latest_start, 13);
        assert!(!w.urgent);
        // Oracle: explicit scan.
        let first = dets.iter().position(|&d| d >= 0.1).unwrap();
        assert_eq!(first, w.latest_start);
    }

    #[test]
    fn window_never_crossing_gets_conservative_deadline() {
        let dets = vec![0.05; 51];
        let roll = synthetic_rollout(&dets, [0.0, 0.0], [0.0, 0.0], 0.1);
        let w = compute_window(&roll, &bound());
        assert_eq!(w.latest_start, 49);
        assert!(!w.urgent);
    }

    #[test]
    fn window_already_violating_is_urgent() {
        let mut dets = vec![0.05; 20];
        dets[0] = 0.2;
        let roll = synthetic_rollout(&dets, [0.0, 0.0], [0.0, 0.0], 0.1);
        let w = compute_window(&roll, &bound());
        assert!(w.urgent);
        assert_eq!(w.latest_start, 0);
    }

    #[test]
    fn service_time_single_shot_with_zero_process_noise() {
        // Determinant would cross at step 9; with no process noise one ideal
        // measurement suffices for the rest of the horizon from any start.
        let dets: Vec<f64> = (0..31).map(|t| 0.02 * 1.2f64.powi(t)).collect();
        let roll = synthetic_rollout(&dets, [0.0, 0.0], [0.4, 0.0], 0.1);
        let w = compute_window(&roll, &bound());
        assert_eq!(w.latest_start, 9);
        let noise = ProcessNoise::new(Mat4::zeros(), 0.1);
        let spec = default_spec();
        let obs = IdealObserver::for_sensor(&spec);
        let tm = compute_service_time(&roll, &w, &bound(), &obs, &spec, &noise).unwrap();
        assert_eq!(tm, 1);
    }

    #[test]
    fn service_time_extends_past_scheduled_fork() {
        // A big fork inflation at step 15 forces every service to span it:
        // ending earlier re-inflates the determinant above the bound.
        let dets: Vec<f64> = (0..31).map(|t| 0.02 * 1.2f64.powi(t)).collect();
        let mut roll = synthetic_rollout(&dets, [0.0, 0.0], [0.4, 0.0], 0.1);
        roll.fork_steps.insert(15);
        roll.fork_spreads
            .insert(15, Mat4::from_diagonal(&Vec4::from_element(10.0)));
        let w = compute_window(&roll, &bound());
        let noise = ProcessNoise::new(Mat4::zeros(), 0.1);
        let spec = default_spec();
        let obs = IdealObserver::for_sensor(&spec);
        let tm = compute_service_time(&roll, &w, &bound(), &obs, &spec, &noise).unwrap();
        assert_eq!(tm, 15, "must span the fork from the earliest start");

        // Oracle: exhaustive scan over all (start, end) pairs.
        let mut oracle_best = 0usize;
        for start in sampled_starts(&w, WINDOW_STRIDE) {
            for end in start..roll.len() {
                let post = crate::estimation::posterior_rollout(
                    &roll,
                    (start, end),
                    &obs,
                    &spec,
                    &noise,
                );
                if post[end..].iter().all(|c| det4(c) < 0.1) {
                    oracle_best = oracle_best.max((end - start).max(1));
                    break;
                }
            }
        }
        assert_eq!(tm, oracle_best);
    }

    #[test]
    fn service_time_unserviceable_when_sensor_too_weak() {
        let dets: Vec<f64> = (0..31).map(|t| 0.02 * 1.2f64.powi(t)).collect();
        let roll = synthetic_rollout(&dets, [0.0, 0.0], [0.4, 0.0], 0.1);
        let w = compute_window(&roll, &bound());
        // Strong process noise, almost uninformative sensor: no end works.
        let noise = ProcessNoise::from_intensity(5.0, 0.1);
        let spec = SensorSpec {
            noise_base: (50.0, 3.0),
            noise_slope: (0.0, 0.0),
            ..default_spec()
        };
        let obs = IdealObserver::for_sensor(&spec);
        assert_eq!(
            compute_service_time(&roll, &w, &bound(), &obs, &spec, &noise),
            None
        );
    }

    #[test]
    fn transit_examples() {
        let dt = 0.1;
        let still = |p: [f64; 2]| synthetic_rollout(&vec![0.01; 51], p, [0.0, 0.0], dt);
        let w = Window {
            latest_start: 49,
            urgent: false,
        };
        // Coincident predicted positions.
        assert_eq!(
            compute_transit(&still([2.0, 2.0]), &w, 3, &still([2.0, 2.0]), &w, 1.0, dt),
            0
        );
        // Static targets 3 m apart at 1 m/s and 0.1 s steps.
        assert_eq!(
            compute_transit(&still([0.0, 0.0]), &w, 3, &still([3.0, 0.0]), &w, 1.0, dt),
            30
        );
    }

    #[test]
    fn transit_diverging_targets_matches_grid_scan_oracle() {
        let dt = 0.1;
        let a = synthetic_rollout(&vec![0.01; 51], [0.0, 0.0], [0.5, 0.0], dt);
        let b = synthetic_rollout(&vec![0.01; 51], [0.0, 3.0], [-0.5, 0.0], dt);
        let wa = Window {
            latest_start: 30,
            urgent: false,
        };
        let wb = Window {
            latest_start: 20,
            urgent: false,
        };
        let service = 4;
        let got = compute_transit(&a, &wa, service, &b, &wb, 1.5, dt);
        let mut oracle = 0usize;
        for s1 in sampled_starts(&wa, WINDOW_STRIDE) {
            for s2 in sampled_starts(&wb, WINDOW_STRIDE) {
                let p1 = mean_position(&a, (s1 + service).min(50));
                let p2 = mean_position(&b, s2);
                oracle = oracle.max(steps_for_distance((p1 - p2).norm(), 1.5, dt));
            }
        }
        assert_eq!(got, oracle);
        // At least as conservative as the mid-window estimate.
        let mid = steps_for_distance(
            (mean_position(&a, 15) - mean_position(&b, 10)).norm(),
            1.5,
            dt,
        );
        assert!(got >= mid);
    }

    fn quick_task(id: usize, loc: [f64; 2], latest: usize, service: usize) -> ServiceTask {
        ServiceTask {
            target_id: id,
            location: loc,
            window: (0, latest),
            service_time: service,
            urgent: false,
        }
    }

    fn instance_from(
        tasks: Vec<ServiceTask>,
        robot_starts: Vec<[f64; 2]>,
        capacity: usize,
    ) -> RoutingInstance {
        let n = tasks.len();
        let speed = 1.0;
        let dt = 1.0;
        let transit = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let a = tasks[i].location_vec();
                        let b = tasks[j].location_vec();
                        steps_for_distance((a - b).norm(), speed, dt)
                    })
                    .collect()
            })
            .collect();
        RoutingInstance {
            robot_ids: (0..robot_starts.len()).collect(),
            robot_starts,
            robot_speed: speed,
            step_interval: dt,
            capacity,
            horizon: 200,
            tasks,
            transit,
        }
    }

    #[test]
    fn rank_robots_examples_and_sort_oracle() {
        let tasks = vec![quick_task(0, [0.0, 0.0], 10, 1)];
        let order = rank_robots(&[[1.0, 0.0], [2.0, 0.0]], &tasks);
        assert_eq!(order, vec![0, 1]);
        let order = rank_robots(&[[2.0, 0.0], [1.0, 0.0]], &tasks);
        assert_eq!(order, vec![1, 0]);
        // Equal distances break toward the lower index.
        let order = rank_robots(&[[0.0, 2.0], [2.0, 0.0]], &tasks);
        assert_eq!(order, vec![0, 1]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tasks: Vec<ServiceTask> = (0..4)
            .map(|i| {
                quick_task(
                    i,
                    [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)],
                    20,
                    2,
                )
            })
            .collect();
        let starts: Vec<[f64; 2]> = (0..5)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let got = rank_robots(&starts, &tasks);
        let mut oracle: Vec<(usize, f64)> = starts
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let p = Vec2::new(s[0], s[1]);
                let d = tasks
                    .iter()
                    .map(|t| (t.location_vec() - p).norm())
                    .fold(f64::INFINITY, f64::min);
                (i, d)
            })
            .collect();
        oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(got, oracle.into_iter().map(|(i, _)| i).collect::<Vec<_>>());
    }

    #[test]
    fn single_robot_serves_two_sequential_windows() {
        // Deadlines 5 and 60, transit 4 steps between them, fits the gap.
        let inst = instance_from(
            vec![
                quick_task(0, [2.0, 0.0], 5, 3),
                quick_task(1, [6.0, 0.0], 60, 3),
            ],
            vec![[0.0, 0.0], [20.0, 20.0]],
            5,
        );
        let res = solve_mvrptw(&inst);
        assert!(res.feasible);
        assert_eq!(res.active_set.len(), 1);
        assert_eq!(res.plans[0].sequence, vec![0, 1]);
        let sched = &res.plans[0].schedule;
        assert_eq!(sched[0], (2, 5));
        assert_eq!(sched[1], (9, 12));
        assert_eq!(res.makespan, 12);
    }

    #[test]
    fn tight_parallel_windows_need_two_robots() {
        let inst = instance_from(
            vec![
                quick_task(0, [0.0, 1.0], 3, 2),
                quick_task(1, [10.0, 1.0], 3, 2),
            ],
            vec![[0.0, 0.0], [10.0, 0.0]],
            5,
        );
        let res = solve_mvrptw(&inst);
        assert!(res.feasible);
        assert_eq!(res.active_set.len(), 2);
        for plan in &res.plans {
            assert_eq!(plan.sequence.len(), 1);
        }
    }

    #[test]
    fn zero_tasks_returns_empty_active_set() {
        let inst = instance_from(vec![], vec![[0.0, 0.0]], 5);
        let res = solve_mvrptw(&inst);
        assert!(res.feasible);
        assert!(res.active_set.is_empty());
        assert!(res.plans.is_empty());
        assert_eq!(res.makespan, 0);
    }

    #[test]
    fn urgent_task_pins_nearest_robot_first() {
        let mut urgent = quick_task(2, [5.0, 5.0], 0, 2);
        urgent.urgent = true;
        let inst = instance_from(
            vec![
                quick_task(0, [0.0, 2.0], 50, 2),
                quick_task(1, [1.0, 3.0], 50, 2),
                urgent,
            ],
            vec![[0.0, 0.0], [5.0, 4.0]],
            5,
        );
        let res = solve_mvrptw(&inst);
        assert!(res.feasible);
        // Robot 1 is nearest to the urgent task and must serve it first.
        let plan1 = res.plans.iter().find(|p| p.robot_id == 1).unwrap();
        assert_eq!(plan1.sequence[0], 2);
    }

    #[test]
    fn capacity_cap_limits_route_sizes() {
        let tasks: Vec<ServiceTask> = (0..4)
            .map(|i| quick_task(i, [i as f64, 0.0], 100, 2))
            .collect();
        let inst = instance_from(tasks, vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 2);
        let res = solve_mvrptw(&inst);
        assert!(res.feasible);
        assert!(res.active_set.len() >= 2);
        for plan in &res.plans {
            assert!(plan.sequence.len() <= 2);
        }
        let covered: BTreeSet<usize> = res
            .plans
            .iter()
            .flat_map(|p| p.sequence.iter().copied())
            .collect();
        assert_eq!(covered.len(), 4);
    }

    #[test]
    fn overconstrained_instance_reports_uncovered_targets() {
        // Three tight far-apart tasks, two robots, capacity 1.
        let inst = instance_from(
            vec![
                quick_task(0, [0.0, 1.0], 2, 2),
                quick_task(1, [30.0, 1.0], 2, 2),
                quick_task(2, [60.0, 1.0], 2, 2),
            ],
            vec![[0.0, 0.0], [30.0, 0.0]],
            1,
        );
        let res = solve_mvrptw(&inst);
        assert!(!res.feasible);
        assert_eq!(res.uncovered.len(), 1);
        let covered: BTreeSet<usize> = res
            .plans
            .iter()
            .flat_map(|p| p.sequence.iter().copied())
            .collect();
        assert_eq!(covered.len(), 2);
        assert!(!covered.contains(&res.uncovered[0]));
    }

    #[test]
    fn schedules_respect_windows_transit_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n_tasks = rng.gen_range(1..=6);
            let tasks: Vec<ServiceTask> = (0..n_tasks)
                .map(|i| {
                    quick_task(
                        i,
                        [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)],
                        rng.gen_range(10..80),
                        rng.gen_range(1..5),
                    )
                })
                .collect();
            let starts: Vec<[f64; 2]> = (0..3)
                .map(|_| [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)])
                .collect();
            let inst = instance_from(tasks, starts, 4);
            let res = solve_mvrptw(&inst);
            let task_by_id = |id: usize| inst.tasks.iter().find(|t| t.target_id == id).unwrap();
            for plan in &res.plans {
                assert_eq!(plan.sequence.len(), plan.schedule.len());
                assert!(plan.sequence.len() <= inst.capacity);
                let mut prev_end = None;
                let mut prev_task: Option<usize> = None;
                for (&tid, &(t_s, t_e)) in plan.sequence.iter().zip(&plan.schedule) {
                    let task = task_by_id(tid);
                    assert!(task.urgent || t_s <= task.window.1, "start in window");
                    assert_eq!(t_e - t_s, task.service_time);
                    if let (Some(pe), Some(pt)) = (prev_end, prev_task) {
                        let ti = inst.tasks.iter().position(|t| t.target_id == pt).unwrap();
                        let tj = inst.tasks.iter().position(|t| t.target_id == tid).unwrap();
                        assert!(t_s >= pe + inst.transit[ti][tj], "transit respected");
                    }
                    prev_end = Some(t_e);
                    prev_task = Some(tid);
                }
            }
            // Determinism.
            assert_eq!(res, solve_mvrptw(&inst));
        }
    }

    #[test]
    fn adding_a_robot_never_grows_the_fleet() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let n_tasks = rng.gen_range(1..=5);
            let tasks: Vec<ServiceTask> = (0..n_tasks)
                .map(|i| {
                    quick_task(
                        i,
                        [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)],
                        rng.gen_range(8..40),
                        rng.gen_range(1..4),
                    )
                })
                .collect();
            let mut starts: Vec<[f64; 2]> = (0..2)
                .map(|_| [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)])
                .collect();
            let small = solve_mvrptw(&instance_from(tasks.clone(), starts.clone(), 4));
            starts.push([rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)]);
            let large = solve_mvrptw(&instance_from(tasks, starts, 4));
            if small.feasible {
                assert!(large.feasible);
                assert!(large.active_set.len() <= small.active_set.len());
            }
        }
    }

    #[test]
    fn focus_at_walks_the_schedule() {
        let plan = MonitoringPlan {
            robot_id: 0,
            sequence: vec![4, 7],
            schedule: vec![(2, 5), (9, 12)],
        };
        assert_eq!(plan.focus_at(0), Some(4));
        assert_eq!(plan.focus_at(4), Some(4));
        assert_eq!(plan.focus_at(5), Some(7));
        assert_eq!(plan.focus_at(11), Some(7));
        assert_eq!(plan.focus_at(12), None);
    }
}
