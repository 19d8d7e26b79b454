//! Road network model and ground-truth target motion.
//!
//! Targets follow a constant-velocity model with Gaussian process noise, but
//! stay constrained to straight road segments between hubs. At each hub
//! crossing the next road is drawn uniformly among the non-reversal branches
//! and the per-road speed is resampled.

use crate::geometry::{state_velocity, Mat4, Vec2, Vec4};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Maximum distance from a target position to its current road segment.
pub const ON_ROAD_TOLERANCE: f64 = 0.05;

const MIN_ROAD_LENGTH: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum RoadNetworkError {
    #[error("road {road} references hub {hub}, but only {num_hubs} hubs exist")]
    BadHubIndex {
        road: usize,
        hub: usize,
        num_hubs: usize,
    },
    #[error("road {road} has coincident endpoints (length <= {MIN_ROAD_LENGTH})")]
    ZeroLengthRoad { road: usize },
    #[error("road {road} duplicates road {earlier}")]
    DuplicateRoad { road: usize, earlier: usize },
    #[error("network is not connected (hub {hub} unreachable from hub 0)")]
    Disconnected { hub: usize },
    #[error("hub {hub} has no incident road")]
    IsolatedHub { hub: usize },
    #[error("network has no hubs or no roads")]
    Empty,
    #[error("hub index {hub} out of range ({num_hubs} hubs)")]
    InvalidHub { hub: usize, num_hubs: usize },
}

/// Straight-segment road graph. Hubs are 2-D points; roads connect hub pairs.
#[derive(Clone, Debug)]
pub struct RoadNetwork {
    hubs: Vec<Vec2>,
    roads: Vec<(usize, usize)>,
    /// Sorted incident-road indices per hub.
    incident: Vec<Vec<usize>>,
    lengths: Vec<f64>,
    /// Unit vector from road endpoint 0 to endpoint 1.
    units: Vec<Vec2>,
}

impl RoadNetwork {
    pub fn new(hubs: Vec<[f64; 2]>, roads: Vec<(usize, usize)>) -> Result<Self, RoadNetworkError> {
        if hubs.is_empty() || roads.is_empty() {
            return Err(RoadNetworkError::Empty);
        }
        let hubs: Vec<Vec2> = hubs.iter().map(|h| Vec2::new(h[0], h[1])).collect();
        let mut incident = vec![Vec::new(); hubs.len()];
        let mut lengths = Vec::with_capacity(roads.len());
        let mut units = Vec::with_capacity(roads.len());
        for (i, &(a, b)) in roads.iter().enumerate() {
            for hub in [a, b] {
                if hub >= hubs.len() {
                    return Err(RoadNetworkError::BadHubIndex {
                        road: i,
                        hub,
                        num_hubs: hubs.len(),
                    });
                }
            }
            if let Some(earlier) = roads[..i]
                .iter()
                .position(|&(c, d)| (c, d) == (a, b) || (d, c) == (a, b))
            {
                return Err(RoadNetworkError::DuplicateRoad { road: i, earlier });
            }
            let delta = hubs[b] - hubs[a];
            let len = delta.norm();
            if len <= MIN_ROAD_LENGTH {
                return Err(RoadNetworkError::ZeroLengthRoad { road: i });
            }
            lengths.push(len);
            units.push(delta / len);
            incident[a].push(i);
            incident[b].push(i);
        }
        for (hub, inc) in incident.iter().enumerate() {
            if inc.is_empty() {
                return Err(RoadNetworkError::IsolatedHub { hub });
            }
        }
        let net = RoadNetwork {
            hubs,
            roads,
            incident,
            lengths,
            units,
        };
        net.check_connected()?;
        Ok(net)
    }

    fn check_connected(&self) -> Result<(), RoadNetworkError> {
        let mut seen = vec![false; self.hubs.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(h) = stack.pop() {
            for &r in &self.incident[h] {
                let (a, b) = self.roads[r];
                let other = if a == h { b } else { a };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(hub) => Err(RoadNetworkError::Disconnected { hub }),
            None => Ok(()),
        }
    }

    pub fn num_hubs(&self) -> usize {
        self.hubs.len()
    }

    pub fn num_roads(&self) -> usize {
        self.roads.len()
    }

    pub fn hub(&self, i: usize) -> Vec2 {
        self.hubs[i]
    }

    pub fn road(&self, i: usize) -> (usize, usize) {
        self.roads[i]
    }

    pub fn road_length(&self, i: usize) -> f64 {
        self.lengths[i]
    }

    /// Unit vector from road endpoint 0 to endpoint 1.
    pub fn road_unit(&self, i: usize) -> Vec2 {
        self.units[i]
    }

    pub fn incident_roads(&self, hub: usize) -> &[usize] {
        &self.incident[hub]
    }

    pub fn degree(&self, hub: usize) -> usize {
        self.incident[hub].len()
    }

    /// Hubs with degree >= 3 offer a genuine branch choice.
    pub fn is_intersection(&self, hub: usize) -> bool {
        self.degree(hub) >= 3
    }

    /// Unit direction along `road` pointing away from `hub`.
    pub fn direction_from(&self, road: usize, hub: usize) -> Vec2 {
        let (a, _) = self.roads[road];
        if a == hub {
            self.units[road]
        } else {
            -self.units[road]
        }
    }

    /// Endpoint of `road` opposite to `hub`.
    pub fn other_endpoint(&self, road: usize, hub: usize) -> usize {
        let (a, b) = self.roads[road];
        if a == hub {
            b
        } else {
            a
        }
    }

    /// Distance from `p` to the (finite) segment of `road`.
    pub fn distance_to_road(&self, road: usize, p: Vec2) -> f64 {
        let (a, _) = self.roads[road];
        let origin = self.hubs[a];
        let s = (p - origin).dot(&self.units[road]).clamp(0.0, self.lengths[road]);
        (p - (origin + self.units[road] * s)).norm()
    }

    /// Unit direction of the road nearest to `p`; ties resolved toward the
    /// lower road index.
    pub fn nearest_road_direction(&self, p: Vec2) -> Vec2 {
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..self.roads.len() {
            let d = self.distance_to_road(i, p);
            if d < best.0 {
                best = (d, i);
            }
        }
        self.units[best.1]
    }

    /// Closest hub within `margin` of `point`; ties resolved toward the lower
    /// hub index.
    pub fn nearest_hub(&self, point: Vec2, margin: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, h) in self.hubs.iter().enumerate() {
            let d = (point - h).norm();
            if d <= margin && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Unit vectors along each incident road leaving `hub`, paired with the
    /// road index, ordered by road index. When `arrival_road` is given and the
    /// hub has degree > 1, the arrival road is excluded (no mid-network
    /// reversal); a degree-1 hub always returns its single road (reversal).
    pub fn branch_directions(
        &self,
        hub: usize,
        arrival_road: Option<usize>,
    ) -> Result<Vec<(usize, Vec2)>, RoadNetworkError> {
        if hub >= self.hubs.len() {
            return Err(RoadNetworkError::InvalidHub {
                hub,
                num_hubs: self.hubs.len(),
            });
        }
        let inc = &self.incident[hub];
        let out = inc
            .iter()
            .filter(|&&r| inc.len() == 1 || arrival_road != Some(r))
            .map(|&r| (r, self.direction_from(r, hub)))
            .collect();
        Ok(out)
    }
}

/// Ground-truth state of one road-constrained target.
#[derive(Clone, Debug)]
pub struct TargetTruth {
    pub id: usize,
    /// `(px, py, vx, vy)` in meters and m/s.
    pub state: Vec4,
    pub current_road: usize,
    /// Per-road speed, resampled at each hub crossing.
    pub speed: f64,
}

impl TargetTruth {
    /// Places a target on `road` at `fraction` of its length, moving toward
    /// endpoint 1 when `forward` (endpoint 0 otherwise) at `speed`.
    pub fn on_road(
        id: usize,
        net: &RoadNetwork,
        road: usize,
        fraction: f64,
        forward: bool,
        speed: f64,
    ) -> Self {
        let (a, _) = net.road(road);
        let pos = net.hub(a) + net.road_unit(road) * (fraction * net.road_length(road));
        let dir = if forward {
            net.road_unit(road)
        } else {
            -net.road_unit(road)
        };
        let v = dir * speed;
        TargetTruth {
            id,
            state: Vec4::new(pos.x, pos.y, v.x, v.y),
            current_road: road,
            speed,
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.state[0], self.state[1])
    }
}

/// Discrete constant-velocity transition: `G = [I, hI; 0, I]` plus noise W.
#[derive(Clone, Debug)]
pub struct ProcessNoise {
    w: Mat4,
    h: f64,
    g: Mat4,
    w_sqrt: Mat4,
}

impl ProcessNoise {
    /// `w` must be symmetric positive semidefinite; `h > 0`.
    pub fn new(w: Mat4, h: f64) -> Self {
        assert!(h > 0.0, "sampling interval must be positive");
        let asym = (w - w.transpose()).norm();
        assert!(asym < 1e-9, "process noise covariance must be symmetric");
        let mut g = Mat4::identity();
        g[(0, 2)] = h;
        g[(1, 3)] = h;
        let eig = w.symmetric_eigen();
        for ev in eig.eigenvalues.iter() {
            assert!(*ev > -1e-9, "process noise covariance must be PSD");
        }
        let sqrt_vals = eig.eigenvalues.map(|ev| ev.max(0.0).sqrt());
        let w_sqrt = eig.eigenvectors * Mat4::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
        ProcessNoise { w, h, g, w_sqrt }
    }

    /// Standard discretized white-acceleration noise with intensity `q`.
    pub fn from_intensity(q: f64, h: f64) -> Self {
        assert!(q >= 0.0);
        let mut w = Mat4::zeros();
        let p = q * h * h * h / 3.0;
        let c = q * h * h / 2.0;
        let v = q * h;
        w[(0, 0)] = p;
        w[(1, 1)] = p;
        w[(2, 2)] = v;
        w[(3, 3)] = v;
        w[(0, 2)] = c;
        w[(2, 0)] = c;
        w[(1, 3)] = c;
        w[(3, 1)] = c;
        ProcessNoise::new(w, h)
    }

    pub fn covariance(&self) -> &Mat4 {
        &self.w
    }

    pub fn interval(&self) -> f64 {
        self.h
    }

    pub fn transition(&self) -> &Mat4 {
        &self.g
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec4 {
        let z = Vec4::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        self.w_sqrt * z
    }
}

/// Advances one target by one step: constant-velocity prediction plus noise,
/// re-projected onto the road, with seeded branch/speed draws at hub
/// crossings.
///
/// Random draws, in order: four standard normals for the process noise, then
/// per hub crossing a branch pick (only when more than one candidate road) and
/// a uniform speed from `speed_range`.
pub fn step_target<R: Rng>(
    truth: &TargetTruth,
    net: &RoadNetwork,
    noise: &ProcessNoise,
    speed_range: (f64, f64),
    rng: &mut R,
) -> TargetTruth {
    let noisy = noise.transition() * truth.state + noise.sample(rng);

    let mut road = truth.current_road;
    let mut speed = truth.speed;
    let (a0, _) = net.road(road);
    let mut toward_1 = state_velocity(&truth.state).dot(&net.road_unit(road)) >= 0.0;
    // Arc position along the road, measured from endpoint 0.
    let mut s = (Vec2::new(noisy[0], noisy[1]) - net.hub(a0)).dot(&net.road_unit(road));

    // A step is far shorter than any bundled road, so one crossing per step is
    // the norm; the loop guards against pathological noise.
    for _ in 0..8 {
        let len = net.road_length(road);
        let (ha, hb) = net.road(road);
        let (crossed_hub, overshoot) = if toward_1 && s > len {
            (hb, s - len)
        } else if !toward_1 && s < 0.0 {
            (ha, -s)
        } else {
            break;
        };
        let candidates: Vec<usize> = {
            let inc = net.incident_roads(crossed_hub);
            if inc.len() == 1 {
                inc.to_vec()
            } else {
                inc.iter().copied().filter(|&r| r != road).collect()
            }
        };
        let next = if candidates.len() > 1 {
            candidates[rng.gen_range(0..candidates.len())]
        } else {
            candidates[0]
        };
        speed = rng.gen_range(speed_range.0..=speed_range.1);
        let carried = overshoot.min(net.road_length(next));
        let (na, _) = net.road(next);
        if na == crossed_hub {
            toward_1 = true;
            s = carried;
        } else {
            toward_1 = false;
            s = net.road_length(next) - carried;
        }
        road = next;
    }
    let len = net.road_length(road);
    s = s.clamp(0.0, len);

    let (a, _) = net.road(road);
    let pos = net.hub(a) + net.road_unit(road) * s;
    let dir = if toward_1 {
        net.road_unit(road)
    } else {
        -net.road_unit(road)
    };
    let v = dir * speed;
    TargetTruth {
        id: truth.id,
        state: Vec4::new(pos.x, pos.y, v.x, v.y),
        current_road: road,
        speed,
    }
}
