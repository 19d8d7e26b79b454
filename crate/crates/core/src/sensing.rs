//! Active range-and-bearing sensing with state-dependent noise.
//!
//! A robot only obtains measurements inside its planar range limit. Noise
//! standard deviations grow linearly with distance (range channel) and with
//! bearing magnitude (bearing channel); the covariance is diagonal.

use crate::geometry::{wrap_angle, Mat2, Mat2x4, Pose, Vec2, Vec4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Geometry closer than this to the sensor is treated as singular for
/// linearization; callers fall back to [`linearize_clamped`].
pub const MIN_LINEARIZE_DISTANCE: f64 = 1e-6;

/// Planar distance substituted by [`linearize_clamped`] for near-singular
/// geometry (robot almost directly above the target).
pub const LINEARIZE_CLAMP_DISTANCE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum SensingError {
    #[error("robot-target geometry is singular (planar distance {distance:.3e} m)")]
    SingularGeometry { distance: f64 },
    #[error("invalid sensor parameter {field}: {value}")]
    BadParameter { field: &'static str, value: f64 },
}

/// Per-robot sensor parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    /// Planar sensing radius in meters; no measurement at or beyond it.
    pub range_limit: f64,
    /// Maximum number of targets tracked simultaneously.
    pub capacity: usize,
    /// Fixed flight altitude folded into the range reading.
    pub altitude: f64,
    /// Base standard deviations `(sigma_r0, sigma_b0)` in meters / radians.
    pub noise_base: (f64, f64),
    /// Linear growth `(alpha_r, alpha_b)` of the standard deviations with
    /// distance and bearing magnitude.
    pub noise_slope: (f64, f64),
}

impl SensorSpec {
    pub fn validate(&self) -> Result<(), SensingError> {
        let checks = [
            ("range_limit", self.range_limit, self.range_limit > 0.0),
            ("altitude", self.altitude, self.altitude >= 0.0),
            ("noise_base.0", self.noise_base.0, self.noise_base.0 > 0.0),
            ("noise_base.1", self.noise_base.1, self.noise_base.1 > 0.0),
            ("noise_slope.0", self.noise_slope.0, self.noise_slope.0 >= 0.0),
            ("noise_slope.1", self.noise_slope.1, self.noise_slope.1 >= 0.0),
        ];
        for (field, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(SensingError::BadParameter { field, value });
            }
        }
        if self.capacity == 0 {
            return Err(SensingError::BadParameter {
                field: "capacity",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// One range-and-bearing observation of a known target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub robot_id: usize,
    pub target_id: usize,
    /// `(range m, bearing rad)`, bearing in `(-pi, pi]` relative to the robot
    /// heading.
    pub z: Vec2,
    pub timestamp: u64,
}

/// Noise-free measurement function `h`: slant range and robot-relative
/// bearing of `target` seen from `pose`.
pub fn predict_measurement(pose: &Pose, target: Vec2, altitude: f64) -> Vec2 {
    let delta = target - pose.position();
    let d = delta.norm();
    let range = (d * d + altitude * altitude).sqrt();
    let bearing = wrap_angle(delta.y.atan2(delta.x) - pose.theta);
    Vec2::new(range, bearing)
}

/// Samples a measurement of the target at `target`, or `None` when the planar
/// distance reaches the range limit.
pub fn observe<R: Rng>(
    pose: &Pose,
    target: Vec2,
    spec: &SensorSpec,
    robot_id: usize,
    target_id: usize,
    timestamp: u64,
    rng: &mut R,
) -> Option<Measurement> {
    let d = (target - pose.position()).norm();
    if d >= spec.range_limit {
        return None;
    }
    let mean = predict_measurement(pose, target, spec.altitude);
    let (sr, sb) = noise_stddevs(d, mean.y, spec);
    let nr: f64 = rng.sample(StandardNormal);
    let nb: f64 = rng.sample(StandardNormal);
    let z = Vec2::new((mean.x + sr * nr).max(0.0), wrap_angle(mean.y + sb * nb));
    Some(Measurement {
        robot_id,
        target_id,
        z,
        timestamp,
    })
}

fn noise_stddevs(d: f64, bearing: f64, spec: &SensorSpec) -> (f64, f64) {
    (
        spec.noise_base.0 + spec.noise_slope.0 * d,
        spec.noise_base.1 + spec.noise_slope.1 * bearing.abs(),
    )
}

/// Measurement-noise covariance for in-range geometry. Panics when called at
/// or beyond the range limit: out-of-range targets carry no finite noise
/// model.
pub fn noise_covariance(pose: &Pose, mean: &Vec4, spec: &SensorSpec) -> Mat2 {
    let target = Vec2::new(mean[0], mean[1]);
    let d = (target - pose.position()).norm();
    assert!(
        d < spec.range_limit,
        "noise_covariance requested out of range (d = {d:.3} m, limit {:.3} m)",
        spec.range_limit
    );
    let bearing = predict_measurement(pose, target, spec.altitude).y;
    let (sr, sb) = noise_stddevs(d, bearing, spec);
    Mat2::from_diagonal(&Vec2::new(sr * sr, sb * sb))
}

/// Noise covariance evaluated at the estimated target state without the
/// in-range check. Filters linearize around the estimated mean, which can sit
/// beyond the range limit even while the true target is detectable; the noise
/// model extrapolates rather than panicking.
pub fn noise_covariance_unchecked(pose: &Pose, mean: &Vec4, spec: &SensorSpec) -> Mat2 {
    let target = Vec2::new(mean[0], mean[1]);
    let d = (target - pose.position()).norm();
    let bearing = predict_measurement(pose, target, spec.altitude).y;
    let (sr, sb) = noise_stddevs(d, bearing, spec);
    Mat2::from_diagonal(&Vec2::new(sr * sr, sb * sb))
}

/// Analytic Jacobian of `h` with respect to the 4-D target state. Velocity
/// columns are zero; errors on near-coincident geometry.
pub fn linearize_observation(
    pose: &Pose,
    mean: &Vec4,
    altitude: f64,
) -> Result<Mat2x4, SensingError> {
    let delta = Vec2::new(mean[0], mean[1]) - pose.position();
    let d = delta.norm();
    if d <= MIN_LINEARIZE_DISTANCE {
        return Err(SensingError::SingularGeometry { distance: d });
    }
    Ok(jacobian(delta, d, altitude))
}

/// Jacobian with the near-singularity clamped: geometry closer than
/// [`LINEARIZE_CLAMP_DISTANCE`] is evaluated at that distance along the
/// (or an arbitrary fixed) displacement direction.
pub fn linearize_clamped(pose: &Pose, mean: &Vec4, altitude: f64) -> Mat2x4 {
    let delta = Vec2::new(mean[0], mean[1]) - pose.position();
    let d = delta.norm();
    if d >= LINEARIZE_CLAMP_DISTANCE {
        return jacobian(delta, d, altitude);
    }
    let dir = if d > MIN_LINEARIZE_DISTANCE {
        delta / d
    } else {
        Vec2::new(1.0, 0.0)
    };
    jacobian(dir * LINEARIZE_CLAMP_DISTANCE, LINEARIZE_CLAMP_DISTANCE, altitude)
}

fn jacobian(delta: Vec2, d: f64, altitude: f64) -> Mat2x4 {
    let r = (d * d + altitude * altitude).sqrt();
    let mut h = Mat2x4::zeros();
    h[(0, 0)] = delta.x / r;
    h[(0, 1)] = delta.y / r;
    h[(1, 0)] = -delta.y / (d * d);
    h[(1, 1)] = delta.x / (d * d);
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn quiet_spec() -> SensorSpec {
        SensorSpec {
            range_limit: 1.5,
            capacity: 5,
            altitude: 0.0,
            noise_base: (1e-12, 1e-12),
            noise_slope: (0.0, 0.0),
        }
    }

    #[test]
    fn observe_axis_aligned() {
        let spec = quiet_spec();
        let pose = Pose::new(0.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = observe(&pose, Vec2::new(1.0, 0.0), &spec, 0, 0, 0, &mut rng).unwrap();
        assert!((m.z.x - 1.0).abs() < 1e-9);
        assert!(m.z.y.abs() < 1e-9);
    }

    #[test]
    fn observe_beyond_range_limit_yields_nothing() {
        let spec = quiet_spec();
        let pose = Pose::new(0.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(observe(&pose, Vec2::new(2.0, 0.0), &spec, 0, 0, 0, &mut rng).is_none());
        // Boundary is exclusive.
        assert!(observe(&pose, Vec2::new(1.5, 0.0), &spec, 0, 0, 0, &mut rng).is_none());
    }

    #[test]
    fn observe_perpendicular_geometry() {
        let spec = quiet_spec();
        let pose = Pose::new(0.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = observe(&pose, Vec2::new(0.0, 1.0), &spec, 0, 0, 0, &mut rng).unwrap();
        assert!((m.z.x - 1.0).abs() < 1e-9);
        assert!((m.z.y - FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn altitude_enters_range_only() {
        let mut spec = quiet_spec();
        spec.altitude = 0.5;
        let pose = Pose::new(0.0, 0.0, 0.0);
        let z = predict_measurement(&pose, Vec2::new(1.0, 0.0), spec.altitude);
        assert!((z.x - (1.25f64).sqrt()).abs() < 1e-12);
        assert!(z.y.abs() < 1e-12);
    }

    fn finite_difference_jacobian(pose: &Pose, mean: &Vec4, altitude: f64) -> Mat2x4 {
        let mut h = Mat2x4::zeros();
        let eps = 1e-7;
        for col in 0..4 {
            let mut plus = *mean;
            let mut minus = *mean;
            plus[col] += eps;
            minus[col] -= eps;
            let zp = predict_measurement(pose, Vec2::new(plus[0], plus[1]), altitude);
            let zm = predict_measurement(pose, Vec2::new(minus[0], minus[1]), altitude);
            h[(0, col)] = (zp.x - zm.x) / (2.0 * eps);
            h[(1, col)] = (wrap_angle(zp.y - zm.y)) / (2.0 * eps);
        }
        h
    }

    #[test]
    fn jacobian_axis_cases() {
        let pose = Pose::new(0.0, 0.0, 0.0);
        let h = linearize_observation(&pose, &Vec4::new(1.0, 0.0, 0.0, 0.0), 0.0).unwrap();
        let expect = Mat2x4::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((h - expect).norm() < 1e-12);

        let h2 = linearize_observation(&pose, &Vec4::new(0.0, 2.0, 0.0, 0.0), 0.0).unwrap();
        assert!((h2.row(0) - Mat2x4::from_row_slice(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).row(0)).norm() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences_over_random_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let pose = Pose::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-PI..PI),
            );
            let mean = Vec4::new(
                pose.x + rng.gen_range(0.1..1.4) * rng.gen_range(-1.0f64..1.0).signum(),
                pose.y + rng.gen_range(0.1..1.4) * rng.gen_range(-1.0f64..1.0).signum(),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let altitude = rng.gen_range(0.0..1.0);
            let h = linearize_observation(&pose, &mean, altitude).unwrap();
            let fd = finite_difference_jacobian(&pose, &mean, altitude);
            let rel = (h - fd).norm() / fd.norm().max(1.0);
            assert!(rel < 1e-6, "jacobian mismatch: {rel}");
            assert_eq!(h.column(2).norm(), 0.0);
            assert_eq!(h.column(3).norm(), 0.0);
        }
    }

    #[test]
    fn linearize_rejects_coincident_geometry_and_clamp_substitutes() {
        let pose = Pose::new(1.0, 1.0, 0.0);
        let mean = Vec4::new(1.0, 1.0, 0.0, 0.0);
        assert!(matches!(
            linearize_observation(&pose, &mean, 0.5),
            Err(SensingError::SingularGeometry { .. })
        ));
        let h = linearize_clamped(&pose, &mean, 0.5);
        assert!(h.norm().is_finite());
        // Clamp evaluates 1e-3 m east of the robot.
        let shifted = Vec4::new(1.0 + LINEARIZE_CLAMP_DISTANCE, 1.0, 0.0, 0.0);
        let expect = linearize_observation(&pose, &shifted, 0.5).unwrap();
        assert!((h - expect).norm() / expect.norm() < 1e-12);
    }

    #[test]
    fn noise_covariance_formula() {
        let mut spec = quiet_spec();
        spec.noise_base = (0.05, 0.02);
        spec.noise_slope = (0.1, 0.0);
        let pose = Pose::new(0.0, 0.0, 0.0);
        let v = noise_covariance(&pose, &Vec4::new(1.0, 0.0, 0.0, 0.0), &spec);
        assert!((v[(0, 0)] - 0.15f64.powi(2)).abs() < 1e-12);
        assert!((v[(1, 1)] - 0.02f64.powi(2)).abs() < 1e-12);
        assert_eq!(v[(0, 1)], 0.0);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn noise_covariance_out_of_range_panics() {
        let spec = quiet_spec();
        let pose = Pose::new(0.0, 0.0, 0.0);
        noise_covariance(&pose, &Vec4::new(2.0, 0.0, 0.0, 0.0), &spec);
    }

    #[test]
    fn noise_grows_with_distance_and_bearing() {
        let mut spec = quiet_spec();
        spec.noise_base = (0.05, 0.02);
        spec.noise_slope = (0.08, 0.05);
        let pose = Pose::new(0.0, 0.0, 0.0);
        let mut prev: Option<Mat2> = None;
        for i in 1..10 {
            let d = 0.14 * i as f64;
            let v = noise_covariance(&pose, &Vec4::new(d, 0.0, 0.0, 0.0), &spec);
            if let Some(p) = prev {
                // Diagonal matrices: Loewner order is entrywise on the diagonal.
                assert!(v[(0, 0)] >= p[(0, 0)] && v[(1, 1)] >= p[(1, 1)]);
            }
            prev = Some(v);
        }
        let near_axis = noise_covariance(&pose, &Vec4::new(1.0, 0.1, 0.0, 0.0), &spec);
        let off_axis = noise_covariance(
            &pose,
            &Vec4::new(
                1.0 * (1.0f64).cos(),
                1.0 * (1.0f64).sin(),
                0.0,
                0.0,
            ),
            &spec,
        );
        assert!(off_axis[(1, 1)] > near_axis[(1, 1)]);
    }

    #[test]
    fn bearing_invariant_to_full_robot_rotation() {
        let spec = quiet_spec();
        let target = Vec2::new(0.7, -0.4);
        let a = predict_measurement(&Pose::new(0.0, 0.0, 1.0), target, spec.altitude);
        let b = predict_measurement(
            &Pose::new(0.0, 0.0, 1.0 + std::f64::consts::TAU),
            target,
            spec.altitude,
        );
        assert!((a - b).norm() < 1e-9);
    }

    #[test]
    fn sensor_spec_validation() {
        let mut s = quiet_spec();
        assert!(s.validate().is_ok());
        s.range_limit = 0.0;
        assert!(s.validate().is_err());
        let mut s2 = quiet_spec();
        s2.capacity = 0;
        assert!(s2.validate().is_err());
    }
}
