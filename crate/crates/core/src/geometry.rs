//! Shared geometry primitives: planar vectors, poses, angle wrapping.

use serde::{Deserialize, Serialize};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec4 = nalgebra::Vector4<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
pub type Mat4 = nalgebra::Matrix4<f64>;
pub type Mat2x4 = nalgebra::Matrix2x4<f64>;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

/// Planar pose of a sensing robot: position plus heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Heading in radians, kept in `(-pi, pi]`.
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Position block of a 4-state `(px, py, vx, vy)` vector.
pub fn state_position(state: &Vec4) -> Vec2 {
    Vec2::new(state[0], state[1])
}

/// Velocity block of a 4-state `(px, py, vx, vy)` vector.
pub fn state_velocity(state: &Vec4) -> Vec2 {
    Vec2::new(state[2], state[3])
}
