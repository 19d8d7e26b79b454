//! Uncertainty-bounded monitoring of road-constrained targets with a minimal
//! mobile-sensor fleet.
//!
//! The crate couples three layers that share one belief representation:
//!
//! * road-network target simulation and EKF-style estimation with
//!   branch-fork covariance inflation at intersections ([`roadnet`],
//!   [`estimation`]),
//! * fleet sizing and routing that schedules monitoring windows before the
//!   uncertainty bound is violated ([`assignment`]),
//! * per-robot nonlinear MPC that holds each serviced target's covariance
//!   determinant under the bound ([`nmpc`]),
//!
//! all orchestrated by a dual-frequency [`coordinator`].

pub mod geometry;
pub mod roadnet;
pub mod sensing;
pub mod estimation;
pub mod assignment;
pub mod nmpc;
pub mod scenario;
pub mod coordinator;
pub mod report;
pub mod par;
