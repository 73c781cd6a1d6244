//! A differential-geometric toolkit for classifying candidate trajectories of
//! control systems — in particular sub-Riemannian geodesic candidates — as
//! normal or abnormal extremals.
//!
//! The pipeline: define vector fields and control signals symbolically
//! ([`expr`]), integrate flows plus their tangent/adjoint transports
//! ([`flow`]), take Lie brackets symbolically and along curves ([`bracket`]),
//! build and test distributions along trajectories ([`distribution`]),
//! classify extremal candidates ([`extremal`]), and certify the verdicts with
//! separating-hyperplane and needle-cone constructions on the cost-extended
//! system ([`contact`]). [`config`] loads system definitions from TOML;
//! [`verify`] hosts the named self-checks behind the CLI `verify` command.

pub mod bracket;
pub mod cli;
pub mod config;
pub mod contact;
pub mod distribution;
pub mod expr;
pub mod extremal;
pub mod flow;
pub mod linalg;
pub mod verify;
