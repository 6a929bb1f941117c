//! Closed-loop simulation of an autonomous shunting train.
//!
//! The crate models a guarded-event world (signals, derailers, a moving
//! train), a fail-safe movement-authority controller fed by an imperfect
//! perception channel, an optional runtime certificate checker and position
//! shield in front of that channel, plus a synthetic sign-vision pipeline,
//! a bounded explicit-state model checker and a Monte Carlo batch runner.

pub mod certcontrol;
pub mod config;
pub mod controller;
pub mod modelcheck;
pub mod montecarlo;
pub mod perception;
pub mod rng;
pub mod signvision;
pub mod simengine;
pub mod worldmodel;

pub use config::ScenarioConfig;
pub use rng::Rng;
