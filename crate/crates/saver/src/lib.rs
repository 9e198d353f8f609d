//! Radial feeder simulation and safe volt-var control.
//!
//! The crate covers the full loop of a reactive-power control study on a
//! radial distribution feeder:
//!
//! * [`feeder`]: the network data model (buses, lines, limits) with TOML I/O.
//! * [`powerflow`]: nonlinear branch-flow solutions via backward/forward
//!   sweeps.
//! * [`linearization`]: voltage sensitivity matrices of the linearized
//!   branch-flow model, the basis for safety certificates.
//! * [`safety`]: the quadratic-program projection that maps any proposed
//!   reactive dispatch to the nearest one satisfying linearized voltage
//!   limits and actuator boxes.
//! * [`rl`]: a self-contained deterministic-policy-gradient learner
//!   (actor/critic networks, replay buffer, feeder environment).
//! * [`baselines`]: non-learning controllers used as comparison points.
//! * [`profiles`]: daily load and generation profiles, synthetic or
//!   ingested from measurement CSVs.
//! * [`harness`]: closed-loop evaluation, metrics, and report generation.
//! * [`config`]: experiment configuration files.

pub mod baselines;
pub mod config;
pub mod feeder;
pub mod harness;
pub mod linearization;
pub mod powerflow;
pub mod profiles;
pub mod rl;
pub mod safety;
