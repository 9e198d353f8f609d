//! Closed-loop evaluation of controllers over a load dataset.
//!
//! One episode replays one day: at each step the controller proposes a
//! reactive dispatch from the latest measured voltages, the safe variant
//! additionally projects it, and the nonlinear power flow produces the
//! voltages that get scored. Inference and projection are timed with a
//! monotonic clock; the power-flow solve is the simulated plant and stays
//! outside the timings.

pub mod metrics;
pub mod report;

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{LinearPolicy, Noop};
use crate::feeder::Feeder;
use crate::linearization::Sensitivities;
use crate::powerflow::SweepOptions;
use crate::profiles::LoadDataset;
use crate::rl::{Environment, Policy};
use crate::safety::{ProjectionOptions, ProjectionStatus, SafetyLayer};

/// Which control strategy runs the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Noop,
    Linear,
    Rl,
    SafeRl,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Noop => "noop",
            ControllerKind::Linear => "linear",
            ControllerKind::Rl => "rl",
            ControllerKind::SafeRl => "safe_rl",
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noop" => Ok(ControllerKind::Noop),
            "linear" => Ok(ControllerKind::Linear),
            "rl" => Ok(ControllerKind::Rl),
            "safe_rl" => Ok(ControllerKind::SafeRl),
            other => Err(format!(
                "unknown controller {other:?}; expected noop, linear, rl, or safe_rl"
            )),
        }
    }
}

/// A ready-to-run controller with its per-episode state.
#[derive(Debug)]
pub enum Controller {
    Noop(Noop),
    Linear(LinearPolicy),
    Rl(Policy),
    SafeRl { policy: Policy, layer: SafetyLayer },
}

impl Controller {
    /// Builds a controller of `kind`. The learned kinds need a `policy`;
    /// the droop gain defaults from the sensitivity model.
    pub fn new(
        kind: ControllerKind,
        feeder: &Feeder,
        sens: &Sensitivities,
        policy: Option<Policy>,
    ) -> Result<Self, EvaluateError> {
        match kind {
            ControllerKind::Noop => Ok(Controller::Noop(Noop::new(feeder))),
            ControllerKind::Linear => {
                let alpha = LinearPolicy::default_alpha(feeder, sens);
                Ok(Controller::Linear(LinearPolicy::new(feeder, alpha, 1.0)))
            }
            ControllerKind::Rl => policy
                .map(Controller::Rl)
                .ok_or(EvaluateError::PolicyRequired(kind)),
            ControllerKind::SafeRl => {
                let policy = policy.ok_or(EvaluateError::PolicyRequired(kind))?;
                Ok(Controller::SafeRl {
                    policy,
                    layer: SafetyLayer::new(feeder, sens),
                })
            }
        }
    }

    pub fn kind(&self) -> ControllerKind {
        match self {
            Controller::Noop(_) => ControllerKind::Noop,
            Controller::Linear(_) => ControllerKind::Linear,
            Controller::Rl(_) => ControllerKind::Rl,
            Controller::SafeRl { .. } => ControllerKind::SafeRl,
        }
    }

    fn reset(&mut self) {
        match self {
            Controller::Linear(droop) => droop.reset(),
            Controller::SafeRl { layer, .. } => layer.reset_warm_start(),
            _ => {}
        }
    }
}

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("controller {0} needs a trained policy")]
    PolicyRequired(ControllerKind),
    #[error(
        "policy maps {obs_in} observations to {act_out} actions but the feeder \
         needs {obs_expected} to {act_expected}"
    )]
    PolicyMismatch {
        obs_in: usize,
        act_out: usize,
        obs_expected: usize,
        act_expected: usize,
    },
    #[error("day {day} step {step}: power flow failed under the executed dispatch")]
    StepFailed { day: usize, step: usize },
    #[error("day {day} could not be initialized: {source}")]
    ResetFailed {
        day: usize,
        source: crate::powerflow::PowerFlowError,
    },
    #[error("dataset day index {0} is out of range")]
    BadDayIndex(usize),
    #[error("dataset has no steps")]
    EmptyDay,
}

/// Everything recorded about one control step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Observation the controller saw: previous voltages, then the active
    /// injections in force during the step.
    pub state: Vec<f64>,
    pub raw_action: Vec<f64>,
    /// What actually ran on the grid (projected when the layer is active).
    pub executed_action: Vec<f64>,
    pub projection_status: Option<ProjectionStatus>,
    pub active_set_size: usize,
    /// Nonlinear squared voltage magnitudes, every bus including the head.
    pub voltages: Vec<f64>,
    pub reward: f64,
    pub inference_seconds: f64,
    pub projection_seconds: f64,
}

/// One evaluated day.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub controller: ControllerKind,
    pub day_index: usize,
    pub steps: Vec<StepRecord>,
}

/// Fixed evaluation parameters.
#[derive(Debug, Clone, Copy)]
pub struct EvaluateOptions {
    /// Weight of the control-effort term in the recorded reward.
    pub eta: f64,
    pub sweep: SweepOptions,
    pub projection: ProjectionOptions,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        EvaluateOptions {
            eta: 0.1,
            sweep: SweepOptions::default(),
            projection: ProjectionOptions::default(),
        }
    }
}

/// Replays the listed days under the controller and records every step.
/// Controllers are deterministic here, so records depend only on the
/// dataset, the controller parameters, and the options.
pub fn evaluate(
    feeder: &Feeder,
    controller: &mut Controller,
    data: &LoadDataset,
    days: &[usize],
    opts: &EvaluateOptions,
) -> Result<Vec<EpisodeRecord>, EvaluateError> {
    let env = Environment::new(feeder.clone(), opts.eta, opts.sweep);
    if let Controller::Rl(policy) | Controller::SafeRl { policy, .. } = controller {
        if policy.action_dim() != env.action_dim()
            || policy.observation_dim() != env.state_dim()
        {
            return Err(EvaluateError::PolicyMismatch {
                obs_in: policy.observation_dim(),
                act_out: policy.action_dim(),
                obs_expected: env.state_dim(),
                act_expected: env.action_dim(),
            });
        }
    }
    let controllable = feeder.controllable_buses();
    let mut records = Vec::with_capacity(days.len());

    for &day_index in days {
        let day = data
            .days
            .get(day_index)
            .ok_or(EvaluateError::BadDayIndex(day_index))?;
        let steps = day.p.len();
        if steps == 0 {
            return Err(EvaluateError::EmptyDay);
        }
        controller.reset();
        let mut state = env
            .reset(&day.p[0], &day.q_background[0])
            .map_err(|source| EvaluateError::ResetFailed {
                day: day_index,
                source,
            })?;
        let mut step_records = Vec::with_capacity(steps);

        for t in 0..steps {
            let obs = state.observation();
            let started = Instant::now();
            let raw_action = match controller {
                Controller::Noop(noop) => noop.step(),
                Controller::Linear(droop) => {
                    let v_seen: Vec<f64> =
                        controllable.iter().map(|&b| state.v[b - 1]).collect();
                    droop.step(&v_seen)
                }
                Controller::Rl(policy) | Controller::SafeRl { policy, .. } => policy.act(&obs),
            };
            let inference_seconds = started.elapsed().as_secs_f64();

            let mut executed_action = raw_action.clone();
            let mut projection_status = None;
            let mut active_set_size = 0;
            let mut projection_seconds = 0.0;
            if let Controller::SafeRl { layer, .. } = controller {
                let started = Instant::now();
                let result =
                    layer.project(&raw_action, &state.p, &day.q_background[t], &opts.projection);
                projection_seconds = started.elapsed().as_secs_f64();
                executed_action = result.q_safe;
                projection_status = Some(result.status);
                active_set_size = result.active_set.len();
            }

            let p_next = &day.p[(t + 1).min(steps - 1)];
            let out = env.step(&state, &executed_action, &day.q_background[t], p_next);
            if out.terminal {
                return Err(EvaluateError::StepFailed {
                    day: day_index,
                    step: t,
                });
            }
            step_records.push(StepRecord {
                step: t,
                state: obs,
                raw_action,
                executed_action,
                projection_status,
                active_set_size,
                voltages: out.voltages,
                reward: out.reward,
                inference_seconds,
                projection_seconds,
            });
            state = out.next_state;
        }
        records.push(EpisodeRecord {
            controller: controller.kind(),
            day_index,
            steps: step_records,
        });
    }
    Ok(records)
}
