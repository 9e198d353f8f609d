//! Feeder control environment.
//!
//! The controller interacts with the grid on a fixed clock. At each step it
//! observes the previous step's solved voltages together with the current
//! active-power snapshot, dispatches reactive power, and the nonlinear
//! power flow then resolves the voltages for that same snapshot:
//!
//! ```text
//! s_t = (v_{t-1}, p_t)
//! v_t = powerflow(p_t, q_background_t + a_t)
//! r_t = -( sum_j (v_t[j] - v0)^2  +  eta * sum_i a_t[i]^2 )
//! s_{t+1} = (v_t, p_{t+1})
//! ```
//!
//! so the dispatched action and the snapshot it responded to are what the
//! reward scores, and the successor state pairs the resulting voltages with
//! the next snapshot.

use crate::feeder::Feeder;
use crate::powerflow::{self, SweepOptions};

/// Reward issued when the power flow fails to converge; the episode
/// terminates at that step.
pub const FAILURE_REWARD: f64 = -100.0;

/// Observation: squared voltages and active injections at non-root buses.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub v: Vec<f64>,
    pub p: Vec<f64>,
}

impl State {
    /// Flat observation vector, voltages first.
    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.v.len() + self.p.len());
        obs.extend_from_slice(&self.v);
        obs.extend_from_slice(&self.p);
        obs
    }

    pub fn dim(&self) -> usize {
        self.v.len() + self.p.len()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_state: State,
    pub reward: f64,
    /// Nonlinear squared voltages for every bus including the feeder head.
    pub voltages: Vec<f64>,
    /// Set when the power flow failed; the episode must end here.
    pub terminal: bool,
}

/// Stateless environment dynamics for one feeder.
#[derive(Debug, Clone)]
pub struct Environment {
    feeder: Feeder,
    controllable: Vec<usize>,
    /// Weight of the control-effort term in the reward.
    pub eta: f64,
    sweep: SweepOptions,
}

impl Environment {
    pub fn new(feeder: Feeder, eta: f64, sweep: SweepOptions) -> Self {
        let controllable = feeder.controllable_buses();
        Environment {
            feeder,
            controllable,
            eta,
            sweep,
        }
    }

    pub fn feeder(&self) -> &Feeder {
        &self.feeder
    }

    pub fn state_dim(&self) -> usize {
        2 * self.feeder.injection_count()
    }

    pub fn action_dim(&self) -> usize {
        self.controllable.len()
    }

    /// Adds the control action onto the background reactive injections,
    /// returning the full non-root reactive vector the grid sees.
    pub fn merge_action(&self, q_background: &[f64], action: &[f64]) -> Vec<f64> {
        assert_eq!(action.len(), self.controllable.len(), "action has wrong length");
        let mut q = q_background.to_vec();
        for (k, &bus) in self.controllable.iter().enumerate() {
            q[bus - 1] += action[k];
        }
        q
    }

    /// Reward for solved non-root voltages and the dispatched action.
    pub fn reward(&self, v_non_root: &[f64], action: &[f64]) -> f64 {
        let v0 = self.feeder.v0;
        let deviation: f64 = v_non_root.iter().map(|&v| (v - v0).powi(2)).sum();
        let effort: f64 = action.iter().map(|&a| a * a).sum();
        -(deviation + self.eta * effort)
    }

    /// Initial state for an episode: voltages solved under the first
    /// snapshot with zero control.
    pub fn reset(
        &self,
        p0: &[f64],
        q_background0: &[f64],
    ) -> Result<State, powerflow::PowerFlowError> {
        let sol = powerflow::solve(&self.feeder, p0, q_background0, &self.sweep)?;
        Ok(State {
            v: sol.v[1..].to_vec(),
            p: p0.to_vec(),
        })
    }

    /// Applies `action` under the state's active-power snapshot. Power-flow
    /// failure is not an error: it yields [`FAILURE_REWARD`], the terminal
    /// flag, and carries the stale voltages forward.
    pub fn step(
        &self,
        state: &State,
        action: &[f64],
        q_background: &[f64],
        p_next: &[f64],
    ) -> StepOutcome {
        let q_full = self.merge_action(q_background, action);
        match powerflow::solve(&self.feeder, &state.p, &q_full, &self.sweep) {
            Ok(sol) => {
                let v_non_root = sol.v[1..].to_vec();
                let reward = self.reward(&v_non_root, action);
                StepOutcome {
                    next_state: State {
                        v: v_non_root,
                        p: p_next.to_vec(),
                    },
                    reward,
                    voltages: sol.v,
                    terminal: false,
                }
            }
            Err(_) => {
                let mut voltages = Vec::with_capacity(state.v.len() + 1);
                voltages.push(self.feeder.v0);
                voltages.extend_from_slice(&state.v);
                StepOutcome {
                    next_state: State {
                        v: state.v.clone(),
                        p: p_next.to_vec(),
                    },
                    reward: FAILURE_REWARD,
                    voltages,
                    terminal: true,
                }
            }
        }
    }
}
