//! Deterministic-policy-gradient learner.
//!
//! Actor and critic are small dense networks trained from a uniform replay
//! buffer with soft-updated target copies. The actor ends in a tanh whose
//! output is affinely mapped into each actuator's box, so proposed actions
//! always respect the hardware limits; exploration adds clipped Gaussian
//! noise on top. Training can run with the safety projection in the loop,
//! in which case the buffer stores the action that was actually executed.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::buffer::{ReplayBuffer, Transition};
use super::env::Environment;
use super::nn::{Activation, Adam, Gradients, Mlp};
use crate::feeder::Feeder;
use crate::linearization::sensitivities;
use crate::powerflow::SweepOptions;
use crate::profiles::LoadDataset;
use crate::safety::{ProjectionOptions, ProjectionStatus, SafetyLayer};

fn default_gamma() -> f64 {
    0.99
}
fn default_tau() -> f64 {
    0.005
}
fn default_lr() -> f64 {
    1e-3
}
fn default_buffer() -> usize {
    100_000
}
fn default_batch() -> usize {
    128
}
fn default_hidden() -> usize {
    64
}
fn default_noise_sigma() -> f64 {
    0.05
}
fn default_noise_decay() -> f64 {
    0.995
}
fn default_update_every() -> usize {
    1
}
fn default_warmup() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpgConfig {
    pub gamma: f64,
    /// Soft target-update rate.
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Width of both hidden layers.
    pub hidden: usize,
    /// Initial exploration noise, as a fraction of each actuator's range.
    pub noise_sigma: f64,
    /// Per-episode multiplicative decay of the exploration noise.
    pub noise_decay: f64,
    /// Gradient step every this many environment steps.
    pub update_every: usize,
    /// Environment steps collected before updates begin.
    pub warmup_steps: usize,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            gamma: default_gamma(),
            tau: default_tau(),
            actor_lr: default_lr(),
            critic_lr: default_lr(),
            buffer_capacity: default_buffer(),
            batch_size: default_batch(),
            hidden: default_hidden(),
            noise_sigma: default_noise_sigma(),
            noise_decay: default_noise_decay(),
            update_every: default_update_every(),
            warmup_steps: default_warmup(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("update needs {needed} samples, buffer holds {have}")]
    NotEnoughSamples { needed: usize, have: usize },
    #[error("non-finite {what} ({value}) at update {step}; learning rate is likely too high")]
    NonFinite {
        what: &'static str,
        value: f64,
        step: u64,
    },
    #[error("episode {episode} failed to initialize: {source}")]
    Reset {
        episode: usize,
        source: crate::powerflow::PowerFlowError,
    },
    #[error("dataset has no training days")]
    NoTrainingDays,
    #[error("dataset days are empty")]
    EmptyDay,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to access checkpoint file: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint was trained on feeder {stored}, asked to run on {actual}")]
    FingerprintMismatch { stored: String, actual: String },
}

/// Draws one sample from the standard normal distribution.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > f64::MIN_POSITIVE {
            let v: f64 = rng.gen();
            return (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos();
        }
    }
}

/// Frozen actor for evaluation: forward passes only, no exploration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Policy {
    actor: Mlp,
    centers: Vec<f64>,
    halves: Vec<f64>,
}

impl Policy {
    pub fn act(&self, obs: &[f64]) -> Vec<f64> {
        let u = self.actor.forward(&DVector::from_column_slice(obs));
        (0..self.centers.len())
            .map(|i| self.centers[i] + self.halves[i] * u[i])
            .collect()
    }

    pub fn action_dim(&self) -> usize {
        self.centers.len()
    }

    pub fn observation_dim(&self) -> usize {
        self.actor.input_dim()
    }
}

/// The learner: online and target networks, optimizers, replay buffer, and
/// exploration state.
#[derive(Debug)]
pub struct Agent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    pub buffer: ReplayBuffer,
    pub config: DdpgConfig,
    centers: Vec<f64>,
    halves: Vec<f64>,
    /// Current exploration noise fraction (decays over episodes).
    pub noise_sigma: f64,
    state_dim: usize,
    action_dim: usize,
    updates: u64,
}

impl Agent {
    pub fn new<R: Rng>(
        state_dim: usize,
        q_boxes: &[(f64, f64)],
        config: DdpgConfig,
        rng: &mut R,
    ) -> Self {
        let action_dim = q_boxes.len();
        assert!(action_dim > 0, "feeder has no controllable buses");
        assert!(state_dim > 0);
        let centers: Vec<f64> = q_boxes.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
        let halves: Vec<f64> = q_boxes.iter().map(|(lo, hi)| 0.5 * (hi - lo)).collect();
        let actor = Mlp::new(
            &[state_dim, config.hidden, config.hidden, action_dim],
            Activation::Relu,
            Activation::Tanh,
            rng,
        );
        let critic = Mlp::new(
            &[state_dim + action_dim, config.hidden, config.hidden, 1],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        let target_actor = actor.clone();
        let target_critic = critic.clone();
        let actor_opt = Adam::new(&actor, config.actor_lr);
        let critic_opt = Adam::new(&critic, config.critic_lr);
        let buffer = ReplayBuffer::new(config.buffer_capacity);
        let noise_sigma = config.noise_sigma;
        Agent {
            actor,
            critic,
            target_actor,
            target_critic,
            actor_opt,
            critic_opt,
            buffer,
            config,
            centers,
            halves,
            noise_sigma,
            state_dim,
            action_dim,
            updates: 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn scale_action(&self, u: &DVector<f64>) -> Vec<f64> {
        (0..self.action_dim)
            .map(|i| self.centers[i] + self.halves[i] * u[i])
            .collect()
    }

    fn clip_action(&self, a: &mut [f64]) {
        for i in 0..a.len() {
            let lo = self.centers[i] - self.halves[i];
            let hi = self.centers[i] + self.halves[i];
            a[i] = a[i].clamp(lo, hi);
        }
    }

    /// Actor forward pass; with `explore` set, Gaussian noise scaled to the
    /// actuator ranges is added and the result clipped back into the boxes.
    pub fn act<R: Rng>(&self, obs: &[f64], explore: bool, rng: &mut R) -> Vec<f64> {
        let u = self.actor.forward(&DVector::from_column_slice(obs));
        let mut a = self.scale_action(&u);
        if explore {
            for i in 0..a.len() {
                let range = 2.0 * self.halves[i];
                a[i] += self.noise_sigma * range * standard_normal(rng);
            }
            self.clip_action(&mut a);
        }
        a
    }

    /// Snapshot of the current actor for evaluation rollouts.
    pub fn policy(&self) -> Policy {
        Policy {
            actor: self.actor.clone(),
            centers: self.centers.clone(),
            halves: self.halves.clone(),
        }
    }

    fn critic_input(&self, state: &[f64], action: &[f64]) -> DVector<f64> {
        let mut input = DVector::zeros(self.state_dim + self.action_dim);
        for (i, &s) in state.iter().enumerate() {
            input[i] = s;
        }
        for (i, &a) in action.iter().enumerate() {
            input[self.state_dim + i] = a;
        }
        input
    }

    /// Mean-squared TD error over the batch and its parameter gradients.
    fn critic_gradients(&self, batch: &[Transition]) -> (Gradients, f64) {
        let mut grads = Gradients::zeros_like(&self.critic);
        let mut loss = 0.0;
        let inv = 1.0 / batch.len() as f64;
        for tr in batch {
            let next_obs = DVector::from_column_slice(&tr.next_state);
            let next_u = self.target_actor.forward(&next_obs);
            let next_a = {
                let mut a = self.scale_action(&next_u);
                self.clip_action(&mut a);
                a
            };
            let q_next = self.target_critic.forward(&self.critic_input(&tr.next_state, &next_a))[0];
            let y = tr.reward
                + if tr.terminal {
                    0.0
                } else {
                    self.config.gamma * q_next
                };
            let trace = self.critic.forward_trace(&self.critic_input(&tr.state, &tr.action));
            let diff = trace.output()[0] - y;
            loss += diff * diff * inv;
            let upstream = DVector::from_vec(vec![2.0 * diff * inv]);
            let (g, _) = self.critic.backward(&trace, &upstream);
            grads.add_assign(&g);
        }
        (grads, loss)
    }

    /// Gradient of the negated mean critic value at the actor's actions
    /// (descending it ascends the objective), plus the objective itself.
    fn actor_gradients(&self, batch: &[Transition]) -> (Gradients, f64) {
        let mut grads = Gradients::zeros_like(&self.actor);
        let mut objective = 0.0;
        let inv = 1.0 / batch.len() as f64;
        for tr in batch {
            let s = DVector::from_column_slice(&tr.state);
            let actor_trace = self.actor.forward_trace(&s);
            let a = self.scale_action(actor_trace.output());
            let critic_trace = self.critic.forward_trace(&self.critic_input(&tr.state, &a));
            objective += critic_trace.output()[0] * inv;
            let (_, dinput) = self
                .critic
                .backward(&critic_trace, &DVector::from_vec(vec![1.0]));
            let mut upstream = DVector::zeros(self.action_dim);
            for i in 0..self.action_dim {
                upstream[i] = -inv * dinput[self.state_dim + i] * self.halves[i];
            }
            let (g, _) = self.actor.backward(&actor_trace, &upstream);
            grads.add_assign(&g);
        }
        (grads, objective)
    }

    /// One gradient step on critic and actor plus soft target updates.
    /// Returns (critic loss, mean critic value at the actor's actions).
    pub fn update<R: Rng>(&mut self, rng: &mut R) -> Result<(f64, f64), TrainError> {
        let needed = self.config.batch_size.max(1);
        if self.buffer.len() < needed {
            return Err(TrainError::NotEnoughSamples {
                needed,
                have: self.buffer.len(),
            });
        }
        let batch: Vec<Transition> = self
            .buffer
            .sample(self.config.batch_size, rng)
            .into_iter()
            .cloned()
            .collect();
        self.updates += 1;

        let (critic_grads, critic_loss) = self.critic_gradients(&batch);
        if !critic_loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "critic loss",
                value: critic_loss,
                step: self.updates,
            });
        }
        self.critic_opt.step(&mut self.critic, &critic_grads);
        if let Some(bad) = self.critic.first_non_finite() {
            return Err(TrainError::NonFinite {
                what: "critic weight",
                value: bad,
                step: self.updates,
            });
        }

        let (actor_grads, actor_objective) = self.actor_gradients(&batch);
        if !actor_objective.is_finite() || !actor_grads.max_abs().is_finite() {
            return Err(TrainError::NonFinite {
                what: "actor objective",
                value: actor_objective,
                step: self.updates,
            });
        }
        self.actor_opt.step(&mut self.actor, &actor_grads);
        if let Some(bad) = self.actor.first_non_finite() {
            return Err(TrainError::NonFinite {
                what: "actor weight",
                value: bad,
                step: self.updates,
            });
        }

        self.target_actor.soft_update_from(&self.actor, self.config.tau);
        self.target_critic
            .soft_update_from(&self.critic, self.config.tau);
        Ok((critic_loss, actor_objective))
    }

    pub fn to_checkpoint(&self, feeder: &Feeder) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            feeder_fingerprint: feeder.fingerprint(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            centers: self.centers.clone(),
            halves: self.halves.clone(),
            actor: self.actor.clone(),
            critic: self.critic.clone(),
            target_actor: self.target_actor.clone(),
            target_critic: self.target_critic.clone(),
            actor_opt: self.actor_opt.clone(),
            critic_opt: self.critic_opt.clone(),
            noise_sigma: self.noise_sigma,
            config: self.config.clone(),
        }
    }

    /// Restores a learner from a checkpoint after verifying it belongs to
    /// `feeder`. The replay buffer starts empty.
    pub fn from_checkpoint(ck: Checkpoint, feeder: &Feeder) -> Result<Agent, CheckpointError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ck.version));
        }
        let actual = feeder.fingerprint();
        if ck.feeder_fingerprint != actual {
            return Err(CheckpointError::FingerprintMismatch {
                stored: ck.feeder_fingerprint,
                actual,
            });
        }
        let buffer = ReplayBuffer::new(ck.config.buffer_capacity);
        Ok(Agent {
            actor: ck.actor,
            critic: ck.critic,
            target_actor: ck.target_actor,
            target_critic: ck.target_critic,
            actor_opt: ck.actor_opt,
            critic_opt: ck.critic_opt,
            buffer,
            config: ck.config,
            centers: ck.centers,
            halves: ck.halves,
            noise_sigma: ck.noise_sigma,
            state_dim: ck.state_dim,
            action_dim: ck.action_dim,
            updates: 0,
        })
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable dump of the learner, tied to the feeder it was trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub feeder_fingerprint: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub centers: Vec<f64>,
    pub halves: Vec<f64>,
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub noise_sigma: f64,
    pub config: DdpgConfig,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Checkpoint, CheckpointError> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    /// The frozen policy stored in this checkpoint.
    pub fn policy(&self) -> Policy {
        Policy {
            actor: self.actor.clone(),
            centers: self.centers.clone(),
            halves: self.halves.clone(),
        }
    }
}

/// Everything `train` needs beyond the dataset.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub ddpg: DdpgConfig,
    pub episodes: usize,
    /// Weight of the control-effort term in the reward.
    pub eta: f64,
    pub seed: u64,
    /// Route every action through the safety projection before execution.
    pub safe: bool,
    pub projection: ProjectionOptions,
    pub sweep: SweepOptions,
}

/// Per-episode training telemetry. Wall time is the only field that varies
/// across reruns of the same seed.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub ret: f64,
    /// Nonlinear bus-steps outside the voltage band during the episode.
    pub violations: usize,
    /// Steps whose projection had to relax the voltage constraints.
    pub relaxed_steps: usize,
    /// Worst linear-model band violation over steps executed this episode
    /// (tiny when training safely; informational otherwise).
    pub max_linear_violation: f64,
    pub mean_critic_loss: f64,
    pub mean_actor_objective: f64,
    pub wall_time_s: f64,
}

/// Runs DDPG training over the dataset's training days. Episode days are
/// sampled uniformly with the run's seed; with `safe` set, every action is
/// projected before execution and the executed action is what the buffer
/// stores. Returns the trained agent and one log row per episode.
pub fn train(
    feeder: &Feeder,
    dataset: &LoadDataset,
    cfg: &TrainConfig,
) -> Result<(Agent, Vec<EpisodeLog>), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let env = Environment::new(feeder.clone(), cfg.eta, cfg.sweep);
    let mut agent = Agent::new(
        env.state_dim(),
        &feeder.q_boxes(),
        cfg.ddpg.clone(),
        &mut rng,
    );
    let mut logs = Vec::with_capacity(cfg.episodes);
    if cfg.episodes == 0 {
        return Ok((agent, logs));
    }
    let train_days = dataset.train_day_indices();
    if train_days.is_empty() {
        return Err(TrainError::NoTrainingDays);
    }
    let sens = sensitivities(feeder);
    let mut safety = cfg.safe.then(|| SafetyLayer::new(feeder, &sens));
    let controllable = feeder.controllable_buses();

    for episode in 0..cfg.episodes {
        let started = Instant::now();
        let day = &dataset.days[train_days[rng.gen_range(0..train_days.len())]];
        let steps = day.p.len();
        if steps == 0 {
            return Err(TrainError::EmptyDay);
        }
        if let Some(layer) = &mut safety {
            layer.reset_warm_start();
        }
        let mut state = env
            .reset(&day.p[0], &day.q_background[0])
            .map_err(|source| TrainError::Reset { episode, source })?;
        let mut ret = 0.0;
        let mut violations = 0usize;
        let mut relaxed_steps = 0usize;
        let mut max_linear_violation = 0.0f64;
        let mut loss_sum = 0.0;
        let mut objective_sum = 0.0;
        let mut update_count = 0usize;

        for t in 0..steps {
            let obs = state.observation();
            let mut action = agent.act(&obs, true, &mut rng);
            if let Some(layer) = &mut safety {
                let result = layer.project(&action, &state.p, &day.q_background[t], &cfg.projection);
                if result.status == ProjectionStatus::Relaxed {
                    relaxed_steps += 1;
                }
                action = result.q_safe;
            }
            {
                let mut q_full = day.q_background[t].clone();
                for (k, &bus) in controllable.iter().enumerate() {
                    q_full[bus - 1] += action[k];
                }
                let worst = crate::safety::check_safety(feeder, &sens, &state.p, &q_full)
                    .into_iter()
                    .fold(0.0f64, f64::max);
                max_linear_violation = max_linear_violation.max(worst);
            }
            let p_next = &day.p[(t + 1).min(steps - 1)];
            let out = env.step(&state, &action, &day.q_background[t], p_next);
            violations += out
                .voltages
                .iter()
                .filter(|&&v| v < feeder.v_lower || v > feeder.v_upper)
                .count();
            ret += out.reward;
            agent.buffer.push(Transition {
                state: obs,
                action,
                reward: out.reward,
                next_state: out.next_state.observation(),
                terminal: out.terminal,
            });
            if agent.buffer.len() >= agent.config.warmup_steps.max(agent.config.batch_size)
                && t % agent.config.update_every == 0
            {
                let (loss, objective) = agent.update(&mut rng)?;
                loss_sum += loss;
                objective_sum += objective;
                update_count += 1;
            }
            state = out.next_state;
            if out.terminal {
                break;
            }
        }
        agent.noise_sigma *= agent.config.noise_decay;
        logs.push(EpisodeLog {
            episode,
            ret,
            violations,
            relaxed_steps,
            max_linear_violation,
            mean_critic_loss: if update_count > 0 {
                loss_sum / update_count as f64
            } else {
                0.0
            },
            mean_actor_objective: if update_count > 0 {
                objective_sum / update_count as f64
            } else {
                0.0
            },
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok((agent, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::fixtures;
    use crate::profiles::{synthetic_dataset, uniform_allocation, SyntheticConfig};

    fn toy_agent(rng: &mut ChaCha8Rng) -> Agent {
        Agent::new(
            4,
            &[(-0.1, 0.1), (-0.1, 0.1)],
            DdpgConfig {
                hidden: 8,
                batch_size: 4,
                buffer_capacity: 64,
                warmup_steps: 4,
                ..DdpgConfig::default()
            },
            rng,
        )
    }

    #[test]
    fn zero_weight_actor_emits_box_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut agent = toy_agent(&mut rng);
        for layer in &mut agent.actor.layers {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        let a = agent.act(&[0.3, -0.2, 0.5, 0.1], false, &mut rng);
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn greedy_action_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let agent = toy_agent(&mut rng);
        let obs = [0.9, 1.1, -0.05, 0.02];
        let a = agent.act(&obs, false, &mut rng);
        let b = agent.act(&obs, false, &mut rng);
        assert_eq!(a, b);
    }

    #[test]
    fn actions_stay_inside_boxes_with_and_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut agent = toy_agent(&mut rng);
        agent.noise_sigma = 2.0;
        for trial in 0..200 {
            let obs: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = agent.act(&obs, trial % 2 == 0, &mut rng);
            for (i, &ai) in a.iter().enumerate() {
                assert!((-0.1..=0.1).contains(&ai), "coordinate {i} escaped: {ai}");
            }
        }
    }

    #[test]
    fn degenerate_discount_regresses_to_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut agent = Agent::new(
            2,
            &[(-1.0, 1.0)],
            DdpgConfig {
                gamma: 0.0,
                hidden: 16,
                batch_size: 8,
                buffer_capacity: 16,
                warmup_steps: 1,
                critic_lr: 3e-3,
                ..DdpgConfig::default()
            },
            &mut rng,
        );
        let tr = Transition {
            state: vec![0.4, -0.3],
            action: vec![0.2],
            reward: -1.7,
            next_state: vec![0.1, 0.1],
            terminal: false,
        };
        for _ in 0..16 {
            agent.buffer.push(tr.clone());
        }
        let mut last_loss = f64::INFINITY;
        for _ in 0..500 {
            let (loss, _) = agent.update(&mut rng).unwrap();
            last_loss = loss;
        }
        assert!(last_loss < 1e-4, "critic MSE stayed at {last_loss}");
        let input = agent.critic_input(&tr.state, &tr.action);
        let q = agent.critic.forward(&input)[0];
        assert!((q - tr.reward).abs() < 0.02, "Q {q} vs reward {}", tr.reward);
    }

    #[test]
    fn unit_tau_copies_weights_after_one_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agent = Agent::new(
            2,
            &[(-1.0, 1.0)],
            DdpgConfig {
                tau: 1.0,
                hidden: 8,
                batch_size: 2,
                buffer_capacity: 8,
                warmup_steps: 1,
                ..DdpgConfig::default()
            },
            &mut rng,
        );
        for i in 0..4 {
            agent.buffer.push(Transition {
                state: vec![i as f64, 0.0],
                action: vec![0.1],
                reward: -0.5,
                next_state: vec![0.0, i as f64],
                terminal: false,
            });
        }
        agent.update(&mut rng).unwrap();
        for (t, o) in agent.target_actor.layers.iter().zip(&agent.actor.layers) {
            assert_eq!(t.w, o.w);
        }
        for (t, o) in agent.target_critic.layers.iter().zip(&agent.critic.layers) {
            assert_eq!(t.w, o.w);
        }
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        use crate::rl::nn::gradcheck;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Tiny critic: scalar state, scalar action, one hidden unit.
        let agent = Agent::new(
            1,
            &[(-1.0, 1.0)],
            DdpgConfig {
                hidden: 1,
                batch_size: 3,
                buffer_capacity: 8,
                gamma: 0.9,
                ..DdpgConfig::default()
            },
            &mut rng,
        );
        let batch: Vec<Transition> = (0..3)
            .map(|i| Transition {
                state: vec![0.2 * i as f64 - 0.1],
                action: vec![0.3 - 0.2 * i as f64],
                reward: -0.4 * i as f64,
                next_state: vec![0.1 * i as f64],
                terminal: i == 2,
            })
            .collect();
        let (analytic, _) = agent.critic_gradients(&batch);
        let reference = agent.clone_for_check();
        let numeric = gradcheck::numeric_gradients(
            &agent.critic,
            |candidate| {
                let probe = reference.shallow_with_critic(candidate.clone());
                probe.critic_gradients(&batch).1
            },
            1e-6,
        );
        let err = gradcheck::max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn actor_objective_gradient_matches_finite_differences() {
        use crate::rl::nn::gradcheck;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let agent = Agent::new(
            2,
            &[(-0.5, 0.5)],
            DdpgConfig {
                hidden: 3,
                batch_size: 2,
                ..DdpgConfig::default()
            },
            &mut rng,
        );
        let batch: Vec<Transition> = (0..2)
            .map(|i| Transition {
                state: vec![0.3 * i as f64, -0.2],
                action: vec![0.0],
                reward: 0.0,
                next_state: vec![0.0, 0.0],
                terminal: false,
            })
            .collect();
        let (analytic, _) = agent.actor_gradients(&batch);
        let reference = agent.clone_for_check();
        // The analytic gradient descends -objective; numeric differentiates
        // -objective directly.
        let numeric = gradcheck::numeric_gradients(
            &agent.actor,
            |candidate| {
                let probe = reference.shallow_with_actor(candidate.clone());
                -probe.actor_gradients(&batch).1
            },
            1e-6,
        );
        let err = gradcheck::max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn poisoned_weights_abort_with_diagnostics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut agent = toy_agent(&mut rng);
        for i in 0..8 {
            agent.buffer.push(Transition {
                state: vec![0.1 * i as f64; 4],
                action: vec![0.0, 0.0],
                reward: 0.0,
                next_state: vec![0.0; 4],
                terminal: false,
            });
        }
        agent.critic.layers[0].w[(0, 0)] = f64::NAN;
        let err = agent.update(&mut rng).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn zero_episode_training_returns_untouched_agent() {
        let f = fixtures::chain(2, 0.01, 0.02);
        let data = synthetic_dataset(
            &f,
            &SyntheticConfig::default(),
            &uniform_allocation(&f),
            1,
            0,
            3600,
            0,
        );
        let cfg = TrainConfig {
            ddpg: DdpgConfig {
                hidden: 8,
                ..DdpgConfig::default()
            },
            episodes: 0,
            eta: 0.1,
            seed: 5,
            safe: false,
            projection: ProjectionOptions::default(),
            sweep: SweepOptions::default(),
        };
        let (agent, logs) = train(&f, &data, &cfg).unwrap();
        assert!(logs.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fresh = Agent::new(4, &f.q_boxes(), cfg.ddpg.clone(), &mut rng);
        for (a, b) in agent.actor.layers.iter().zip(&fresh.actor.layers) {
            assert_eq!(a.w, b.w, "params must be the untouched initialization");
        }
    }

    #[test]
    fn safe_training_keeps_linear_violations_at_tolerance() {
        let f = fixtures::chain(3, 0.02, 0.04);
        let data = synthetic_dataset(
            &f,
            &SyntheticConfig {
                demand_min_mw: 0.15,
                demand_max_mw: 0.4,
                ..SyntheticConfig::default()
            },
            &uniform_allocation(&f),
            2,
            0,
            3600,
            1,
        );
        let cfg = TrainConfig {
            ddpg: DdpgConfig {
                hidden: 8,
                batch_size: 8,
                warmup_steps: 8,
                ..DdpgConfig::default()
            },
            episodes: 3,
            eta: 0.1,
            seed: 9,
            safe: true,
            projection: ProjectionOptions::default(),
            sweep: SweepOptions::default(),
        };
        let (_, logs) = train(&f, &data, &cfg).unwrap();
        assert_eq!(logs.len(), 3);
        for log in &logs {
            assert!(
                log.relaxed_steps > 0 || log.max_linear_violation <= 1e-7,
                "episode {} linear violation {}",
                log.episode,
                log.max_linear_violation
            );
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let f = fixtures::chain(2, 0.01, 0.02);
        let data = synthetic_dataset(
            &f,
            &SyntheticConfig::default(),
            &uniform_allocation(&f),
            2,
            0,
            3600,
            2,
        );
        let cfg = TrainConfig {
            ddpg: DdpgConfig {
                hidden: 8,
                batch_size: 8,
                warmup_steps: 8,
                ..DdpgConfig::default()
            },
            episodes: 2,
            eta: 0.1,
            seed: 77,
            safe: false,
            projection: ProjectionOptions::default(),
            sweep: SweepOptions::default(),
        };
        let (agent_a, logs_a) = train(&f, &data, &cfg).unwrap();
        let (agent_b, logs_b) = train(&f, &data, &cfg).unwrap();
        for (a, b) in logs_a.iter().zip(&logs_b) {
            assert_eq!(a.ret.to_bits(), b.ret.to_bits());
            assert_eq!(a.violations, b.violations);
            assert_eq!(
                a.mean_critic_loss.to_bits(),
                b.mean_critic_loss.to_bits()
            );
        }
        for (la, lb) in agent_a.actor.layers.iter().zip(&agent_b.actor.layers) {
            assert_eq!(la.w, lb.w);
            assert_eq!(la.b, lb.b);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_the_policy() {
        let f = fixtures::chain(2, 0.01, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let agent = Agent::new(4, &f.q_boxes(), DdpgConfig::default(), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        agent.to_checkpoint(&f).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let restored = Agent::from_checkpoint(loaded, &f).unwrap();
        let obs = [1.0, 0.99, -0.1, -0.2];
        assert_eq!(
            agent.act(&obs, false, &mut rng),
            restored.act(&obs, false, &mut rng)
        );
    }

    #[test]
    fn checkpoint_refuses_a_different_feeder() {
        let f = fixtures::chain(2, 0.01, 0.02);
        let other = fixtures::chain(2, 0.02, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let agent = Agent::new(4, &f.q_boxes(), DdpgConfig::default(), &mut rng);
        let ck = agent.to_checkpoint(&f);
        let err = Agent::from_checkpoint(ck, &other).unwrap_err();
        assert!(matches!(err, CheckpointError::FingerprintMismatch { .. }));
    }

    impl Agent {
        /// Cheap copy for finite-difference probes in tests.
        fn clone_for_check(&self) -> Agent {
            Agent {
                actor: self.actor.clone(),
                critic: self.critic.clone(),
                target_actor: self.target_actor.clone(),
                target_critic: self.target_critic.clone(),
                actor_opt: self.actor_opt.clone(),
                critic_opt: self.critic_opt.clone(),
                buffer: ReplayBuffer::new(self.config.buffer_capacity),
                config: self.config.clone(),
                centers: self.centers.clone(),
                halves: self.halves.clone(),
                noise_sigma: self.noise_sigma,
                state_dim: self.state_dim,
                action_dim: self.action_dim,
                updates: self.updates,
            }
        }

        fn shallow_with_critic(&self, critic: Mlp) -> Agent {
            let mut a = self.clone_for_check();
            a.critic = critic;
            a
        }

        fn shallow_with_actor(&self, actor: Mlp) -> Agent {
            let mut a = self.clone_for_check();
            a.actor = actor;
            a
        }
    }
}
