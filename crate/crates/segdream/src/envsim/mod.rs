//! Synthetic pixel-control environments with procedurally generated moving
//! distractors and analytically exact ground-truth task-relevance masks.
//!
//! The state decomposes into a task-relevant part (agent/goal or pendulum)
//! and a distractor part. Rewards and relevant dynamics never read the
//! distractor state; observations render both, with relevant sprites always
//! drawn on top of distractors so the ground-truth mask is exact.

mod distractor;
mod render;

pub use distractor::DistractorState;
pub use render::{render_clean, render_observation, sprite_colors};

use crate::config::{EnvConfig, RewardMode, Task};
use crate::error::{Result, SdError};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Task-specific physical state (the reward-relevant component).
#[derive(Debug, Clone, PartialEq)]
pub enum TaskState {
    Dot { agent: [f64; 2], goal: [f64; 2] },
    Pendulum { theta: f64, omega: f64 },
}

/// Full environment state: relevant component, distractor component, step count.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub relevant: TaskState,
    pub distractor: DistractorState,
    pub step_index: usize,
}

/// One environment transition.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// RGB image in [0,1], shape `(H, W, 3)`.
    pub observation: Array3<f32>,
    /// Exact task-relevance mask under the configured scope.
    pub gt_mask: Array2<bool>,
    pub reward: f32,
    /// False only at the episode-length horizon.
    pub cont: bool,
    pub is_first: bool,
}

/// Per-decision-step displacement scale for the dot task.
pub const DOT_STEP: f64 = 0.05;
/// Dense-reward distance normalizer for the dot task.
pub const DOT_DENSE_SCALE: f64 = 0.5;
/// Sparse-reward hit radius for the dot task.
pub const DOT_SPARSE_RADIUS: f64 = 0.1;
/// Pendulum integration step (per substep).
pub const PENDULUM_DT: f64 = 0.05;
/// Pendulum torque scale.
pub const PENDULUM_TORQUE: f64 = 2.0;
const PENDULUM_GRAVITY: f64 = 10.0;
const PENDULUM_DAMPING: f64 = 0.1;
const PENDULUM_MAX_SPEED: f64 = 8.0;

/// Advance the task-relevant state by one decision step (`action_repeat`
/// substeps). Never reads the distractor state.
pub fn step_relevant(task: &TaskState, action: &[f64], action_repeat: usize) -> TaskState {
    let mut s = task.clone();
    for _ in 0..action_repeat {
        s = match s {
            TaskState::Dot { agent, goal } => {
                let scale = DOT_STEP / action_repeat as f64;
                TaskState::Dot {
                    agent: [
                        (agent[0] + scale * action[0]).clamp(0.0, 1.0),
                        (agent[1] + scale * action[1]).clamp(0.0, 1.0),
                    ],
                    goal,
                }
            }
            TaskState::Pendulum { theta, omega } => {
                let accel = PENDULUM_GRAVITY * theta.sin() + PENDULUM_TORQUE * action[0]
                    - PENDULUM_DAMPING * omega;
                let new_theta = wrap_angle(theta + PENDULUM_DT * omega);
                let new_omega =
                    (omega + PENDULUM_DT * accel).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                TaskState::Pendulum {
                    theta: new_theta,
                    omega: new_omega,
                }
            }
        };
    }
    s
}

/// Reward as a function of the relevant state only.
pub fn reward_of(relevant: &TaskState, mode: RewardMode) -> f64 {
    match relevant {
        TaskState::Dot { agent, goal } => {
            let d = ((agent[0] - goal[0]).powi(2) + (agent[1] - goal[1]).powi(2)).sqrt();
            match mode {
                RewardMode::Dense => 1.0 - (d / DOT_DENSE_SCALE).clamp(0.0, 1.0),
                RewardMode::Sparse => {
                    if d <= DOT_SPARSE_RADIUS {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        }
        TaskState::Pendulum { theta, .. } => match mode {
            RewardMode::Dense => (theta.cos() + 1.0) / 2.0,
            RewardMode::Sparse => {
                if theta.cos() > 0.95 {
                    1.0
                } else {
                    0.0
                }
            }
        },
    }
}

fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + std::f64::consts::PI) % (2.0 * std::f64::consts::PI);
    if t < 0.0 {
        t += 2.0 * std::f64::consts::PI;
    }
    t - std::f64::consts::PI
}

/// A single environment instance. Not shareable across threads; run one
/// instance per worker with independent seeds.
pub struct Env {
    cfg: EnvConfig,
    state: Option<EnvState>,
    terminal: bool,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Env> {
        cfg.validate()?;
        Ok(Env {
            cfg,
            state: None,
            terminal: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn action_dim(&self) -> usize {
        self.cfg.action_dim()
    }

    /// Current state; panics when called before `reset`.
    pub fn state(&self) -> &EnvState {
        self.state.as_ref().expect("environment not reset")
    }

    /// Force a distractor state (used by decomposition tests).
    pub fn set_distractor(&mut self, d: DistractorState) {
        self.state.as_mut().expect("environment not reset").distractor = d;
    }

    /// Start a new episode, deterministic under `(config, episode_seed)`.
    pub fn reset(&mut self, episode_seed: u64) -> StepResult {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, episode_seed));
        let relevant = match self.cfg.task {
            Task::DotReacher => {
                let agent: [f64; 2] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
                // spawn separation keeps sparse episodes from starting solved
                let mut goal: [f64; 2] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
                while ((agent[0] - goal[0]).powi(2) + (agent[1] - goal[1]).powi(2)).sqrt() < 0.25 {
                    goal = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
                }
                TaskState::Dot { agent, goal }
            }
            Task::PixelPendulum => TaskState::Pendulum {
                theta: wrap_angle(std::f64::consts::PI + rng.random_range(-0.1..0.1)),
                omega: rng.random_range(-0.05..0.05),
            },
        };
        let distractor = DistractorState::init(&self.cfg, &mut rng);
        let state = EnvState {
            relevant,
            distractor,
            step_index: 0,
        };
        let (observation, gt_mask) = render_observation(&self.cfg, &state);
        self.state = Some(state);
        self.terminal = false;
        StepResult {
            observation,
            gt_mask,
            reward: 0.0,
            cont: true,
            is_first: true,
        }
    }

    /// Apply one decision step. Out-of-range action components are clipped.
    pub fn step(&mut self, action: &[f32]) -> Result<StepResult> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| SdError::Usage("step called before reset".into()))?;
        if self.terminal {
            return Err(SdError::Usage("step called after terminal step".into()));
        }
        let dim = self.cfg.action_dim();
        if action.len() != dim {
            return Err(SdError::Shape(format!(
                "action has {} components, task expects {dim}",
                action.len()
            )));
        }
        let clipped: Vec<f64> = action.iter().map(|a| (*a as f64).clamp(-1.0, 1.0)).collect();

        state.relevant = step_relevant(&state.relevant, &clipped, self.cfg.action_repeat);
        state.distractor.advance(&self.cfg);
        state.step_index += 1;

        let reward = reward_of(&state.relevant, self.cfg.reward_mode) as f32;
        let cont = state.step_index < self.cfg.episode_length;
        self.terminal = !cont;
        let (observation, gt_mask) = render_observation(&self.cfg, state);
        Ok(StepResult {
            observation,
            gt_mask,
            reward,
            cont,
            is_first: false,
        })
    }
}

/// Mixes the config seed with an episode seed (splitmix64 finalizer).
pub fn mix_seed(config_seed: u64, episode_seed: u64) -> u64 {
    let mut z = config_seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(episode_seed)
        .wrapping_add(0x632be59bd9b4e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
