//! Deterministic continuous-control environments and scripted behavior policies.
//!
//! Two kinds are provided:
//!
//! * `pointmass2d`: a 2-D double integrator. State `[px, py, vx, vy]`, action is an
//!   acceleration in `[-1, 1]²`. `v ← v + dt·a`, `p ← p + dt·v`, reward
//!   `−‖p‖² − 0.01‖a‖²` evaluated at the pre-step state. Goal at the origin.
//! * `pendulum`: a torque-driven pendulum. State `[cos θ, sin θ, ω]` with θ = 0
//!   upright. `ω ← clip(ω + dt·(15 sin θ + 6u), ±8)`, `θ ← θ + dt·ω`, reward
//!   `−(θ² + 0.1ω² + 0.001u²)` with θ wrapped to `[−π, π)`.
//!
//! Both rewards are smooth in the action, and `reward_lipschitz` is the exact
//! supremum of `‖∂r/∂a‖₂` over the action box.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffnet::Rng;
use crate::error::{Error, Result};

pub const DT: f64 = 0.05;
const POS_BOUND: f64 = 5.0;
const VEL_BOUND: f64 = 5.0;
const PEND_MAX_SPEED: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Pointmass2d,
    Pendulum,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Pointmass2d => "pointmass2d",
            EnvKind::Pendulum => "pendulum",
        })
    }
}

impl FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass2d" => Ok(EnvKind::Pointmass2d),
            "pendulum" => Ok(EnvKind::Pendulum),
            other => Err(Error::Config(format!("unknown environment kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    /// Exact `sup ‖∂r/∂a‖₂` over the action box.
    pub reward_lipschitz: f64,
    pub dt: f64,
}

impl EnvSpec {
    pub fn of(kind: EnvKind) -> Self {
        match kind {
            // ∂r/∂a = −0.02a, maximal at a box corner: 0.02·√2.
            EnvKind::Pointmass2d => EnvSpec {
                kind,
                state_dim: 4,
                action_dim: 2,
                horizon: 100,
                reward_lipschitz: 0.02 * 2f64.sqrt(),
                dt: DT,
            },
            // ∂r/∂u = −0.002u.
            EnvKind::Pendulum => EnvSpec {
                kind,
                state_dim: 3,
                action_dim: 1,
                horizon: 200,
                reward_lipschitz: 0.002,
                dt: DT,
            },
        }
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Single-owner environment instance.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    rng: Rng,
    /// Internal physical state (pendulum keeps θ rather than cos/sin).
    phys: Vec<f64>,
    t: usize,
    done: bool,
}

pub fn make_env(kind: EnvKind, seed: u64) -> Env {
    let mut env = Env {
        spec: EnvSpec::of(kind),
        rng: Rng::new(seed),
        phys: Vec::new(),
        t: 0,
        done: true,
    };
    env.reset();
    env
}

fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Samples an initial state from d₀ and returns its observation.
    pub fn reset(&mut self) -> Vec<f64> {
        self.phys = match self.spec.kind {
            EnvKind::Pointmass2d => vec![
                self.rng.uniform(-1.0, 1.0),
                self.rng.uniform(-1.0, 1.0),
                0.0,
                0.0,
            ],
            EnvKind::Pendulum => vec![self.rng.uniform(-PI, PI), self.rng.uniform(-1.0, 1.0)],
        };
        self.t = 0;
        self.done = false;
        self.observe()
    }

    pub fn observe(&self) -> Vec<f64> {
        match self.spec.kind {
            EnvKind::Pointmass2d => self.phys.clone(),
            EnvKind::Pendulum => vec![self.phys[0].cos(), self.phys[0].sin(), self.phys[1]],
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Contract("step called after episode end".into()));
        }
        if action.len() != self.spec.action_dim {
            return Err(Error::Shape(format!(
                "action has {} entries, expected {}",
                action.len(),
                self.spec.action_dim
            )));
        }
        let a = self.spec.clip_action(action);
        let (next, reward) = transition(self.spec.kind, &self.phys, &a);
        self.phys = next;
        self.t += 1;
        self.done = self.t >= self.spec.horizon;
        Ok(StepResult {
            next_state: self.observe(),
            reward,
            done: self.done,
        })
    }
}

/// Deterministic dynamics on the physical state. Returns `(next, reward)`.
fn transition(kind: EnvKind, phys: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
    match kind {
        EnvKind::Pointmass2d => {
            let reward = -(phys[0] * phys[0] + phys[1] * phys[1])
                - 0.01 * (a[0] * a[0] + a[1] * a[1]);
            let vx = (phys[2] + DT * a[0]).clamp(-VEL_BOUND, VEL_BOUND);
            let vy = (phys[3] + DT * a[1]).clamp(-VEL_BOUND, VEL_BOUND);
            let px = (phys[0] + DT * vx).clamp(-POS_BOUND, POS_BOUND);
            let py = (phys[1] + DT * vy).clamp(-POS_BOUND, POS_BOUND);
            (vec![px, py, vx, vy], reward)
        }
        EnvKind::Pendulum => {
            let theta = wrap_angle(phys[0]);
            let omega = phys[1];
            let u = a[0];
            let reward = -(theta * theta + 0.1 * omega * omega + 0.001 * u * u);
            let omega2 = (omega + DT * (15.0 * theta.sin() + 6.0 * u))
                .clamp(-PEND_MAX_SPEED, PEND_MAX_SPEED);
            let theta2 = wrap_angle(theta + DT * omega2);
            (vec![theta2, omega2], reward)
        }
    }
}

/// Reward `r(s, a)` from an observation, matching what `step` would return.
pub fn reward(kind: EnvKind, obs: &[f64], a: &[f64]) -> f64 {
    let a: Vec<f64> = a.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    match kind {
        EnvKind::Pointmass2d => transition(kind, obs, &a).1,
        EnvKind::Pendulum => {
            let phys = [obs[1].atan2(obs[0]), obs[2]];
            transition(kind, &phys, &a).1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyLevel {
    Expert,
    Medium,
    Random,
}

impl fmt::Display for PolicyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyLevel::Expert => "expert",
            PolicyLevel::Medium => "medium",
            PolicyLevel::Random => "random",
        })
    }
}

impl FromStr for PolicyLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(PolicyLevel::Expert),
            "medium" => Ok(PolicyLevel::Medium),
            "random" => Ok(PolicyLevel::Random),
            other => Err(Error::Config(format!("unknown policy level `{other}`"))),
        }
    }
}

/// Expert gains. Pointmass: `a = clip(−KP·p − KD·v)`.
pub const POINTMASS_KP: f64 = 4.0;
pub const POINTMASS_KD: f64 = 4.0;
/// Pendulum: PD `u = clip(−KP·θ − KD·ω)` inside the capture zone, energy pumping outside.
pub const PENDULUM_KP: f64 = 8.0;
pub const PENDULUM_KD: f64 = 2.0;
const PENDULUM_CAPTURE: f64 = 0.3;
const PENDULUM_PUMP: f64 = 1.0;
const MEDIUM_NOISE: f64 = 0.3;

/// Scripted behavior policy of a given level.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub level: PolicyLevel,
    pub kind: EnvKind,
    rng: Rng,
}

impl ScriptedPolicy {
    pub fn new(level: PolicyLevel, kind: EnvKind, rng: Rng) -> Self {
        Self { level, kind, rng }
    }

    fn controller(&self, obs: &[f64], gain_scale: f64) -> Vec<f64> {
        match self.kind {
            EnvKind::Pointmass2d => (0..2)
                .map(|i| {
                    (-(POINTMASS_KP * gain_scale) * obs[i] - (POINTMASS_KD * gain_scale) * obs[i + 2])
                        .clamp(-1.0, 1.0)
                })
                .collect(),
            EnvKind::Pendulum => {
                let theta = obs[1].atan2(obs[0]);
                let omega = obs[2];
                let u = if theta.abs() < PENDULUM_CAPTURE {
                    -(PENDULUM_KP * gain_scale) * theta - (PENDULUM_KD * gain_scale) * omega
                } else {
                    // Zero at upright rest; dE/dt = 6uω, so pump along ω while E < 0.
                    let energy = 0.5 * omega * omega + 15.0 * (theta.cos() - 1.0);
                    -(PENDULUM_PUMP * gain_scale) * energy * omega
                };
                vec![u.clamp(-1.0, 1.0)]
            }
        }
    }

    pub fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        let d = EnvSpec::of(self.kind).action_dim;
        match self.level {
            PolicyLevel::Expert => self.controller(obs, 1.0),
            PolicyLevel::Medium => self
                .controller(obs, 0.5)
                .into_iter()
                .map(|u| (u + MEDIUM_NOISE * self.rng.normal()).clamp(-1.0, 1.0))
                .collect(),
            PolicyLevel::Random => (0..d).map(|_| self.rng.uniform(-1.0, 1.0)).collect(),
        }
    }
}

pub fn scripted_policy(level: PolicyLevel, kind: EnvKind, seed: u64) -> ScriptedPolicy {
    ScriptedPolicy::new(level, kind, Rng::new(seed).child_named("policy"))
}

/// Average undiscounted return of `policy` over `episodes` episodes.
pub fn average_return<F>(kind: EnvKind, seed: u64, episodes: usize, mut policy: F) -> f64
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut env = make_env(kind, seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset();
        loop {
            let a = policy(&obs);
            let step = env.step(&a).expect("episode loop respects horizon");
            total += step.reward;
            obs = step.next_state;
            if step.done {
                break;
            }
        }
    }
    total / episodes as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReturns {
    pub random: f64,
    pub expert: f64,
}

impl ReferenceReturns {
    pub fn normalize(&self, ret: f64) -> f64 {
        100.0 * (ret - self.random) / (self.expert - self.random)
    }
}

pub const REFERENCE_EPISODES: usize = 100;

/// 100-episode Monte-Carlo returns of the random and expert scripted policies.
pub fn reference_returns(kind: EnvKind, seed: u64) -> ReferenceReturns {
    let root = Rng::new(seed).child_named("reference");
    let env_seed = root.child_named("env").seed();
    let mut random = ScriptedPolicy::new(PolicyLevel::Random, kind, root.child_named("random"));
    let mut expert = ScriptedPolicy::new(PolicyLevel::Expert, kind, root.child_named("expert"));
    ReferenceReturns {
        random: average_return(kind, env_seed, REFERENCE_EPISODES, |s| random.act(s)),
        expert: average_return(kind, env_seed, REFERENCE_EPISODES, |s| expert.act(s)),
    }
}
