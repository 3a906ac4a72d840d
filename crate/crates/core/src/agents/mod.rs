//! Offline actor-critic agents: behavior cloning, TD3+BC and BEAR-QL, each
//! optionally augmented with the action-gradient penalty on the critics
//! (`use_gp`) and critic-weighted relaxation of the policy constraint
//! (`use_cr`).
//!
//! Update functions are generic over `PLUGINS`; the `false` instantiation is
//! the backbone with every plugin branch compiled out, which lets tests check
//! that disabled plugins leave the backbone bit-for-bit unchanged.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{AgentConfig, Algorithm, CrMode, GpSampling};
pub use train::{train, train_backbone, train_observed, NoopObserver, StepRecord, TrainObserver, TrainOutcome};

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datasets::{Batch, Normalizer};
use crate::diffnet::{
    concat_inputs, gp_value_and_param_grad, polyak_update, Activation, MlpParams, MlpSpec,
    OptimState, Rng,
};
use crate::divergences::{blockwise_mmd, BehaviorModel, GaussianPolicy};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};

pub const ETA_MIN: f64 = 1e-6;
pub const ETA_MAX: f64 = 1e6;

/// Borrowed twin critics.
#[derive(Debug, Clone, Copy)]
pub struct CriticPair<'a> {
    pub q1: &'a MlpParams,
    pub q2: &'a MlpParams,
}

impl CriticPair<'_> {
    pub fn values(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let x = concat_inputs(states, actions);
        let q1 = self.q1.predict(&x)?.column(0).to_owned();
        let q2 = self.q2.predict(&x)?.column(0).to_owned();
        Ok((q1, q2))
    }

    /// `½(Q1 + Q2)` row by row.
    pub fn mean_q(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
        let (q1, q2) = self.values(states, actions)?;
        Ok((q1 + q2) * 0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Actor {
    /// tanh-bounded deterministic policy (BC, TD3+BC).
    Deterministic { net: MlpParams },
    /// Gaussian policy acting with its mean (BEAR).
    Gaussian { policy: GaussianPolicy },
}

impl Actor {
    /// Actions for normalized states.
    pub fn act(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        match self {
            Actor::Deterministic { net } => net.predict(states),
            Actor::Gaussian { policy } => policy.mean_action(states),
        }
    }

    pub fn act_raw(&self, normalizer: &Normalizer, obs: &[f64]) -> Result<Vec<f64>> {
        let s = Array2::from_shape_vec((1, obs.len()), normalizer.apply(obs))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.act(&s)?.row(0).to_vec())
    }

    pub fn net(&self) -> &MlpParams {
        match self {
            Actor::Deterministic { net } => net,
            Actor::Gaussian { policy } => &policy.net,
        }
    }

    pub fn net_mut(&mut self) -> &mut MlpParams {
        match self {
            Actor::Deterministic { net } => net,
            Actor::Gaussian { policy } => &mut policy.net,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub actor: Actor,
    pub actor_target: Actor,
    pub critic1: MlpParams,
    pub critic2: MlpParams,
    pub critic1_target: MlpParams,
    pub critic2_target: MlpParams,
    pub actor_opt: OptimState,
    pub critic1_opt: OptimState,
    pub critic2_opt: OptimState,
    pub behavior: Option<BehaviorModel>,
    /// Lagrange multiplier of the BEAR constraint, stored as `ln η`.
    pub log_eta: f64,
    pub step: u64,
    pub normalizer: Normalizer,
}

impl AgentState {
    pub fn new(cfg: &AgentConfig, spec: &EnvSpec, normalizer: Normalizer, rng: &Rng) -> Result<Self> {
        let (sd, ad) = (spec.state_dim, spec.action_dim);
        let actor = match cfg.algorithm {
            Algorithm::Bear => Actor::Gaussian {
                policy: GaussianPolicy::init(sd, ad, &cfg.hidden, &mut rng.child_named("actor"))?,
            },
            _ => {
                let spec = MlpSpec::new(sd, cfg.hidden.clone(), ad, Activation::Relu, Activation::Tanh)?;
                Actor::Deterministic {
                    net: MlpParams::init(&spec, &mut rng.child_named("actor"))?,
                }
            }
        };
        let cspec = MlpSpec::new(sd + ad, cfg.hidden.clone(), 1, Activation::Relu, Activation::Identity)?;
        let critic1 = MlpParams::init(&cspec, &mut rng.child_named("critic1"))?;
        let critic2 = MlpParams::init(&cspec, &mut rng.child_named("critic2"))?;
        Ok(Self {
            actor_opt: OptimState::new(actor.net(), cfg.actor_lr),
            critic1_opt: OptimState::new(&critic1, cfg.critic_lr),
            critic2_opt: OptimState::new(&critic2, cfg.critic_lr),
            actor_target: actor.clone(),
            actor,
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            critic1,
            critic2,
            behavior: None,
            log_eta: cfg.initial_log_eta.clamp(ETA_MIN.ln(), ETA_MAX.ln()),
            step: 0,
            normalizer,
        })
    }

    pub fn critics(&self) -> CriticPair<'_> {
        CriticPair {
            q1: &self.critic1,
            q2: &self.critic2,
        }
    }

    pub fn eta(&self) -> f64 {
        self.log_eta.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.actor.net().is_finite()
            && self.critic1.is_finite()
            && self.critic2.is_finite()
            && self.log_eta.is_finite()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub gp_penalty: Option<f64>,
    pub mean_abs_q: Option<f64>,
    pub mean_w: Option<f64>,
    pub mmd: Option<f64>,
    pub eta: Option<f64>,
    pub grad_norm_p99: Option<f64>,
}

impl StepMetrics {
    /// Fields set in `other` override those in `self`.
    pub fn merge(self, other: StepMetrics) -> StepMetrics {
        StepMetrics {
            critic_loss: other.critic_loss.or(self.critic_loss),
            actor_loss: other.actor_loss.or(self.actor_loss),
            gp_penalty: other.gp_penalty.or(self.gp_penalty),
            mean_abs_q: other.mean_abs_q.or(self.mean_abs_q),
            mean_w: other.mean_w.or(self.mean_w),
            mmd: other.mmd.or(self.mmd),
            eta: other.eta.or(self.eta),
            grad_norm_p99: other.grad_norm_p99.or(self.grad_norm_p99),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.critic_loss,
            self.actor_loss,
            self.gp_penalty,
            self.mean_abs_q,
            self.mean_w,
            self.mmd,
            self.eta,
            self.grad_norm_p99,
        ]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
    }
}

/// Minimum that propagates NaN, unlike `f64::min`.
fn nan_min(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.min(b)
    }
}

fn first_non_finite(v: &Array1<f64>) -> Option<usize> {
    v.iter().position(|x| !x.is_finite())
}

/// Clipped double-Q targets with target-policy smoothing.
pub fn critic_targets(batch: &Batch, state: &AgentState, cfg: &AgentConfig, rng: &mut Rng) -> Result<Array1<f64>> {
    let mut next_a = state.actor_target.act(&batch.next_states)?;
    next_a.mapv_inplace(|a| {
        let noise = (cfg.policy_noise * rng.normal()).clamp(-cfg.noise_clip, cfg.noise_clip);
        (a + noise).clamp(-1.0, 1.0)
    });
    let target = CriticPair {
        q1: &state.critic1_target,
        q2: &state.critic2_target,
    };
    let (q1, q2) = target.values(&batch.next_states, &next_a)?;
    let y: Array1<f64> = ndarray::Zip::from(&batch.rewards)
        .and(&batch.dones)
        .and(&q1)
        .and(&q2)
        .map_collect(|&r, &d, &a, &b| r + cfg.gamma * (1.0 - d) * nan_min(a, b));
    if let Some(row) = first_non_finite(&y) {
        return Err(Error::Numerical {
            row,
            what: format!(
                "critic target (r = {}, q1' = {}, q2' = {})",
                batch.rewards[row], q1[row], q2[row]
            ),
        });
    }
    Ok(y)
}

/// Row-wise repetition of a batch: row `r·B + i` is row `i`.
fn tile(x: &Array2<f64>, times: usize) -> Array2<f64> {
    let n = x.nrows();
    let mut out = Array2::zeros((n * times, x.ncols()));
    for r in 0..times {
        out.slice_mut(s![r * n..(r + 1) * n, ..]).assign(x);
    }
    out
}

/// `W = (q − min q)/(max q − min q)`, or all ones for a constant batch; in
/// raw mode `W = q`.
pub fn cr_weights_from_q(q: &Array1<f64>, mode: CrMode) -> Array1<f64> {
    match mode {
        CrMode::Raw => q.clone(),
        CrMode::Minmax => {
            let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                q.mapv(|v| (v - lo) / (hi - lo))
            } else {
                Array1::ones(q.len())
            }
        }
    }
}

/// Detached relaxation weights from the mean twin-Q of the batch's
/// dataset actions.
pub fn cr_weights(state: &AgentState, batch: &Batch, mode: CrMode) -> Result<Array1<f64>> {
    let q = state.critics().mean_q(&batch.states, &batch.actions)?;
    Ok(cr_weights_from_q(&q, mode))
}

/// Twin-critic regression (plus the gradient penalty on scheduled steps),
/// one optimizer step on both critics and a Polyak update of their targets.
pub fn critic_update(batch: &Batch, state: &mut AgentState, cfg: &AgentConfig, rng: &Rng) -> Result<StepMetrics> {
    critic_update_impl::<true>(batch, state, cfg, rng, 1.0)
}

/// As [`critic_update`] with the regression term scaled by `regression_weight`.
pub fn critic_update_weighted(
    batch: &Batch,
    state: &mut AgentState,
    cfg: &AgentConfig,
    rng: &Rng,
    regression_weight: f64,
) -> Result<StepMetrics> {
    critic_update_impl::<true>(batch, state, cfg, rng, regression_weight)
}

pub(crate) fn critic_update_impl<const PLUGINS: bool>(
    batch: &Batch,
    state: &mut AgentState,
    cfg: &AgentConfig,
    rng: &Rng,
    regression_weight: f64,
) -> Result<StepMetrics> {
    let b = batch.states.nrows() as f64;
    let y = critic_targets(batch, state, cfg, &mut rng.child_named("target-noise"))?;
    let x = concat_inputs(&batch.states, &batch.actions);
    let (q1, tape1) = state.critic1.forward(&x)?;
    let (q2, tape2) = state.critic2.forward(&x)?;
    let d1 = &q1.column(0) - &y;
    let d2 = &q2.column(0) - &y;
    let mut loss = regression_weight * (d1.dot(&d1) + d2.dot(&d2)) / b;
    let og = |d: Array1<f64>| d.mapv(|v| 2.0 * regression_weight * v / b).insert_axis(Axis(1));
    let mut g1 = state.critic1.backward_params(&tape1, &og(d1))?;
    let mut g2 = state.critic2.backward_params(&tape2, &og(d2))?;

    let mut metrics = StepMetrics {
        mean_abs_q: Some(q1.mapv(f64::abs).mean().unwrap_or(0.0)),
        ..Default::default()
    };
    if PLUGINS && cfg.gp_active() {
        if state.step % cfg.gp_interval == 0 {
            let states = tile(&batch.states, cfg.gp_expansion);
            let actions = match cfg.gp_sampling {
                GpSampling::Random => {
                    let mut r = rng.child_named("gp-actions");
                    Array2::from_shape_simple_fn((states.nrows(), batch.actions.ncols()), || r.uniform(-1.0, 1.0))
                }
                GpSampling::Dataset => tile(&batch.actions, cfg.gp_expansion),
                GpSampling::Policy => tile(&state.actor.act(&batch.states)?, cfg.gp_expansion),
            };
            let p1 = gp_value_and_param_grad(&state.critic1, &states, &actions, cfg.gp_threshold)?;
            let p2 = gp_value_and_param_grad(&state.critic2, &states, &actions, cfg.gp_threshold)?;
            g1.add_scaled(&p1.grads, cfg.lambda_gp);
            g2.add_scaled(&p2.grads, cfg.lambda_gp);
            let penalty = p1.penalty + p2.penalty;
            loss += cfg.lambda_gp * penalty;
            let worst: Vec<f64> = p1.norms.iter().zip(&p2.norms).map(|(a, c)| a.max(*c)).collect();
            metrics.gp_penalty = Some(penalty);
            metrics.grad_norm_p99 = Some(crate::eval::nearest_rank(&worst, 99.0)?);
        } else {
            metrics.gp_penalty = Some(0.0);
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical {
            row: 0,
            what: format!("critic loss {loss}"),
        });
    }
    state.critic1_opt.step(&mut state.critic1, &g1)?;
    state.critic2_opt.step(&mut state.critic2, &g2)?;
    polyak_update(&mut state.critic1_target, &state.critic1, cfg.tau)?;
    polyak_update(&mut state.critic2_target, &state.critic2, cfg.tau)?;
    metrics.critic_loss = Some(loss);
    Ok(metrics)
}

fn deterministic_net(actor: &Actor) -> Result<&MlpParams> {
    match actor {
        Actor::Deterministic { net } => Ok(net),
        Actor::Gaussian { .. } => Err(Error::Config("this update needs a deterministic actor".into())),
    }
}

/// `−λ·mean Q1(s, π(s)) + mean_i w_i·mean_j (π(s_i)_j − a_ij)²` with
/// `λ = α / mean|Q1(s, π(s))|` held constant, followed by a Polyak update of
/// the actor target.
pub fn actor_update_td3bc(batch: &Batch, state: &mut AgentState, cfg: &AgentConfig) -> Result<StepMetrics> {
    actor_update_td3bc_impl::<true>(batch, state, cfg)
}

pub(crate) fn actor_update_td3bc_impl<const PLUGINS: bool>(
    batch: &Batch,
    state: &mut AgentState,
    cfg: &AgentConfig,
) -> Result<StepMetrics> {
    let net = deterministic_net(&state.actor)?;
    let (b, ad) = batch.actions.dim();
    let (pi, tape) = net.forward(&batch.states)?;
    let x = concat_inputs(&batch.states, &pi);
    let (q, ctape) = state.critic1.forward(&x)?;
    let mean_abs = q.mapv(f64::abs).mean().unwrap_or(0.0).max(1e-8);
    let lambda = cfg.alpha / mean_abs;
    let (_, dx) = state
        .critic1
        .backward(&ctape, &Array2::from_elem((b, 1), -lambda / b as f64))?;
    let mut d_pi = dx.slice(s![.., batch.states.ncols()..]).to_owned();

    let w = if PLUGINS && cfg.use_cr {
        Some(cr_weights(state, batch, cfg.cr_mode)?)
    } else {
        None
    };
    let diff = &pi - &batch.actions;
    let mut bc = 0.0;
    for i in 0..b {
        let wi = w.as_ref().map_or(1.0, |w| w[i]);
        let row = diff.row(i);
        bc += wi * row.dot(&row) / ad as f64;
        for j in 0..ad {
            d_pi[[i, j]] += 2.0 * wi * row[j] / (b * ad) as f64;
        }
    }
    bc /= b as f64;
    let loss = -lambda * q.mean().unwrap_or(0.0) + bc;
    if !loss.is_finite() {
        return Err(Error::Numerical {
            row: 0,
            what: format!("actor loss {loss}"),
        });
    }
    let grads = net.backward_params(&tape, &d_pi)?;
    state.actor_opt.step(state.actor.net_mut(), &grads)?;
    polyak_update(state.actor_target.net_mut(), state.actor.net(), cfg.tau)?;
    Ok(StepMetrics {
        actor_loss: Some(loss),
        mean_w: w.map(|w| w.mean().unwrap_or(0.0)),
        ..Default::default()
    })
}

/// Lagrangian BEAR actor step followed by dual ascent on `ln η`.
pub fn actor_update_bear(batch: &Batch, state: &mut AgentState, cfg: &AgentConfig, rng: &Rng) -> Result<StepMetrics> {
    actor_update_bear_impl::<true>(batch, state, cfg, rng)
}

pub(crate) fn actor_update_bear_impl<const PLUGINS: bool>(
    batch: &Batch,
    state: &mut AgentState,
    cfg: &AgentConfig,
    rng: &Rng,
) -> Result<StepMetrics> {
    let behavior = state
        .behavior
        .as_ref()
        .ok_or_else(|| Error::Config("BEAR needs a fitted behavior model".into()))?;
    let policy = match &state.actor {
        Actor::Gaussian { policy } => policy,
        Actor::Deterministic { .. } => return Err(Error::Config("BEAR needs a Gaussian actor".into())),
    };
    let kernel = cfg.kernel()?;
    let m = cfg.mmd_samples;
    let b = batch.states.nrows();
    let sd = batch.states.ncols();

    let fwd = policy.forward(&batch.states)?;
    let x = concat_inputs(&batch.states, &fwd.mean);
    let (q1, t1) = state.critic1.forward(&x)?;
    let (q2, t2) = state.critic2.forward(&x)?;
    let mut o1 = Array2::zeros((b, 1));
    let mut o2 = Array2::zeros((b, 1));
    let mut q_term = 0.0;
    for i in 0..b {
        if q1[[i, 0]] <= q2[[i, 0]] {
            o1[[i, 0]] = -1.0 / b as f64;
            q_term += q1[[i, 0]];
        } else {
            o2[[i, 0]] = -1.0 / b as f64;
            q_term += q2[[i, 0]];
        }
    }
    q_term /= b as f64;
    let (_, dx1) = state.critic1.backward(&t1, &o1)?;
    let (_, dx2) = state.critic2.backward(&t2, &o2)?;
    let d_mean = &dx1.slice(s![.., sd..]) + &dx2.slice(s![.., sd..]);

    let beta = crate::divergences::behavior_sample(behavior, &batch.states, m, &mut rng.child_named("behavior-samples"))?;
    let draw = policy.draw(&fwd, m, &mut rng.child_named("policy-samples"));
    let (mmd, d_y) = blockwise_mmd(&beta, &draw.samples, m, &kernel)?;

    let v = if PLUGINS && cfg.use_cr {
        let rep = batch.states.select(Axis(0), &(0..b * m).map(|r| r / m).collect::<Vec<_>>());
        let q = state.critics().mean_q(&rep, &beta)?;
        let per_state = q.into_shape_with_order((b, m)).map_err(|e| Error::Shape(e.to_string()))?;
        Some(cr_weights_from_q(&per_state.mean_axis(Axis(1)).expect("m > 0"), cfg.cr_mode))
    } else {
        None
    };
    let vi = |i: usize| v.as_ref().map_or(1.0, |v| v[i]);
    let eta = state.eta();
    let mut d_samples = d_y;
    for i in 0..b {
        let scale = eta * vi(i) / b as f64;
        d_samples.slice_mut(s![i * m..(i + 1) * m, ..]).mapv_inplace(|g| g * scale);
    }
    let weighted_mmd = (0..b).map(|i| vi(i) * mmd[i]).sum::<f64>() / b as f64;
    let slack = weighted_mmd - cfg.epsilon;
    let loss = -q_term + eta * (0..b).map(|i| vi(i) * (mmd[i] - cfg.epsilon)).sum::<f64>() / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical {
            row: 0,
            what: format!("BEAR actor loss {loss}"),
        });
    }
    let grads = policy.backward(&fwd, Some(&d_mean), None, Some((&draw, &d_samples)))?;
    state.actor_opt.step(state.actor.net_mut(), &grads)?;
    polyak_update(state.actor_target.net_mut(), state.actor.net(), cfg.tau)?;
    state.log_eta = (state.log_eta + cfg.dual_lr * slack).clamp(ETA_MIN.ln(), ETA_MAX.ln());
    Ok(StepMetrics {
        actor_loss: Some(loss),
        mmd: Some(mmd.mean().unwrap_or(0.0)),
        eta: Some(state.eta()),
        mean_w: v.map(|v| v.mean().unwrap_or(0.0)),
        ..Default::default()
    })
}

/// Plain behavior cloning: minimize `mean_i ‖π(s_i) − a_i‖²`.
pub fn bc_update(batch: &Batch, state: &mut AgentState) -> Result<StepMetrics> {
    let net = deterministic_net(&state.actor)?;
    let b = batch.states.nrows() as f64;
    let (pi, tape) = net.forward(&batch.states)?;
    let diff = &pi - &batch.actions;
    let loss = diff.mapv(|v| v * v).sum() / b;
    if !loss.is_finite() {
        return Err(Error::Numerical {
            row: 0,
            what: format!("BC loss {loss}"),
        });
    }
    let grads = net.backward_params(&tape, &(diff * (2.0 / b)))?;
    state.actor_opt.step(state.actor.net_mut(), &grads)?;
    Ok(StepMetrics {
        actor_loss: Some(loss),
        ..Default::default()
    })
}

#[cfg(test)]
mod tests;
