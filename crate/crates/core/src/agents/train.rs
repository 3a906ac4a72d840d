use serde::{Deserialize, Serialize};

use super::{
    actor_update_bear_impl, actor_update_td3bc_impl, bc_update, critic_update_impl, AgentConfig,
    AgentState, Algorithm, StepMetrics,
};
use crate::datasets::{fit_normalizer, percentile_filter, Dataset, TrainingArrays};
use crate::diffnet::Rng;
use crate::divergences::behavior_fit;
use crate::error::{Error, Result};
use crate::eval::{
    divergence_diagnostic, failure_detector, grad_norm_profile, q_separability, rollout_score,
    theorem2_bound, EvalReport, GradSampler, LipschitzSpec, Verdict,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub metrics: StepMetrics,
}

/// Receives logs as training progresses.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after every evaluation checkpoint; `is_best` marks a new best
    /// normalized score.
    fn on_eval(&mut self, _report: &EvalReport, _state: &AgentState, _is_best: bool) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: AgentState,
    /// Highest-scoring checkpoint and its score.
    pub best: Option<(f64, AgentState)>,
    pub step_log: Vec<StepRecord>,
    pub evals: Vec<EvalReport>,
    /// Set when the run aborted on a non-finite quantity.
    pub abort: Option<String>,
    pub verdict: Verdict,
}

impl TrainOutcome {
    pub fn failed(&self) -> bool {
        self.abort.is_some() || self.verdict.failed
    }
}

pub fn train(cfg: &AgentConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_impl::<true>(cfg, ds, &mut NoopObserver)
}

pub fn train_observed(cfg: &AgentConfig, ds: &Dataset, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    train_impl::<true>(cfg, ds, observer)
}

/// The backbone with every plugin code path compiled out.
pub fn train_backbone(cfg: &AgentConfig, ds: &Dataset) -> Result<TrainOutcome> {
    if cfg.use_gp || cfg.use_cr {
        return Err(Error::Config("train_backbone runs without plugins".into()));
    }
    train_impl::<false>(cfg, ds, &mut NoopObserver)
}

struct EvalContext<'a> {
    cfg: &'a AgentConfig,
    ds: &'a Dataset,
    arrays: &'a TrainingArrays,
    root: &'a Rng,
}

impl EvalContext<'_> {
    fn evaluate(&self, state: &AgentState) -> Result<EvalReport> {
        let cfg = self.cfg;
        let spec = self.ds.spec();
        let (mean_return, normalized_score) = rollout_score(
            |obs| state.actor.act_raw(&state.normalizer, obs),
            cfg.env,
            self.ds.meta.reference_returns.as_ref(),
            cfg.eval_episodes,
            self.root.child_named("eval-env").seed(),
        )?;
        let predicted = state.actor.act(&self.arrays.states)?;
        let div = divergence_diagnostic(&predicted, self.ds)?;
        let counts = &self.ds.meta.counts;
        let q_separability_auc = if cfg.algorithm != Algorithm::Bc && counts.expert > 0 && counts.nonexpert() > 0 {
            let mut r = self.root.child_named("separability").child(state.step);
            Some(q_separability(&state.critics(), &self.arrays.states, self.ds, cfg.separability_samples, &mut r)?.auc)
        } else {
            None
        };
        let mut r = self.root.child_named("grad-profile").child(state.step);
        let grad_norm = grad_norm_profile(
            &state.critics(),
            &self.arrays.states,
            GradSampler::Random {
                action_dim: spec.action_dim,
            },
            cfg.grad_norm_samples,
            &mut r,
        )?;
        let theorem2_bound = cfg
            .lipschitz_coupling
            .map(|coupling| {
                theorem2_bound(&LipschitzSpec {
                    action_dim: spec.action_dim,
                    reward_lipschitz: spec.reward_lipschitz,
                    gamma: cfg.gamma,
                    coupling,
                })
            })
            .transpose()?;
        Ok(EvalReport {
            step: state.step,
            mean_return,
            normalized_score,
            divergence_expert_p75: div.expert_p75,
            divergence_nonexpert_p75: div.nonexpert_p75,
            q_separability_auc,
            grad_norm,
            theorem2_bound,
        })
    }
}

fn step_once<const PLUGINS: bool>(
    state: &mut AgentState,
    cfg: &AgentConfig,
    arrays: &TrainingArrays,
    root: &Rng,
) -> Result<StepMetrics> {
    state.step += 1;
    let it = state.step;
    let step_rng = root.child_named("step").child(it);
    let batch = arrays.sample(cfg.batch_size, &mut step_rng.child_named("batch"));
    match cfg.algorithm {
        Algorithm::Bc => bc_update(&batch, state),
        Algorithm::Td3bc => {
            let m = critic_update_impl::<PLUGINS>(&batch, state, cfg, &step_rng, 1.0)?;
            if it % cfg.policy_delay == 0 {
                Ok(m.merge(actor_update_td3bc_impl::<PLUGINS>(&batch, state, cfg)?))
            } else {
                Ok(m)
            }
        }
        Algorithm::Bear => {
            let m = critic_update_impl::<PLUGINS>(&batch, state, cfg, &step_rng, 1.0)?;
            Ok(m.merge(actor_update_bear_impl::<PLUGINS>(&batch, state, cfg, &step_rng)?))
        }
    }
}

fn train_impl<const PLUGINS: bool>(
    cfg: &AgentConfig,
    ds: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.meta.env != cfg.env {
        return Err(Error::Config(format!(
            "dataset is for {}, config for {}",
            ds.meta.env, cfg.env
        )));
    }
    if ds.meta.reference_returns.is_none() {
        return Err(Error::Missing("dataset has no reference returns".into()));
    }
    let filtered;
    let ds = match cfg.percentile {
        Some(p) => {
            filtered = percentile_filter(ds, p)?;
            &filtered
        }
        None => ds,
    };
    let normalizer = fit_normalizer(ds)?;
    let arrays = TrainingArrays::new(ds, &normalizer);
    let root = Rng::new(cfg.seed);
    let mut state = AgentState::new(cfg, &ds.spec(), normalizer, &root.child_named("init"))?;
    if cfg.algorithm == Algorithm::Bear {
        let (model, _) = behavior_fit(&arrays, &cfg.behavior, &root.child_named("behavior"))?;
        state.behavior = Some(model);
    }
    let ctx = EvalContext {
        cfg,
        ds,
        arrays: &arrays,
        root: &root,
    };

    let mut step_log = Vec::new();
    let mut evals: Vec<EvalReport> = Vec::new();
    let mut best: Option<(f64, AgentState)> = None;
    let mut abort = None;
    while state.step < cfg.total_steps {
        let metrics = match step_once::<PLUGINS>(&mut state, cfg, &arrays, &root) {
            Ok(m) if m.is_finite() && state.is_finite() => m,
            Ok(m) => {
                abort = Some(format!("non-finite state or metrics at step {}: {m:?}", state.step));
                break;
            }
            Err(e @ Error::Numerical { .. }) => {
                abort = Some(format!("step {}: {e}", state.step));
                break;
            }
            Err(e) => return Err(e),
        };
        if state.step % cfg.log_interval == 0 {
            let record = StepRecord {
                step: state.step,
                metrics,
            };
            observer.on_step(&record)?;
            step_log.push(record);
        }
        if state.step % cfg.eval_interval == 0 {
            let report = ctx.evaluate(&state)?;
            let is_best = best.as_ref().is_none_or(|(s, _)| report.normalized_score > *s);
            if is_best {
                best = Some((report.normalized_score, state.clone()));
            }
            observer.on_eval(&report, &state, is_best)?;
            evals.push(report);
        }
    }
    let verdict = failure_detector(&evals, &cfg.detector);
    Ok(TrainOutcome {
        state,
        best,
        step_log,
        evals,
        abort,
        verdict,
    })
}
