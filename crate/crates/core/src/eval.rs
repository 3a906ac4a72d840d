//! Evaluation diagnostics: normalized rollout scores, per-provenance action
//! divergence, critic separability, action-gradient norm profiles, the
//! Lipschitz bound on `‖∇_a Q‖` and a catastrophic-failure detector.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::agents::CriticPair;
use crate::datasets::Dataset;
use crate::diffnet::{action_grad_norms, Rng};
use crate::envs::{make_env, EnvKind, PolicyLevel, ReferenceReturns};
use crate::error::{Error, Result};

pub const EVAL_EPISODES: usize = 10;
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p75: f64,
    pub p99: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub mean_return: f64,
    pub normalized_score: f64,
    pub divergence_expert_p75: Option<f64>,
    pub divergence_nonexpert_p75: Option<f64>,
    pub q_separability_auc: Option<f64>,
    pub grad_norm: Percentiles,
    pub theorem2_bound: Option<f64>,
}

/// Nearest-rank percentile: the `⌈p/100·n⌉`-th smallest value.
pub fn nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Missing("percentile of an empty sample".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Contract(format!("percentile must be in (0, 100], got {p}")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = crate::datasets::robust_ceil(p / 100.0 * v.len() as f64).max(1);
    Ok(v[rank - 1])
}

pub fn percentiles(values: &[f64]) -> Result<Percentiles> {
    Ok(Percentiles {
        p50: nearest_rank(values, 50.0)?,
        p75: nearest_rank(values, 75.0)?,
        p99: nearest_rank(values, 99.0)?,
        max: nearest_rank(values, 100.0)?,
    })
}

/// Mean undiscounted return of a deterministic policy and its normalized score.
pub fn rollout_score<P>(
    mut policy: P,
    kind: EnvKind,
    refs: Option<&ReferenceReturns>,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    P: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let refs = refs.ok_or_else(|| Error::Missing("reference returns".into()))?;
    if episodes == 0 {
        return Err(Error::Contract("need at least one evaluation episode".into()));
    }
    let mut env = make_env(kind, seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset();
        loop {
            let a = env.spec().clip_action(&policy(&obs)?);
            let step = env.step(&a)?;
            total += step.reward;
            obs = step.next_state;
            if step.done {
                break;
            }
        }
    }
    let mean = total / episodes as f64;
    Ok((mean, refs.normalize(mean)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub expert_p75: Option<f64>,
    pub nonexpert_p75: Option<f64>,
}

/// 75th percentile of `‖π(s_i) − a_i‖²` split by provenance.
/// `predicted` holds the policy's action for every dataset row.
pub fn divergence_diagnostic(predicted: &Array2<f64>, ds: &Dataset) -> Result<Divergence> {
    if predicted.nrows() != ds.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} rows",
            predicted.nrows(),
            ds.len()
        )));
    }
    let mut expert = Vec::new();
    let mut other = Vec::new();
    for (row, t) in predicted.rows().into_iter().zip(&ds.transitions) {
        let d: f64 = row.iter().zip(&t.a).map(|(p, a)| (p - a) * (p - a)).sum();
        if t.provenance == PolicyLevel::Expert {
            expert.push(d);
        } else {
            other.push(d);
        }
    }
    let p75 = |v: &[f64]| -> Result<Option<f64>> {
        if v.is_empty() {
            Ok(None)
        } else {
            nearest_rank(v, 75.0).map(Some)
        }
    };
    Ok(Divergence {
        expert_p75: p75(&expert)?,
        nonexpert_p75: p75(&other)?,
    })
}

/// Probability that a random positive outranks a random negative, ties ½,
/// computed from midranks of the pooled sample.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Missing("AUC needs both classes".into()));
    }
    let mut pooled: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * pooled[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    pub lo: f64,
    pub hi: f64,
    pub expert: Vec<usize>,
    pub nonexpert: Vec<usize>,
}

/// Fixed-bin histograms of both samples over their shared range.
pub fn shared_histograms(pos: &[f64], neg: &[f64], bins: usize) -> Histograms {
    let all = pos.iter().chain(neg);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let fill = |v: &[f64]| {
        let mut h = vec![0; bins];
        for &x in v {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            h[b] += 1;
        }
        h
    };
    Histograms {
        lo,
        hi,
        expert: fill(pos),
        nonexpert: fill(neg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub auc: f64,
    pub histograms: Histograms,
}

/// Mean twin-Q on `sample_n` expert rows versus `sample_n` non-expert rows
/// (drawn with replacement). `states` are the normalized dataset states.
pub fn q_separability(
    critics: &CriticPair,
    states: &Array2<f64>,
    ds: &Dataset,
    sample_n: usize,
    rng: &mut Rng,
) -> Result<Separability> {
    let (exp_idx, other_idx): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| ds.transitions[i].provenance == PolicyLevel::Expert);
    if exp_idx.is_empty() || other_idx.is_empty() {
        return Err(Error::Missing("q_separability needs expert and non-expert rows".into()));
    }
    let actions = ds.actions();
    let mut pick = |pool: &[usize]| -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..sample_n).map(|_| pool[rng.index(pool.len())]).collect();
        let s = states.select(Axis(0), &idx);
        let a = actions.select(Axis(0), &idx);
        Ok(critics.mean_q(&s, &a)?.to_vec())
    };
    let pos = pick(&exp_idx)?;
    let neg = pick(&other_idx)?;
    Ok(Separability {
        auc: auc(&pos, &neg)?,
        histograms: shared_histograms(&pos, &neg, HISTOGRAM_BINS),
    })
}

/// Where the actions of a gradient-norm probe come from.
#[derive(Debug, Clone, Copy)]
pub enum GradSampler<'a> {
    /// Actions aligned with `states` (dataset rows or policy outputs).
    Aligned(&'a Array2<f64>),
    /// Uniform over the action box.
    Random { action_dim: usize },
}

/// Percentiles of `max(‖∇_a Q1‖, ‖∇_a Q2‖)` over `n` sampled (s, a) pairs.
pub fn grad_norm_profile(
    critics: &CriticPair,
    states: &Array2<f64>,
    sampler: GradSampler,
    n: usize,
    rng: &mut Rng,
) -> Result<Percentiles> {
    if states.nrows() == 0 || n == 0 {
        return Err(Error::Contract("gradient profile needs states and n >= 1".into()));
    }
    let idx: Vec<usize> = (0..n).map(|_| rng.index(states.nrows())).collect();
    let s = states.select(Axis(0), &idx);
    let a = match sampler {
        GradSampler::Aligned(actions) => actions.select(Axis(0), &idx),
        GradSampler::Random { action_dim } => {
            Array2::from_shape_simple_fn((n, action_dim), || rng.uniform(-1.0, 1.0))
        }
    };
    let n1 = action_grad_norms(critics.q1, &s, &a)?;
    let n2 = action_grad_norms(critics.q2, &s, &a)?;
    let m: Vec<f64> = n1.iter().zip(&n2).map(|(x, y)| x.max(*y)).collect();
    percentiles(&m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzSpec {
    pub action_dim: usize,
    pub reward_lipschitz: f64,
    pub gamma: f64,
    /// Composite Lipschitz constant of policy and dynamics.
    pub coupling: f64,
}

/// `√N·L_r / (1 − γ·L)`.
pub fn theorem2_bound(spec: &LipschitzSpec) -> Result<f64> {
    let LipschitzSpec {
        action_dim,
        reward_lipschitz,
        gamma,
        coupling,
    } = *spec;
    if action_dim == 0 || reward_lipschitz < 0.0 || !(0.0..1.0).contains(&gamma) || coupling < 0.0 {
        return Err(Error::Domain(format!("invalid Lipschitz spec {spec:?}")));
    }
    if gamma * coupling >= 1.0 {
        return Err(Error::Domain(format!(
            "γ·L = {} must be < 1",
            gamma * coupling
        )));
    }
    Ok((action_dim as f64).sqrt() * reward_lipschitz / (1.0 - gamma * coupling))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub score_fraction: f64,
    pub consecutive: usize,
    pub grad_ratio: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            score_fraction: 0.25,
            consecutive: 3,
            grad_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureCause {
    Score,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub failed: bool,
    /// Index into the checkpoint log where the flag was raised.
    pub onset_index: Option<usize>,
    pub onset_step: Option<u64>,
    pub cause: Option<FailureCause>,
}

/// Flags the first checkpoint where either the score has stayed below
/// `score_fraction` of its running maximum for `consecutive` checkpoints, or
/// the p99 gradient norm exceeds `grad_ratio` times its first value.
pub fn failure_detector(log: &[EvalReport], cfg: &DetectorConfig) -> Verdict {
    let mut running_max = f64::NEG_INFINITY;
    let mut below = 0;
    let first_grad = log.first().map(|r| r.grad_norm.p99);
    for (i, r) in log.iter().enumerate() {
        running_max = running_max.max(r.normalized_score);
        if r.normalized_score < cfg.score_fraction * running_max {
            below += 1;
        } else {
            below = 0;
        }
        let cause = if below >= cfg.consecutive {
            Some(FailureCause::Score)
        } else if first_grad.is_some_and(|g0| r.grad_norm.p99 > cfg.grad_ratio * g0) {
            Some(FailureCause::Gradient)
        } else {
            None
        };
        if cause.is_some() {
            return Verdict {
                failed: true,
                onset_index: Some(i),
                onset_step: Some(r.step),
                cause,
            };
        }
    }
    Verdict {
        failed: false,
        onset_index: None,
        onset_step: None,
        cause: None,
    }
}
