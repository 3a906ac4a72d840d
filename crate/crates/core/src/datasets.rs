//! Offline datasets: collection, tail contamination, statistics, state
//! normalization, reward-percentile filtering and JSON-lines storage.
//!
//! On disk a dataset is two files: `<name>.jsonl` with one transition per line
//! (`{"s":[..],"a":[..],"r":..,"s_next":[..],"done":..,"provenance":".."}`,
//! floats written with 17 significant digits) and a sidecar `<name>.meta.json`
//! holding [`DatasetMeta`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::diffnet::Rng;
use crate::envs::{make_env, EnvKind, EnvSpec, PolicyLevel, ReferenceReturns, ScriptedPolicy};
use crate::error::{Error, Result};

pub type Provenance = PolicyLevel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceCounts {
    pub expert: usize,
    pub medium: usize,
    pub random: usize,
}

impl ProvenanceCounts {
    pub fn of(transitions: &[Transition]) -> Self {
        let mut c = Self::default();
        for t in transitions {
            match t.provenance {
                PolicyLevel::Expert => c.expert += 1,
                PolicyLevel::Medium => c.medium += 1,
                PolicyLevel::Random => c.random += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.expert + self.medium + self.random
    }

    pub fn nonexpert(&self) -> usize {
        self.medium + self.random
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-3;

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, sd))| (x - m) / sd)
            .collect()
    }

    pub fn apply_rows(&self, states: &Array2<f64>) -> Array2<f64> {
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        (states - &mean) / &std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: EnvKind,
    pub seed: u64,
    pub counts: ProvenanceCounts,
    pub average_reward: f64,
    pub reference_returns: Option<ReferenceReturns>,
    pub normalizer: Option<Normalizer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
}

fn mean_reward(ts: &[Transition]) -> f64 {
    if ts.is_empty() {
        0.0
    } else {
        ts.iter().map(|t| t.r).sum::<f64>() / ts.len() as f64
    }
}

/// `⌊x⌋`, tolerant of representation error just below an integer (0.29·100).
pub(crate) fn robust_floor(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

pub(crate) fn robust_ceil(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

impl Dataset {
    pub fn new(env: EnvKind, seed: u64, transitions: Vec<Transition>) -> Self {
        let meta = DatasetMeta {
            env,
            seed,
            counts: ProvenanceCounts::of(&transitions),
            average_reward: mean_reward(&transitions),
            reference_returns: None,
            normalizer: None,
        };
        Self { transitions, meta }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec::of(self.meta.env)
    }

    fn refresh_meta(&mut self) {
        self.meta.counts = ProvenanceCounts::of(&self.transitions);
        self.meta.average_reward = mean_reward(&self.transitions);
    }

    pub fn with_reference_returns(mut self, refs: ReferenceReturns) -> Self {
        self.meta.reference_returns = Some(refs);
        self
    }

    pub fn states(&self) -> Array2<f64> {
        rows_of(self.transitions.iter().map(|t| t.s.as_slice()), self.spec().state_dim)
    }

    pub fn actions(&self) -> Array2<f64> {
        rows_of(self.transitions.iter().map(|t| t.a.as_slice()), self.spec().action_dim)
    }
}

pub(crate) fn rows_of<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    let n = flat.len() / dim.max(1);
    Array2::from_shape_vec((n, dim), flat).expect("rows have uniform width")
}

/// Rolls out whole episodes of `policy` until exactly `n` transitions exist;
/// the last episode is truncated.
pub fn collect(kind: EnvKind, policy: &mut ScriptedPolicy, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("collect needs n >= 1".into()));
    }
    let mut env = make_env(kind, Rng::new(seed).child_named("env").seed());
    let mut out = Vec::with_capacity(n);
    'episodes: loop {
        let mut s = env.reset();
        loop {
            let a = env.spec().clip_action(&policy.act(&s));
            let step = env.step(&a)?;
            out.push(Transition {
                s,
                a,
                r: step.reward,
                s_next: step.next_state.clone(),
                done: step.done,
                provenance: policy.level,
            });
            if out.len() == n {
                break 'episodes;
            }
            if step.done {
                break;
            }
            s = step.next_state;
        }
    }
    Ok(Dataset::new(kind, seed, out))
}

/// Collects `n` transitions of the scripted policy at `level`.
pub fn collect_level(kind: EnvKind, level: PolicyLevel, n: usize, seed: u64) -> Result<Dataset> {
    let root = Rng::new(seed);
    let mut policy = ScriptedPolicy::new(level, kind, root.child_named(&format!("policy-{level}")));
    collect(kind, &mut policy, n, root.child_named(&format!("data-{level}")).seed())
}

/// Replaces the final `⌊ratio·N⌋` expert transitions with the first
/// `⌊ratio·N⌋` non-expert transitions.
pub fn contaminate(expert: &Dataset, nonexpert: &Dataset, ratio: f64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!("ratio must be in [0, 1], got {ratio}")));
    }
    if expert.meta.env != nonexpert.meta.env {
        return Err(Error::Contract(format!(
            "environment mismatch: {} vs {}",
            expert.meta.env, nonexpert.meta.env
        )));
    }
    let n = expert.len();
    let k = robust_floor(ratio * n as f64);
    if nonexpert.len() < k {
        return Err(Error::Contract(format!(
            "need {k} non-expert transitions, have {}",
            nonexpert.len()
        )));
    }
    let mut ts = Vec::with_capacity(n);
    ts.extend_from_slice(&expert.transitions[..n - k]);
    ts.extend_from_slice(&nonexpert.transitions[..k]);
    let mut out = Dataset {
        transitions: ts,
        meta: expert.meta.clone(),
    };
    out.refresh_meta();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub total: usize,
    pub expert: usize,
    pub medium: usize,
    pub random: usize,
    pub nonexpert: usize,
    pub average_reward: f64,
}

pub fn dataset_stats(ds: &Dataset) -> Stats {
    let c = ProvenanceCounts::of(&ds.transitions);
    Stats {
        total: ds.len(),
        expert: c.expert,
        medium: c.medium,
        random: c.random,
        nonexpert: c.nonexpert(),
        average_reward: mean_reward(&ds.transitions),
    }
}

/// Per-dimension mean and population std of all dataset states.
pub fn fit_normalizer(ds: &Dataset) -> Result<Normalizer> {
    if ds.is_empty() {
        return Err(Error::Missing("cannot fit a normalizer on an empty dataset".into()));
    }
    let states = ds.states();
    let n = states.nrows() as f64;
    let mean = states.sum_axis(ndarray::Axis(0)) / n;
    let centered = &states - &mean;
    let var = (&centered * &centered).sum_axis(ndarray::Axis(0)) / n;
    Ok(Normalizer {
        mean: mean.to_vec(),
        std: var.iter().map(|v| v.sqrt().max(STD_FLOOR)).collect(),
    })
}

/// Keeps the `⌈X/100·N⌉` highest-reward transitions (earlier index wins ties),
/// preserving their original order.
pub fn percentile_filter(ds: &Dataset, percent: f64) -> Result<Dataset> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Contract(format!("percent must be in (0, 100], got {percent}")));
    }
    let n = ds.len();
    let keep = robust_ceil(percent / 100.0 * n as f64).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        ds.transitions[j]
            .r
            .total_cmp(&ds.transitions[i].r)
            .then(i.cmp(&j))
    });
    idx.truncate(keep);
    idx.sort_unstable();
    let mut out = Dataset {
        transitions: idx.into_iter().map(|i| ds.transitions[i].clone()).collect(),
        meta: ds.meta.clone(),
    };
    out.refresh_meta();
    out.meta.normalizer = None;
    Ok(out)
}

/// `<path>` with its extension replaced by `meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn push_float(buf: &mut String, x: f64) -> Result<()> {
    use std::fmt::Write as _;
    if !x.is_finite() {
        return Err(Error::Contract(format!("cannot serialize non-finite value {x}")));
    }
    write!(buf, "{x:.16e}").expect("write to String");
    Ok(())
}

fn push_vec(buf: &mut String, xs: &[f64]) -> Result<()> {
    buf.push('[');
    for (i, &x) in xs.iter().enumerate() {
        if i > 0 {
            buf.push(',');
        }
        push_float(buf, x)?;
    }
    buf.push(']');
    Ok(())
}

fn transition_line(t: &Transition) -> Result<String> {
    let mut line = String::with_capacity(256);
    line.push_str("{\"s\":");
    push_vec(&mut line, &t.s)?;
    line.push_str(",\"a\":");
    push_vec(&mut line, &t.a)?;
    line.push_str(",\"r\":");
    push_float(&mut line, t.r)?;
    line.push_str(",\"s_next\":");
    push_vec(&mut line, &t.s_next)?;
    line.push_str(if t.done { ",\"done\":true" } else { ",\"done\":false" });
    line.push_str(",\"provenance\":\"");
    line.push_str(&t.provenance.to_string());
    line.push_str("\"}");
    Ok(line)
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in &ds.transitions {
        writeln!(w, "{}", transition_line(t)?)?;
    }
    w.flush()?;
    w.get_ref().sync_all()?;
    let meta = serde_json::to_string_pretty(&ds.meta)?;
    std::fs::write(meta_path(path), meta)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
    let spec = EnvSpec::of(meta.env);
    let reader = BufReader::new(File::open(path)?);
    let mut transitions = Vec::with_capacity(meta.counts.total());
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Transition = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if t.s.len() != spec.state_dim
            || t.s_next.len() != spec.state_dim
            || t.a.len() != spec.action_dim
        {
            return Err(Error::Parse {
                line: i + 1,
                msg: "vector width does not match the environment".into(),
            });
        }
        transitions.push(t);
    }
    let expected = meta.counts.total();
    if transitions.len() != expected {
        return Err(Error::Integrity {
            expected,
            found: transitions.len(),
        });
    }
    if ProvenanceCounts::of(&transitions) != meta.counts {
        return Err(Error::Integrity {
            expected,
            found: transitions.len(),
        });
    }
    Ok(Dataset { transitions, meta })
}

/// Array view of a dataset for mini-batch training, states already normalized.
#[derive(Debug, Clone)]
pub struct TrainingArrays {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

/// A sampled mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

impl TrainingArrays {
    pub fn new(ds: &Dataset, normalizer: &Normalizer) -> Self {
        let spec = ds.spec();
        let s = rows_of(ds.transitions.iter().map(|t| t.s.as_slice()), spec.state_dim);
        let sn = rows_of(ds.transitions.iter().map(|t| t.s_next.as_slice()), spec.state_dim);
        Self {
            states: normalizer.apply_rows(&s),
            actions: ds.actions(),
            rewards: ds.transitions.iter().map(|t| t.r).collect(),
            next_states: normalizer.apply_rows(&sn),
            dones: ds.transitions.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        use ndarray::Axis;
        Batch {
            states: self.states.select(Axis(0), idx),
            actions: self.actions.select(Axis(0), idx),
            rewards: self.rewards.select(Axis(0), idx),
            next_states: self.next_states.select(Axis(0), idx),
            dones: self.dones.select(Axis(0), idx),
        }
    }

    /// Uniform sampling with replacement.
    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Batch {
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.index(self.len())).collect();
        self.gather(&idx)
    }
}
