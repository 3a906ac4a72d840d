use ndarray::{array, Array1, Array2};

use super::*;
use crate::datasets::{collect_level, contaminate, fit_normalizer, TrainingArrays};
use crate::envs::{reference_returns, EnvKind, PolicyLevel};

fn small_cfg(algorithm: Algorithm) -> AgentConfig {
    AgentConfig {
        algorithm,
        hidden: vec![16, 16],
        batch_size: 32,
        total_steps: 60,
        eval_interval: 30,
        log_interval: 10,
        eval_episodes: 2,
        separability_samples: 50,
        grad_norm_samples: 50,
        gp_expansion: 4,
        behavior: crate::divergences::BehaviorConfig {
            hidden: vec![16],
            steps: 50,
            batch_size: 32,
            lr: 1e-3,
        },
        ..AgentConfig::default()
    }
}

fn mixed_dataset() -> Dataset {
    let kind = EnvKind::Pointmass2d;
    let e = collect_level(kind, PolicyLevel::Expert, 400, 1).unwrap();
    let r = collect_level(kind, PolicyLevel::Random, 400, 1).unwrap();
    contaminate(&e, &r, 0.5)
        .unwrap()
        .with_reference_returns(reference_returns(kind, 0))
}

use crate::datasets::Dataset;

fn fixture(cfg: &AgentConfig) -> (AgentState, TrainingArrays) {
    let ds = mixed_dataset();
    let n = fit_normalizer(&ds).unwrap();
    let arrays = TrainingArrays::new(&ds, &n);
    let state = AgentState::new(cfg, &ds.spec(), n, &Rng::new(3)).unwrap();
    (state, arrays)
}

fn constant_critic(like: &MlpParams, c: f64) -> MlpParams {
    let mut q = like.clone();
    let last = q.layers_mut().len() - 1;
    q.layers_mut()[last].weight.fill(0.0);
    q.layers_mut()[last].bias.fill(c);
    q
}

#[test]
fn targets_terminal_discount_and_constant() {
    let cfg = small_cfg(Algorithm::Td3bc);
    let (mut state, arrays) = fixture(&cfg);
    state.critic1_target = constant_critic(&state.critic1, 3.0);
    state.critic2_target = constant_critic(&state.critic2, 3.0);
    let mut batch = arrays.sample(16, &mut Rng::new(1));
    batch.dones.fill(0.0);
    let y = critic_targets(&batch, &state, &cfg, &mut Rng::new(2)).unwrap();
    for (yi, ri) in y.iter().zip(&batch.rewards) {
        assert!((yi - (ri + 0.99 * 3.0)).abs() < 1e-12);
    }
    batch.dones.fill(1.0);
    let y = critic_targets(&batch, &state, &cfg, &mut Rng::new(2)).unwrap();
    assert_eq!(y, batch.rewards);
    batch.dones.fill(0.0);
    let cfg0 = AgentConfig { gamma: 0.0, ..cfg };
    let y = critic_targets(&batch, &state, &cfg0, &mut Rng::new(2)).unwrap();
    assert_eq!(y, batch.rewards);
}

#[test]
fn non_finite_target_is_reported() {
    let cfg = small_cfg(Algorithm::Td3bc);
    let (mut state, arrays) = fixture(&cfg);
    state.critic1_target = constant_critic(&state.critic1, f64::NAN);
    let batch = arrays.sample(8, &mut Rng::new(1));
    assert!(matches!(
        critic_targets(&batch, &state, &cfg, &mut Rng::new(2)),
        Err(Error::Numerical { .. })
    ));
}

#[test]
fn zero_lambda_gp_is_plain_regression() {
    let plain = small_cfg(Algorithm::Td3bc);
    let zero = AgentConfig {
        use_gp: true,
        lambda_gp: 0.0,
        ..plain.clone()
    };
    let (s0, arrays) = fixture(&plain);
    let (mut a, mut b) = (s0.clone(), s0);
    for step in 1..=10 {
        a.step = step;
        b.step = step;
        let batch = arrays.sample(32, &mut Rng::new(step));
        let ma = critic_update(&batch, &mut a, &plain, &Rng::new(100 + step)).unwrap();
        let mb = critic_update(&batch, &mut b, &zero, &Rng::new(100 + step)).unwrap();
        assert_eq!(ma, mb);
    }
    assert_eq!(a, b);
}

#[test]
fn gp_only_on_scheduled_steps() {
    let cfg = AgentConfig {
        use_gp: true,
        ..small_cfg(Algorithm::Td3bc)
    };
    let (mut state, arrays) = fixture(&cfg);
    for step in 1..=10u64 {
        state.step = step;
        let batch = arrays.sample(32, &mut Rng::new(step));
        let m = critic_update(&batch, &mut state, &cfg, &Rng::new(step)).unwrap();
        if step % 5 == 0 {
            assert!(m.grad_norm_p99.is_some());
        } else {
            assert_eq!(m.gp_penalty, Some(0.0));
            assert!(m.grad_norm_p99.is_none());
        }
    }
}

#[test]
fn cr_weight_cases() {
    assert_eq!(cr_weights_from_q(&array![2.0, 4.0, 6.0], CrMode::Minmax), array![0.0, 0.5, 1.0]);
    assert_eq!(cr_weights_from_q(&array![-3.0, -3.0], CrMode::Minmax), array![1.0, 1.0]);
    assert_eq!(cr_weights_from_q(&array![-3.0, 7.5], CrMode::Raw), array![-3.0, 7.5]);
}

#[test]
fn tiny_alpha_matches_behavior_cloning() {
    let cfg = AgentConfig {
        alpha: 1e-12,
        ..small_cfg(Algorithm::Td3bc)
    };
    let (s0, arrays) = fixture(&cfg);
    let batch = arrays.sample(32, &mut Rng::new(5));
    let mut a = s0.clone();
    let mut b = s0;
    actor_update_td3bc(&batch, &mut a, &cfg).unwrap();
    bc_update(&batch, &mut b).unwrap();
    // Both are single Adam steps of size ~lr; they differ only through eps.
    for (x, y) in a.actor.net().to_vec().iter().zip(b.actor.net().to_vec()) {
        assert!((x - y).abs() < 1e-3 * cfg.actor_lr, "{x} vs {y}");
    }
}

#[test]
fn bc_fits_repeated_transition() {
    let cfg = small_cfg(Algorithm::Bc);
    let (mut state, arrays) = fixture(&cfg);
    let mut batch = arrays.gather(&[7; 16]);
    batch.actions = Array2::from_shape_fn((16, 2), |(_, j)| if j == 0 { 0.6 } else { -0.3 });
    let mut last = f64::INFINITY;
    for _ in 0..2000 {
        last = bc_update(&batch, &mut state).unwrap().actor_loss.unwrap();
        assert!(last >= 0.0);
    }
    assert!(last < 1e-6, "loss {last}");
}

fn bear_state_with_self_behavior() -> (AgentState, TrainingArrays, AgentConfig) {
    let cfg = small_cfg(Algorithm::Bear);
    let (mut state, arrays) = fixture(&cfg);
    if let Actor::Gaussian { policy } = &mut state.actor {
        let last = policy.net.layers_mut().len() - 1;
        let layer = &mut policy.net.layers_mut()[last];
        layer.weight.slice_mut(s![2.., ..]).fill(0.0);
        layer.bias.slice_mut(s![2..]).fill(-5.0);
        state.behavior = Some(policy.clone());
    }
    (state, arrays, cfg)
}

#[test]
fn bear_identical_policies_decay_eta() {
    let (mut state, arrays, cfg) = bear_state_with_self_behavior();
    let batch = arrays.sample(32, &mut Rng::new(1));
    let eta0 = state.eta();
    let m = actor_update_bear(&batch, &mut state, &cfg, &Rng::new(4)).unwrap();
    // Draws are independent, so only the constraint slack is guaranteed negative.
    assert!(m.mmd.unwrap() < 0.2 * cfg.epsilon, "mmd {:?}", m.mmd);
    assert!(state.eta() < eta0);
    assert!(state.eta() > 0.0);
}

#[test]
fn bear_requires_behavior_model() {
    let cfg = small_cfg(Algorithm::Bear);
    let (mut state, arrays) = fixture(&cfg);
    let batch = arrays.sample(8, &mut Rng::new(1));
    assert!(matches!(
        actor_update_bear(&batch, &mut state, &cfg, &Rng::new(4)),
        Err(Error::Config(_))
    ));
}

#[test]
fn bc_run_never_touches_critics() {
    let cfg = small_cfg(Algorithm::Bc);
    let ds = mixed_dataset();
    let out = train(&cfg, &ds).unwrap();
    let n = fit_normalizer(&ds).unwrap();
    let fresh = AgentState::new(&cfg, &ds.spec(), n, &Rng::new(cfg.seed).child_named("init")).unwrap();
    assert_eq!(out.state.critic1, fresh.critic1);
    assert_eq!(out.state.critic2_target, fresh.critic2_target);
    assert_ne!(out.state.actor, fresh.actor);
    assert_eq!(out.evals.len(), 2);
    assert_eq!(out.step_log.len(), 6);
}

#[test]
fn runs_are_deterministic_and_plugins_transparent() {
    let ds = mixed_dataset();
    for algorithm in [Algorithm::Td3bc, Algorithm::Bear] {
        let cfg = small_cfg(algorithm);
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.step_log, b.step_log);
        assert_eq!(a.evals, b.evals);
        assert_eq!(a.state, b.state);
        let c = train_backbone(&cfg, &ds).unwrap();
        assert_eq!(a.step_log, c.step_log);
        assert_eq!(a.state, c.state);
        let zero = AgentConfig {
            use_gp: true,
            lambda_gp: 0.0,
            ..cfg.clone()
        };
        let d = train(&zero, &ds).unwrap();
        assert_eq!(a.step_log, d.step_log);
        assert_eq!(a.evals, d.evals);
    }
}

#[test]
fn plugins_change_the_run() {
    let ds = mixed_dataset();
    let plain = small_cfg(Algorithm::Td3bc);
    let pp = AgentConfig {
        use_gp: true,
        use_cr: true,
        ..plain.clone()
    };
    let a = train(&plain, &ds).unwrap();
    let b = train(&pp, &ds).unwrap();
    assert_ne!(a.state.critic1, b.state.critic1);
    assert!(b.step_log.iter().any(|r| r.metrics.mean_w.is_some()));
    assert!(matches!(train_backbone(&pp, &ds), Err(Error::Config(_))));
}

#[test]
fn train_rejects_mismatched_env_and_missing_refs() {
    let ds = mixed_dataset();
    let cfg = AgentConfig {
        env: EnvKind::Pendulum,
        ..small_cfg(Algorithm::Td3bc)
    };
    assert!(matches!(train(&cfg, &ds), Err(Error::Config(_))));
    let mut bare = ds;
    bare.meta.reference_returns = None;
    assert!(matches!(train(&small_cfg(Algorithm::Td3bc), &bare), Err(Error::Missing(_))));
}

#[test]
fn checkpoint_round_trip() {
    let ds = mixed_dataset();
    let out = train(&small_cfg(Algorithm::Bear), &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&out.state, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), out.state);
    std::fs::write(&path, "{\"format\":\"other\",\"version\":1,\"state\":null}").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn config_validation() {
    let ok = AgentConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        AgentConfig { gamma: 1.0, ..ok.clone() },
        AgentConfig { alpha: 0.0, ..ok.clone() },
        AgentConfig { gp_interval: 0, ..ok.clone() },
        AgentConfig { kernel_sigma: 0.0, ..ok.clone() },
        AgentConfig { percentile: Some(0.0), ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let parsed: std::result::Result<AgentConfig, _> = serde_json::from_str("{\"alpah\": 1.0}");
    assert!(parsed.is_err());
    let parsed: AgentConfig = serde_json::from_str("{\"algorithm\": \"bear\", \"use_gp\": true}").unwrap();
    assert_eq!(parsed.algorithm, Algorithm::Bear);
    assert_eq!(parsed.lambda_gp, 1.0);
}

#[test]
fn minmax_weights_stay_in_unit_interval() {
    let q = Array1::from(vec![-4.0, 10.0, 3.0, 3.0]);
    let w = cr_weights_from_q(&q, CrMode::Minmax);
    assert_eq!(w.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
    assert_eq!(w.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
}
