mod support;

use pinn_core::agents::*;
use pinn_core::attention::{ObservationSet, VisualConfig};
use pinn_core::bc::*;
use pinn_core::envs::minipong::MinipongConfig;
use pinn_core::envs::{CartpoleConfig, Env, EnvConfig};
use pinn_core::numerics::{SeededRng, Tape, Var};
use proptest::prelude::*;
use support::gradcheck::max_rel_error;
use support::students::{param_values, random_patches, tiny_visual};

fn cartpole(max_steps: usize) -> EnvConfig {
    EnvConfig::Cartpole(CartpoleConfig {
        max_steps,
        ..Default::default()
    })
}

fn minipong(max_steps: usize) -> EnvConfig {
    EnvConfig::Minipong(MinipongConfig {
        max_steps,
        ..Default::default()
    })
}

fn random_agent(cfg: AgentConfig, seed: u64) -> Agent {
    Agent::random(&cfg, &mut SeededRng::new(seed)).unwrap()
}

/// Visual student small enough for fast tests, still on 84×84 MiniPong patches.
fn small_visual() -> AgentConfig {
    AgentConfig::PiMinipong(PiMinipongConfig {
        layer: VisualConfig {
            num_latents: 16,
            pe_dim: 4,
            attn_dim: 8,
            latent_dim: 4,
            ..Default::default()
        },
        head: MinipongHeadConfig {
            conv1_channels: 4,
            conv1_kernel: 2,
            conv1_stride: 1,
            conv2_channels: 4,
            conv2_kernel: 2,
            conv2_stride: 1,
            hidden: 8,
        },
    })
}

#[test]
fn adam_matches_scalar_oracle() {
    let grads = [[0.5, -2.0], [0.1, 0.0], [-1.0, 3.0], [0.25, -0.25]];
    let mut params = vec![1.0, -1.0];
    let mut adam = Adam::new(2, 0.01);
    // Reference recursion written out per coordinate.
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
    let mut expect = [1.0f64, -1.0];
    let mut m = [0.0f64; 2];
    let mut v = [0.0f64; 2];
    for (t, g) in grads.iter().enumerate() {
        adam.step(&mut params, g);
        let t = t as i32 + 1;
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            expect[i] -= lr * mh / (vh.sqrt() + eps);
        }
        for i in 0..2 {
            assert!((params[i] - expect[i]).abs() <= 1e-15, "step {t}");
        }
    }
    // First step moves each coordinate by lr against the gradient sign.
    let mut p = vec![0.0, 0.0];
    Adam::new(2, 0.01).step(&mut p, &[3.0, -1e-3]);
    assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-7);
}

proptest! {
    #[test]
    fn clipping_bounds_norm_and_keeps_direction(
        grads in prop::collection::vec(-100.0f64..100.0, 1..40),
        max_norm in 0.01f64..10.0,
    ) {
        let mut g = grads.clone();
        let before = clip_global_norm(&mut g, max_norm);
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((before - norm(&grads)).abs() <= 1e-12 * before.max(1.0));
        prop_assert!(norm(&g) <= max_norm * (1.0 + 1e-12));
        if before <= max_norm {
            prop_assert_eq!(&g, &grads);
        } else {
            let k = max_norm / before;
            for (a, b) in g.iter().zip(&grads) {
                prop_assert!((a - k * b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}

#[test]
fn config_validation() {
    assert!(BcConfig::default().validate().is_ok());
    let bad = [
        BcConfig { lr: 0.0, ..Default::default() },
        BcConfig { batch_size: 0, ..Default::default() },
        BcConfig { clip_norm: -1.0, ..Default::default() },
        BcConfig { occlusion: [0.5, 0.25], ..Default::default() },
        BcConfig { occlusion: [0.0, 1.0], ..Default::default() },
        BcConfig { batches_per_epoch: Some(0), ..Default::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    let parsed: Result<BcConfig, _> = serde_json::from_str(r#"{"lr": 0.01, "epohcs": 3}"#);
    assert!(parsed.is_err());
}

#[test]
fn collection_is_deterministic_and_round_trips() {
    let teacher = Teacher::Agent(random_agent(AgentConfig::PiCartpole(Default::default()), 3));
    // No track limit, so every episode runs to max_steps.
    let env = EnvConfig::Cartpole(CartpoleConfig {
        max_steps: 80,
        x_limit: 1e9,
        ..Default::default()
    });
    let a = collect(&teacher, &env, 3, 11).unwrap();
    let b = collect(&teacher, &env, 3, 11).unwrap();
    let c = collect(&teacher, &env, 3, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.num_records(), 240);
    assert_eq!(a.kind, DatasetKind::Continuous);

    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a.pinn"), dir.path().join("b.pinn"));
    a.save(&p).unwrap();
    let back = BcDataset::load(&p).unwrap();
    assert_eq!(back, a);
    back.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());

    // An agent checkpoint is not a dataset.
    let agent_path = dir.path().join("agent.pinn");
    random_agent(AgentConfig::Fnn(FnnConfig::default()), 1)
        .save(&agent_path)
        .unwrap();
    assert!(BcDataset::load(&agent_path).is_err());
}

#[test]
fn records_follow_the_episode() {
    let env = minipong(400);
    let data = collect(&Teacher::ScriptedExpert, &env, 2, 5).unwrap();
    assert_eq!(data.kind, DatasetKind::Visual);
    for e in 0..2 {
        // Replay the episode with the recorded actions.
        let mut sim = Env::new(&env);
        sim.reset(collection_seed(5, e));
        for t in 0..data.episode_len(e) {
            let r = data.record(e, t);
            let Env::Minipong(m) = &sim else { unreachable!() };
            assert_eq!(r.obs, m.state.render_key().map(f64::from).as_slice());
            if t == 0 {
                assert_eq!(r.prev, &[0.0; 3]);
            } else {
                let before = data.record(e, t - 1).target;
                let a = pinn_core::numerics::argmax(before);
                let mut onehot = [0.0; 3];
                onehot[a] = 1.0;
                assert_eq!(r.prev, &onehot);
            }
            let obs = data.visual_obs(e, t).unwrap();
            assert_eq!(obs, sim.observe(), "episode {e} step {t}");
            sim.step(pinn_core::envs::Action::Discrete(pinn_core::numerics::argmax(r.target)))
                .unwrap();
        }
        assert!(sim.is_done());
    }
}

#[test]
fn expert_dataset_uses_every_action() {
    let data = collect(&Teacher::ScriptedExpert, &minipong(3000), 5, 1).unwrap();
    let counts = data.action_counts();
    assert_eq!(counts.len(), 3);
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    let (train, hold) = data.split_holdout(0.1);
    assert_eq!(hold.num_episodes(), 1);
    assert_eq!(train.num_episodes() + hold.num_episodes(), 5);
    assert_eq!(hold.episodes[0], data.episodes[4]);
}

#[test]
fn teachers_agree_with_themselves() {
    let pi = random_agent(AgentConfig::PiCartpole(Default::default()), 8);
    let data = collect(&Teacher::Agent(pi.clone()), &cartpole(150), 2, 3).unwrap();
    assert_eq!(agreement(&pi, &data, None).unwrap(), 1.0);

    let visual = random_agent(small_visual(), 9);
    let data = collect(&Teacher::Agent(visual.clone()), &minipong(120), 2, 3).unwrap();
    assert_eq!(agreement(&visual, &data, None).unwrap(), 1.0);
}

#[test]
fn random_labels_give_chance_agreement() {
    let mut data = collect(&Teacher::ScriptedExpert, &minipong(3000), 6, 2).unwrap();
    let mut rng = SeededRng::new(4);
    for ep in &mut data.episodes {
        for t in 0..ep.rows() {
            let label = rng.below(3);
            for k in 0..3 {
                ep.set(t, 7 + k, if k == label { 2.0 } else { -2.0 });
            }
        }
    }
    let student = random_agent(small_visual(), 5);
    let n = data.num_records().min(1200);
    let a = agreement(&student, &data, Some(n)).unwrap();
    // 1/3 with binomial std ≈ 0.014 at n = 1200.
    assert!((a - 1.0 / 3.0).abs() < 0.06, "agreement {a} over {n}");
}

#[test]
fn self_cloning_keeps_zero_loss() {
    let teacher = random_agent(AgentConfig::Fnn(FnnConfig::default()), 21);
    let data = collect(&Teacher::Agent(teacher.clone()), &cartpole(200), 3, 4).unwrap();
    let cfg = BcConfig {
        epochs: 2,
        ..Default::default()
    };
    let mut state = BcState::new(teacher, &cfg);
    train_bc(&mut state, &data, Some(&data), &cfg, &mut |_| Ok(())).unwrap();
    assert!(state.batch_losses.iter().all(|&l| l <= 1e-12), "{:?}", state.batch_losses);
    assert_eq!(state.history.last().unwrap().agreement, Some(1.0));
}

#[test]
fn feed_forward_student_learns() {
    let teacher = random_agent(AgentConfig::Fnn(FnnConfig::default()), 30);
    let data = collect(&Teacher::Agent(teacher), &cartpole(200), 10, 6).unwrap();
    let (train, hold) = data.split_holdout(0.2);
    let cfg = BcConfig {
        epochs: 5,
        lr: 1e-2,
        ..Default::default()
    };
    let mut state = BcState::new(random_agent(AgentConfig::Fnn(FnnConfig::default()), 31), &cfg);
    train_bc(&mut state, &train, Some(&hold), &cfg, &mut |_| Ok(())).unwrap();
    let h = &state.history;
    assert_eq!(h.len(), 5);
    assert!(h[4].loss < 0.5 * h[0].loss, "{h:?}");
    assert!(h[4].agreement.unwrap() > 0.8, "{h:?}");
}

#[test]
fn recurrent_student_learns() {
    let teacher = random_agent(AgentConfig::PiCartpole(Default::default()), 40);
    let data = collect(&Teacher::Agent(teacher), &cartpole(200), 6, 7).unwrap();
    let cfg = BcConfig {
        epochs: 4,
        lr: 1e-2,
        batch_size: 8,
        ..Default::default()
    };
    let student = random_agent(AgentConfig::PiCartpole(Default::default()), 41);
    let mut state = BcState::new(student, &cfg);
    train_bc(&mut state, &data, None, &cfg, &mut |_| Ok(())).unwrap();
    let h = &state.history;
    assert!(h[3].loss < h[0].loss, "{h:?}");
}

#[test]
fn mismatched_student_is_rejected() {
    let data = collect(&Teacher::ScriptedExpert, &minipong(50), 1, 0).unwrap();
    let cfg = BcConfig::default();
    let mut state = BcState::new(random_agent(AgentConfig::Fnn(FnnConfig::default()), 1), &cfg);
    assert!(matches!(
        train_bc(&mut state, &data, None, &cfg, &mut |_| Ok(())),
        Err(BcError::Mismatch(_))
    ));
    assert!(collect(&Teacher::ScriptedExpert, &cartpole(10), 1, 0).is_err());
}

#[test]
fn non_finite_loss_names_the_batch() {
    let teacher = random_agent(AgentConfig::Fnn(FnnConfig::default()), 2);
    let mut data = collect(&Teacher::Agent(teacher.clone()), &cartpole(50), 1, 0).unwrap();
    data.episodes[0].set(10, 6, f64::NAN);
    let cfg = BcConfig {
        batch_size: 100,
        ..Default::default()
    };
    let mut state = BcState::new(teacher, &cfg);
    let err = train_bc(&mut state, &data, None, &cfg, &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, BcError::NonFinite { batch: 0 }), "{err}");
    assert!(err.to_string().contains("batch 0"));
}

fn run_dir(workers: usize, epochs: usize, dir: &std::path::Path) -> Vec<Vec<u8>> {
    let data = collect(&Teacher::ScriptedExpert, &minipong(150), 3, 9).unwrap();
    let (train, hold) = data.split_holdout(0.34);
    let cfg = BcConfig {
        epochs,
        batch_size: 40,
        occlusion: [0.0, 0.5],
        seed: 3,
        ..Default::default()
    };
    let student = random_agent(small_visual(), 12);
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .unwrap()
        .install(|| train_student(&student, &train, Some(&hold), &cfg, dir).unwrap());
    ["history.csv", "best.pinn"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

#[test]
fn identical_files_for_any_worker_count() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let one = run_dir(1, 2, a.path());
    let eight = run_dir(8, 2, b.path());
    assert_eq!(one, eight);
    assert_eq!(
        std::fs::read(a.path().join("bc_state.pinn")).unwrap(),
        std::fs::read(b.path().join("bc_state.pinn")).unwrap()
    );
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = run_dir(2, 3, a.path());
    run_dir(2, 1, b.path());
    let resumed = run_dir(2, 3, b.path());
    assert_eq!(full, resumed);
}

#[test]
fn visual_student_loss_matches_finite_differences() {
    let cfg = tiny_visual();
    for trial in 0..100u64 {
        let mut rng = SeededRng::new(500 + trial);
        let Agent::PiMinipong(agent) = random_agent(cfg.clone(), trial) else {
            unreachable!()
        };
        let samples: Vec<(ObservationSet, Vec<f64>, Vec<f64>)> = (0..2)
            .map(|_| {
                let obs = random_patches(&mut rng, 4, 8);
                let mut prev = vec![0.0; 3];
                prev[rng.below(3)] = 1.0;
                let target = (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect();
                (obs, prev, target)
            })
            .collect();
        let mut scratch = Tape::new();
        let params = param_values(&agent.register(&mut scratch).params(), &scratch);
        let build = |tape: &mut Tape, vars: &[Var]| {
            let vars = MinipongVars::from_params(vars);
            visual_loss(tape, &agent, &vars, &samples).unwrap()
        };
        let err = max_rel_error(&params, &build, 4);
        assert!(err <= 1e-4, "trial {trial}: rel err {err}");
    }
}

#[test]
fn recurrent_loss_matches_finite_differences() {
    for trial in 0..20u64 {
        let mut rng = SeededRng::new(900 + trial);
        let Agent::PiCartpole(agent) =
            random_agent(AgentConfig::PiCartpole(Default::default()), trial)
        else {
            unreachable!()
        };
        let windows: Vec<Vec<(Vec<f64>, f64, f64)>> = (0..2)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        let obs = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
                        (obs, rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0))
                    })
                    .collect()
            })
            .collect();
        let mut scratch = Tape::new();
        let params = param_values(&agent.register(&mut scratch).params(), &scratch);
        let build = |tape: &mut Tape, vars: &[Var]| {
            recurrent_loss(tape, &agent, &CartpoleVars::from_params(vars), &windows)
        };
        let err = max_rel_error(&params, &build, 6);
        assert!(err <= 1e-4, "trial {trial}: rel err {err}");
    }
}
