use pinn_core::agents::{AgentConfig, FnnConfig};
use pinn_core::container::Container;
use pinn_core::envs::{CartpoleConfig, EnvConfig};
use pinn_core::es::*;
use pinn_core::numerics::SeededRng;

fn sphere(x: &[f64]) -> f64 {
    -x.iter().map(|v| v * v).sum::<f64>()
}

fn rosenbrock(x: &[f64]) -> f64 {
    -x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum::<f64>()
}

/// Plain ask/tell loop; returns the best fitness and the generation it was first ≥ goal.
fn optimize(
    f: impl Fn(&[f64]) -> f64,
    start: Vec<f64>,
    sigma: f64,
    generations: usize,
    goal: f64,
) -> (f64, Option<usize>) {
    let mut state = CmaState::new(start, sigma, 20).unwrap();
    let mut best = f64::NEG_INFINITY;
    let mut hit = None;
    for g in 0..generations {
        let pop = state.ask(&mut SeededRng::new(7).derive("ask", g as u64));
        let fit: Vec<f64> = pop.iter().map(|x| f(x)).collect();
        best = fit.iter().copied().fold(best, f64::max);
        if hit.is_none() && best >= goal {
            hit = Some(g + 1);
        }
        state.tell(&pop, &fit).unwrap();
    }
    (best, hit)
}

#[test]
fn sphere_10d_within_300_generations() {
    let (best, hit) = optimize(sphere, vec![3.0; 10], 1.0, 300, -1e-10);
    assert!(best >= -1e-10, "best {best}");
    assert!(hit.unwrap() <= 300);
}

#[test]
fn rosenbrock_5d_within_2000_generations() {
    let (best, hit) = optimize(rosenbrock, vec![0.0; 5], 0.5, 2000, -1e-6);
    assert!(best >= -1e-6, "best {best}");
    assert!(hit.unwrap() <= 2000);
}

#[test]
fn affine_fitness_transform_leaves_trajectory_unchanged() {
    let mut a = CmaState::new(vec![1.0; 6], 0.7, 12).unwrap();
    let mut b = a.clone();
    for g in 0..40u64 {
        let pa = a.ask(&mut SeededRng::new(3).derive("ask", g));
        let pb = b.ask(&mut SeededRng::new(3).derive("ask", g));
        assert_eq!(pa, pb);
        let fa: Vec<f64> = pa.iter().map(|x| rosenbrock(x)).collect();
        let fb: Vec<f64> = fa.iter().map(|f| 3.5 * f + 100.0).collect();
        a.tell(&pa, &fa).unwrap();
        b.tell(&pb, &fb).unwrap();
    }
    assert_eq!(a, b);
}

#[test]
fn covariance_stays_symmetric_positive_definite() {
    let mut s = CmaState::new(vec![0.5; 8], 0.3, 16).unwrap();
    for g in 0..150u64 {
        let pop = s.ask(&mut SeededRng::new(11).derive("ask", g));
        let fit: Vec<f64> = pop.iter().map(|x| rosenbrock(x)).collect();
        s.tell(&pop, &fit).unwrap();
        assert!(s.max_asymmetry() <= 1e-12);
        assert!(s.min_eigenvalue() > 0.0);
    }
}

#[test]
fn non_finite_fitness_ranked_last() {
    let mut s = CmaState::new(vec![0.0; 3], 1.0, 8).unwrap();
    let pop = s.ask(&mut SeededRng::new(1));
    let mut fit: Vec<f64> = pop.iter().map(|x| sphere(x)).collect();
    fit[0] = f64::NAN;
    fit[3] = f64::INFINITY;
    let order = CmaState::ranking(&fit);
    assert!(order[6..].contains(&0) && order[6..].contains(&3));
    s.tell(&pop, &fit).unwrap();
    assert!(s.mean.iter().all(|v| v.is_finite()));
}

#[test]
fn sample_moments_match_distribution() {
    // C = I, sigma = 1: mean within 3 standard errors, variance within 5%.
    let s = CmaState::new(vec![2.0, -1.0, 0.0], 1.0, 100_000).unwrap();
    let pop = s.ask(&mut SeededRng::new(5));
    let n = pop.len() as f64;
    for d in 0..3 {
        let mean = pop.iter().map(|x| x[d]).sum::<f64>() / n;
        let var = pop.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - s.mean[d]).abs() <= 3.0 / n.sqrt(), "dim {d} mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "dim {d} var {var}");
    }
}

#[test]
fn trainer_on_stub_recovers_sphere() {
    // The trainer starts at the origin, so shift the sphere away from it.
    struct Shifted;
    impl Fitness for Shifted {
        fn dim(&self) -> usize {
            10
        }
        fn evaluate(&self, x: &[f64], _seed: u64) -> Result<f64, EsError> {
            Ok(-x.iter().map(|v| (v - 2.0).powi(2)).sum::<f64>())
        }
    }
    let cfg = EsConfig {
        population: 20,
        repetitions: 1,
        generations: 300,
        sigma_init: 1.0,
        seed: 4,
        validate_every: 0,
        ..Default::default()
    };
    let mut t = Trainer::new(cfg, &Shifted).unwrap();
    t.run(&mut |_, _| {}).unwrap();
    assert!(t.checkpoint.best_fitness >= -1e-10);
    let h = &t.checkpoint.history;
    assert_eq!(h.len(), 300);
    assert!(h.windows(2).all(|w| w[1].best >= w[0].best));
}

fn small_cartpole() -> (AgentConfig, EnvConfig, EsConfig) {
    let env = EnvConfig::Cartpole(CartpoleConfig {
        max_steps: 60,
        ..Default::default()
    });
    let cfg = EsConfig {
        population: 8,
        repetitions: 2,
        generations: 6,
        sigma_init: 0.2,
        seed: 9,
        validate_every: 3,
        validation_episodes: 4,
        checkpoint_every: 2,
        target_return: None,
    };
    (AgentConfig::Fnn(FnnConfig::default()), env, cfg)
}

#[test]
fn identical_seeds_give_identical_files_for_any_worker_count() {
    let (agent, env, cfg) = small_cartpole();
    let run = |workers: usize| {
        let dir = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .unwrap();
        pool.install(|| train_agent(&agent, env, &cfg, dir.path(), &mut |_, _| {}).unwrap());
        let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
        (read("history.csv"), read("es_state.pinn"), read("best.pinn"))
    };
    let a = run(1);
    let b = run(8);
    let c = run(1);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (agent, env, cfg) = small_cartpole();
    let full = tempfile::tempdir().unwrap();
    train_agent(&agent, env, &cfg, full.path(), &mut |_, _| {}).unwrap();

    // Crash after generation 5; the last checkpoint on disk is from generation 4.
    let part = tempfile::tempdir().unwrap();
    let crashed = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        train_agent(&agent, env, &cfg, part.path(), &mut |rec, _| {
            assert!(rec.generation < 5, "simulated crash");
        })
    }));
    assert!(crashed.is_err());
    train_agent(&agent, env, &cfg, part.path(), &mut |_, _| {}).unwrap();

    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(full.path(), "history.csv"), read(part.path(), "history.csv"));
    assert_eq!(read(full.path(), "best.pinn"), read(part.path(), "best.pinn"));
    let a = Container::load(&full.path().join("es_state.pinn")).unwrap();
    let b = Container::load(&part.path().join("es_state.pinn")).unwrap();
    assert_eq!(a.blocks, b.blocks);
}
