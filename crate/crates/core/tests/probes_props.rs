use pinn_core::agents::*;
use pinn_core::attention::{ObservationSet, VisualConfig};
use pinn_core::envs::minipong::MinipongConfig;
use pinn_core::envs::{pgm_bytes, CartpoleConfig, EnvConfig};
use pinn_core::numerics::{RealMat, SeededRng};
use pinn_core::probes::*;
use proptest::prelude::*;

fn random_agent(cfg: AgentConfig, seed: u64) -> Agent {
    Agent::random(&cfg, &mut SeededRng::new(seed)).unwrap()
}

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
fn pi_latents_match_under_shuffling() {
    let env = EnvConfig::Cartpole(CartpoleConfig::default());
    let cfg = AgentConfig::PiCartpole(Default::default());
    for seed in 0..20u64 {
        let agent = random_agent(cfg.clone(), seed);
        let perm = SeededRng::new(seed + 100).permutation(5);
        let diff = latent_equality(&agent, &env, seed, &perm, None).unwrap();
        assert!(diff <= 1e-9, "seed {seed}: {diff}");
        let same = latent_equality(&agent, &env, seed, &[0, 1, 2, 3, 4], None).unwrap();
        assert_eq!(same, 0.0);
    }
}

#[test]
fn visual_latents_match_under_shuffling() {
    let env = EnvConfig::Minipong(MinipongConfig::default());
    let agent = random_agent(small_visual(), 3);
    let perm = SeededRng::new(4).permutation(196);
    let diff = latent_equality(&agent, &env, 7, &perm, Some(40)).unwrap();
    assert!(diff <= 1e-9, "{diff}");
}

#[test]
fn fnn_is_a_negative_control() {
    let env = EnvConfig::Cartpole(CartpoleConfig::default());
    let agent = random_agent(AgentConfig::Fnn(FnnConfig::default()), 5);
    let diff = latent_equality(&agent, &env, 1, &[4, 3, 2, 1, 0], None).unwrap();
    println!("fnn latent difference {diff}");
    assert!(diff > 1e-3, "{diff}");
    assert_eq!(latent_equality(&agent, &env, 1, &[0, 1, 2, 3, 4], None).unwrap(), 0.0);
    assert!(latent_equality(&agent, &env, 1, &[0, 0, 1, 2, 3], None).is_err());
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> RealMat {
    let mut rng = SeededRng::new(seed);
    RealMat::from_fn(rows, cols, |_, _| rng.standard_normal())
}

#[test]
fn r2_of_own_coordinate_is_one() {
    let x = gaussian(500, 16, 1);
    let target = RealMat::from_fn(500, 2, |r, c| x.get(r, 3 + c) * 2.0 - 1.0);
    let res = r2_probe(&x, &target).unwrap();
    assert!(!res.ridge);
    for v in res.r2 {
        assert!((v - 1.0).abs() <= 1e-12, "{v}");
    }
}

#[test]
fn r2_on_white_noise_is_near_zero() {
    let x = gaussian(10_000, 16, 2);
    let noise = gaussian(10_000, 3, 3);
    let res = r2_probe(&x, &noise).unwrap();
    for v in res.r2 {
        assert!((0.0..=0.05).contains(&v), "{v}");
    }
}

#[test]
fn single_feature_r2_is_squared_correlation() {
    let mut rng = SeededRng::new(9);
    let xs: Vec<f64> = (0..300).map(|_| rng.standard_normal()).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 0.7 * x + rng.normal(0.0, 1.0)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&xs), mean(&ys));
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let expected = sxy * sxy / (sxx * syy);
    let res = r2_probe(&RealMat::column_vector(&xs), &RealMat::column_vector(&ys)).unwrap();
    assert!((res.r2[0] - expected).abs() <= 1e-12, "{} vs {expected}", res.r2[0]);
}

#[test]
fn rank_deficient_design_uses_ridge() {
    let base = gaussian(200, 3, 4);
    let x = RealMat::from_fn(200, 4, |r, c| base.get(r, c.min(2)));
    let target = RealMat::from_fn(200, 1, |r, _| base.get(r, 0) + base.get(r, 2));
    let res = r2_probe(&x, &target).unwrap();
    assert!(res.ridge);
    assert!(res.r2[0] > 1.0 - 1e-6, "{}", res.r2[0]);
    assert!(r2_probe(&gaussian(10, 16, 1), &gaussian(10, 1, 2)).is_err());
}

proptest! {
    #[test]
    fn r2_lies_in_unit_interval(seed in any::<u64>(), n in 30usize..120, d in 1usize..6) {
        let x = gaussian(n, d, seed);
        let mut rng = SeededRng::new(seed ^ 1);
        let y = RealMat::from_fn(n, 2, |r, c| x.get(r, 0) * c as f64 + rng.standard_normal());
        for v in r2_probe(&x, &y).unwrap().r2 {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn attention_argmax_is_equivariant(seed in any::<u64>()) {
        let Agent::PiMinipong(agent) = random_agent(small_visual(), seed) else { unreachable!() };
        let mut rng = SeededRng::new(seed ^ 7);
        let rows = RealMat::from_fn(196, 144, |_, _| if rng.below(10) == 0 { 1.0 } else { 0.0 });
        let obs = ObservationSet::from_rows(rows).unwrap();
        let perm = rng.permutation(196);
        let shuffled = obs.select(&perm).unwrap();
        let prev = [0.0, 1.0, 0.0];
        let (_, a) = agent.act(&obs, &prev).unwrap();
        let (_, b) = agent.act(&shuffled, &prev).unwrap();
        let plain = attention_argmax(a.attention.as_ref().unwrap());
        let moved = attention_argmax(b.attention.as_ref().unwrap());
        for (p, m) in plain.iter().zip(&moved) {
            prop_assert_eq!(*p, perm[*m]);
        }
    }
}

#[test]
fn attention_argmax_tie_rule() {
    let uniform = RealMat::filled(2, 5, 0.2);
    assert_eq!(attention_argmax(&uniform), vec![0, 0]);
    let mut onehot = RealMat::zeros(3, 4);
    onehot.set(0, 2, 1.0);
    onehot.set(1, 3, 1.0);
    onehot.set(2, 2, 1.0);
    let rows = attention_argmax(&onehot);
    assert_eq!(rows, vec![2, 3, 2]);
    assert_eq!(unique_patches(&rows), vec![2, 3]);
}

#[test]
fn overlay_pgm_layout() {
    let mut frame = RealMat::zeros(4, 6);
    frame.set(0, 0, 1.0);
    let img = saliency_overlay(&frame, 2, &[2]);
    assert_eq!(img.get(0, 0), 1.0);
    assert_eq!(img.get(1, 5), 0.5);
    assert_eq!(img.get(2, 5), 0.0);
    let bytes = pgm_bytes(&img);
    let header = b"P5\n6 4\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 24);
    assert_eq!(bytes[header.len()], 255);
    assert_eq!(bytes[header.len() + 5], 128);
}

fn pairwise(m: &RealMat) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..m.rows() {
        for j in 0..i {
            let d: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            out.push(d.sqrt());
        }
    }
    out
}

#[test]
fn projection_preserves_planar_points() {
    let mut pts = gaussian(40, 2, 6);
    for c in 0..2 {
        let mean = (0..40).map(|r| pts.get(r, c)).sum::<f64>() / 40.0;
        for r in 0..40 {
            pts.set(r, c, pts.get(r, c) - mean);
        }
    }
    let p = project2d(&pts).unwrap();
    assert!(!p.zero_variance);
    assert!((p.explained - 1.0).abs() <= 1e-12);
    for (a, b) in pairwise(&pts).iter().zip(pairwise(&p.coords)) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn projection_keeps_duplicates_and_flags_constants() {
    let base = gaussian(10, 6, 8);
    let doubled = RealMat::from_fn(20, 6, |r, c| base.get(r % 10, c));
    let p = project2d(&doubled).unwrap();
    for r in 0..10 {
        assert_eq!(p.coords.row(r), p.coords.row(r + 10));
    }
    assert!((0.0..=1.0).contains(&p.explained));
    let flat = project2d(&RealMat::filled(5, 3, 2.5)).unwrap();
    assert!(flat.zero_variance);
    assert!(flat.coords.data().iter().all(|&v| v == 0.0));
    assert!(project2d(&RealMat::zeros(2, 3)).is_err());
}

#[test]
fn report_rejects_non_finite_metrics() {
    let mut r = ProbeReport::new("r2");
    r.metric("x", 0.5);
    assert!(r.check().is_ok());
    r.metric("y", f64::NAN);
    assert!(matches!(r.check(), Err(ProbeError::NonFinite(name)) if name == "y"));
}
