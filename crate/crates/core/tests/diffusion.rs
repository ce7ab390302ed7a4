use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sail_core::diffusion::*;
use sail_core::prompt::{Color, TaskPrompt};
use sail_core::Result;

/// Scalar-per-element probe: a fixed unconditional and conditional value plus a
/// small dependence on the input so that swapped roles are distinguishable.
struct Probe {
    len: usize,
    e_u: f32,
    e_c: f32,
    calls: AtomicU64,
}

impl Probe {
    fn new(len: usize, e_u: f32, e_c: f32) -> Self {
        Self {
            len,
            e_u,
            e_c,
            calls: AtomicU64::new(0),
        }
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl EpsModel for Probe {
    fn data_len(&self) -> usize {
        self.len
    }

    fn cond_len(&self) -> usize {
        1
    }

    fn predict(&self, queries: &[EpsQuery<'_>]) -> Result<Vec<Vec<f32>>> {
        self.calls
            .fetch_add(queries.len() as u64, Ordering::Relaxed);
        Ok(queries
            .iter()
            .map(|q| {
                let base = if q.prompt.is_null() {
                    self.e_u
                } else {
                    self.e_c
                };
                q.x.iter().map(|&x| base + 0.01 * x).collect()
            })
            .collect())
    }
}

fn nv(x: Vec<f32>) -> NoisyVideo {
    NoisyVideo {
        data: x,
        t: 500,
        cond_frame: vec![0.0],
    }
}

fn red() -> TaskPrompt {
    TaskPrompt::color(Color::Red)
}

fn g(alpha: f32, gamma: f32) -> GuidanceConfig {
    GuidanceConfig {
        alpha,
        gamma,
        mode: AdaptationMode::Ipa,
    }
}

#[test]
fn cfg_probe_value() {
    let m = Probe::new(1, 0.2, 0.6);
    let out = cfg_epsilon(&m, &nv(vec![0.0]), &red(), 2.5).unwrap();
    assert!((out[0] - 1.2).abs() < 1e-6);
}

#[test]
fn ipa_and_pa_probe_values() {
    let general = Probe::new(1, 0.1, 0.3);
    let theta = Probe::new(1, 9.0, 0.5);
    let ipa = ipa_epsilon(&theta, &general, &nv(vec![0.0]), &red(), &g(2.5, 0.5)).unwrap();
    assert!((ipa[0] - 1.225).abs() < 1e-6, "{}", ipa[0]);

    let theta = Probe::new(1, 0.1, 0.3);
    let general = Probe::new(1, 9.0, 0.5);
    let pa = pa_epsilon(&theta, &general, &nv(vec![0.0]), &red(), &g(2.5, 0.5)).unwrap();
    assert!((pa[0] - 1.225).abs() < 1e-6, "{}", pa[0]);
}

#[test]
fn swapping_roles_turns_pa_into_ipa() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let a = Probe::new(3, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let b = Probe::new(3, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let x = nv((0..3).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let cfg = g(rng.gen_range(0.0..8.0), rng.gen_range(0.0..2.0));
        let pa = pa_epsilon(&a, &b, &x, &red(), &cfg).unwrap();
        let ipa = ipa_epsilon(&b, &a, &x, &red(), &cfg).unwrap();
        assert_eq!(pa, ipa);
    }
}

#[test]
fn gamma_zero_collapses_exactly_and_gamma_enters_affinely() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let theta = Probe::new(4, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let general = Probe::new(4, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let x = nv((0..4).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let alpha = rng.gen_range(0.0..8.0);
        let p = red();

        let ipa0 = ipa_epsilon(&theta, &general, &x, &p, &g(alpha, 0.0)).unwrap();
        assert_eq!(ipa0, cfg_epsilon(&general, &x, &p, alpha).unwrap());
        let pa0 = pa_epsilon(&theta, &general, &x, &p, &g(alpha, 0.0)).unwrap();
        assert_eq!(pa0, cfg_epsilon(&theta, &x, &p, alpha).unwrap());

        let gamma = rng.gen_range(0.1..2.0);
        let ipa = ipa_epsilon(&theta, &general, &x, &p, &g(alpha, gamma)).unwrap();
        let theta_c = theta
            .predict(&[EpsQuery {
                x: &x.data,
                cond: &x.cond_frame,
                t: x.t,
                prompt: &p,
            }])
            .unwrap();
        for ((a, b), c) in ipa.iter().zip(&ipa0).zip(&theta_c[0]) {
            let slope = (a - b) / gamma;
            assert!(
                (slope - alpha * c).abs() <= 1e-4 * (1.0 + (alpha * c).abs()),
                "{slope} vs {}",
                alpha * c
            );
        }
    }
}

#[test]
fn evaluation_budget_per_mode() {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let cond = [0.0f32];
    let p = red();
    let cases = [
        (AdaptationMode::InDomainCfg, 2, 0),
        (AdaptationMode::Ipa, 1, 2),
        (AdaptationMode::Pa, 2, 1),
    ];
    for (mode, per_theta, per_general) in cases {
        let theta = Probe::new(2, 0.0, 0.0);
        let general = Probe::new(2, 0.0, 0.0);
        let guidance = GuidanceConfig {
            mode,
            ..Default::default()
        };
        let composer = Composer::new(guidance, &theta, Some(&general)).unwrap();
        let reqs: Vec<PlanRequest<'_>> = (0..3)
            .map(|seed| PlanRequest {
                cond_frame: &cond,
                prompt: &p,
                seed,
            })
            .collect();
        ddim_sample_batch(&composer, &reqs, &sched, 25, 1).unwrap();
        assert_eq!(theta.calls(), 3 * 25 * per_theta, "{mode}");
        assert_eq!(general.calls(), 3 * 25 * per_general, "{mode}");
    }
}

#[test]
fn composition_modes_check_for_the_general_model() {
    let theta = Probe::new(2, 0.0, 0.0);
    let ipa = GuidanceConfig::default();
    assert!(Composer::new(ipa, &theta, None).is_err());
    let cfg = GuidanceConfig {
        mode: AdaptationMode::InDomainCfg,
        ..ipa
    };
    assert!(Composer::new(cfg, &theta, None).is_ok());
    let other = Probe::new(3, 0.0, 0.0);
    assert!(Composer::new(ipa, &theta, Some(&other)).is_err());
    assert!(Composer::new(GuidanceConfig { alpha: -1.0, ..ipa }, &theta, Some(&theta)).is_err());
    assert_eq!(GuidanceConfig::strong_text().alpha, 7.0);
    assert_eq!((ipa.alpha, ipa.gamma), (2.5, 0.5));
}

#[test]
fn forward_noise_matches_marginal_moments() {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = [0.7f32, 0.2];
    for t in [1usize, 250, 1000] {
        let n = 20_000;
        let (mut sum, mut sq) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let eps: Vec<f32> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let v = forward_noise(&x0, &[0.0], t, &eps, &sched).unwrap();
            assert_eq!(v.t, t);
            let d = v.data[0] as f64;
            sum += d;
            sq += d * d;
        }
        let ab = sched.alpha_bar(t);
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((mean - ab.sqrt() * 0.7).abs() < 0.03, "t={t} mean {mean}");
        assert!(
            (var / (1.0 - ab) - 1.0).abs() < 0.05,
            "t={t} var {var} vs {}",
            1.0 - ab
        );
    }
    assert!(forward_noise(&x0, &[0.0], 0, &[0.0, 0.0], &sched).is_err());
    assert!(forward_noise(&x0, &[0.0], 1001, &[0.0, 0.0], &sched).is_err());
}

#[test]
fn schedule_endpoints() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    assert!((s.beta(1) - 1e-4).abs() < 1e-12);
    assert!((s.beta(1000) - 0.02).abs() < 1e-12);
    assert_eq!(s.alpha_bar(0), 1.0);
    let expected: f64 = (1..=1000).map(|t| 1.0 - s.beta(t)).product();
    assert!((s.alpha_bar(1000) - expected).abs() < 1e-12);
    assert!(make_schedule(1000, 0.02, 1e-4).is_err());
}

fn tiny_denoiser(seed: u64) -> Denoiser {
    let cfg = DenoiserConfig {
        geometry: Geometry {
            frames: 2,
            h: 4,
            w: 4,
        },
        hidden: vec![64],
        time_embed_width: 8,
        prompt_embed_width: 8,
        seed,
        ..Default::default()
    };
    Denoiser::new(Role::InDomain, cfg).unwrap()
}

#[test]
fn plans_are_deterministic_and_keep_the_observation() {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let den = tiny_denoiser(1);
    let general = Denoiser::new(
        Role::General,
        DenoiserConfig {
            seed: 2,
            ..den.config().clone()
        },
    )
    .unwrap();
    let cond: Vec<f32> = (0..48).map(|i| (i % 5) as f32 / 5.0).collect();
    let p = red();
    let composer = Composer::new(GuidanceConfig::default(), &den, Some(&general)).unwrap();
    let a = ddim_sample(&composer, &cond, &p, &sched, 25, 2, 42).unwrap();
    let b = ddim_sample(&composer, &cond, &p, &sched, 25, 2, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.frames.len(), 3);
    assert_eq!(a.frames[0], cond);
    assert!(a.frames.iter().flatten().all(|v| (0.0..=1.0).contains(v)));

    // A plan does not depend on its batch neighbours.
    let reqs = [
        PlanRequest {
            cond_frame: &cond,
            prompt: &p,
            seed: 7,
        },
        PlanRequest {
            cond_frame: &cond,
            prompt: &p,
            seed: 42,
        },
    ];
    let batch = ddim_sample_batch(&composer, &reqs, &sched, 25, 2).unwrap();
    assert_eq!(batch[1], a);

    let zero = GuidanceConfig {
        gamma: 0.0,
        ..Default::default()
    };
    let collapsed = ddim_sample(
        &Composer::new(zero, &den, Some(&general)).unwrap(),
        &cond,
        &p,
        &sched,
        25,
        2,
        42,
    )
    .unwrap();
    let cfg_only = GuidanceConfig {
        mode: AdaptationMode::InDomainCfg,
        ..Default::default()
    };
    let general_cfg = ddim_sample(
        &Composer::new(cfg_only, &general, None).unwrap(),
        &cond,
        &p,
        &sched,
        25,
        2,
        42,
    )
    .unwrap();
    assert_eq!(collapsed.frames, general_cfg.frames);
}

#[test]
fn training_reduces_loss_on_a_small_set() {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut den = tiny_denoiser(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Forty toy clips: a bright pixel moving right by one cell per frame.
    let clips: Vec<(Vec<f32>, Vec<f32>, TaskPrompt)> = (0..40)
        .map(|i| {
            let start = i % 2;
            let frame = |pos: usize| {
                let mut f = vec![0.1f32; 48];
                for c in 0..3 {
                    f[(4 * (i % 4) + pos) * 3 + c] = 0.9;
                }
                f
            };
            let x0 = [frame(start + 1), frame(start + 2)].concat();
            let color = if i % 2 == 0 { Color::Red } else { Color::Blue };
            (frame(start), x0, TaskPrompt::color(color))
        })
        .collect();
    let mut trainer = DenoiserTrainer::new(&den, 1e-3, 0.1).unwrap();
    let mut losses = Vec::new();
    for _ in 0..3000 {
        let batch: Vec<TrainItem<'_>> = (0..8)
            .map(|_| {
                let (c, x, p) = &clips[rng.gen_range(0..clips.len())];
                TrainItem {
                    cond: c,
                    x0: x,
                    prompt: p,
                }
            })
            .collect();
        losses.push(
            trainer
                .train_step(&mut den, &batch, &sched, &mut rng)
                .unwrap(),
        );
    }
    let head: f32 = losses[..200].iter().sum::<f32>() / 200.0;
    let tail: f32 = losses[losses.len() - 200..].iter().sum::<f32>() / 200.0;
    assert!(tail <= 0.5 * head, "loss {head} -> {tail}");
}

#[test]
fn checkpoints_round_trip() {
    let den = tiny_denoiser(9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("theta.ck");
    den.save(&path).unwrap();
    let back = Denoiser::load(&path).unwrap();
    assert_eq!(back.content_hash(), den.content_hash());
    assert_eq!(back.config(), den.config());
    assert_eq!(back.role(), Role::InDomain);
    assert_eq!(back.to_checkpoint_bytes(), std::fs::read(&path).unwrap());
}
