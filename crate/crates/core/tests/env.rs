use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sail_core::env::*;
use sail_core::prompt::Color;

fn success_rate(world: &ColorWorld, policy: DemoPolicy, n: usize, seed: u64) -> f64 {
    let tasks = TaskSpec::all_combinations(&Color::ALL, &Color::ALL);
    let wins = (0..n)
        .filter(|&i| {
            let spec = &tasks[i % tasks.len()];
            scripted_episode(world, spec, policy, seed + i as u64)
                .unwrap()
                .success
        })
        .count();
    wins as f64 / n as f64
}

#[test]
fn expert_beats_suboptimal_by_a_wide_margin() {
    let world = ColorWorld::default();
    let expert = success_rate(&world, DemoPolicy::Expert, 200, 1000);
    let sub = success_rate(&world, DemoPolicy::Suboptimal, 200, 1000);
    assert!(expert >= 0.95, "expert {expert}");
    assert!(expert - sub >= 0.30, "expert {expert} suboptimal {sub}");
}

#[test]
fn suboptimal_policy_follows_the_expert_thirty_percent_of_the_time() {
    let world = ColorWorld::default();
    let spec = TaskSpec::new(Color::Orange, [Color::Red, Color::Blue]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut expert_branch, mut total) = (0usize, 0usize);
    for ep in 0..400 {
        let mut s = world.reset(&spec.prompt, &spec.scene, ep).unwrap();
        while !world.is_terminal(&s) {
            // Replay the coin flip on a copy of the generator to learn which branch ran.
            let mut shadow = rng.clone();
            let expert_taken = !shadow.gen_bool(world.cfg.random_action_prob);
            let expected = world.expert_action(&s, &mut shadow);
            let a = world.suboptimal_action(&s, &mut rng);
            if expert_taken {
                assert_eq!(a, expected);
                expert_branch += 1;
            }
            total += 1;
            s = world.step(&s, a).unwrap();
        }
    }
    let frac = expert_branch as f64 / total as f64;
    assert!(
        (frac - 0.30).abs() <= 0.02,
        "expert fraction {frac} over {total} steps"
    );
}

#[test]
fn episodes_are_consistent_with_the_world() {
    let world = ColorWorld::default();
    let spec = TaskSpec::new(Color::Green, [Color::Pink, Color::Purple]);
    for policy in [
        DemoPolicy::Expert,
        DemoPolicy::Suboptimal,
        DemoPolicy::Explore,
    ] {
        let ep = scripted_episode(&world, &spec, policy, 5).unwrap();
        ep.check().unwrap();
        assert!(ep.len() <= world.cfg.horizon);
        if ep.success {
            assert!(ep.len() >= 1);
        } else {
            assert_eq!(ep.len(), world.cfg.horizon);
        }
        // Replaying the recorded actions reproduces every recorded frame.
        let mut s = world.reset(&ep.task, &ep.scene, ep.seed).unwrap();
        assert_eq!(world.render(&s), ep.frames[0]);
        for (a, f) in ep.actions.iter().zip(&ep.frames[1..]) {
            assert!(a.dx.abs() <= world.cfg.action_bound && a.dy.abs() <= world.cfg.action_bound);
            s = world.step(&s, *a).unwrap();
            assert_eq!(&world.render(&s), f);
        }
        assert_eq!(world.success(&s), ep.success);
    }
}

#[test]
fn episode_files_round_trip() {
    let world = ColorWorld::default();
    let spec = TaskSpec::new(Color::Purple, [Color::Red, Color::Green]);
    let ep = scripted_episode(&world, &spec, DemoPolicy::Expert, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ep.bin");
    ep.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(EPISODE_MAGIC));
    assert_eq!(EpisodeRecord::load(&path).unwrap(), ep);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(EpisodeRecord::from_bytes(&bad).is_err());
}

#[test]
fn frames_stay_in_range_for_random_play() {
    let world = ColorWorld::new(EnvConfig::broad()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = TaskSpec::new(Color::Blue, [Color::Orange, Color::Pink]);
    let mut s = world.reset(&spec.prompt, &spec.scene, 1).unwrap();
    while !world.is_terminal(&s) {
        let a = Action::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
        s = world.step(&s, a).unwrap();
        let f = world.render(&s);
        assert_eq!(f.len(), FRAME_LEN);
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s
            .objects
            .iter()
            .all(|o| o.pos.iter().all(|p| (0.0..=1.0).contains(p))));
    }
}
