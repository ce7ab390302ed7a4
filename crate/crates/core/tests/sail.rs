use sail_core::diffusion::*;
use sail_core::env::*;
use sail_core::idm::{IdmConfig, IdmModel};
use sail_core::planner::*;
use sail_core::prompt::Color;
use sail_core::sail::*;

fn denoiser(role: Role, hidden: usize, seed: u64) -> Denoiser {
    let cfg = DenoiserConfig {
        hidden: vec![hidden],
        time_embed_width: 8,
        prompt_embed_width: 8,
        seed,
        ..Default::default()
    };
    Denoiser::new(role, cfg).unwrap()
}

fn sched() -> NoiseSchedule {
    make_schedule(1000, 1e-4, 0.02).unwrap()
}

fn demo() -> EpisodeRecord {
    let spec = TaskSpec::new(Color::Red, [Color::Green, Color::Blue]);
    scripted_episode(&ColorWorld::default(), &spec, DemoPolicy::Expert, 3).unwrap()
}

#[test]
fn finetuning_on_one_episode_lowers_its_loss() {
    let mut theta = denoiser(Role::InDomain, 64, 1);
    let data = vec![TrainingEpisode::from(&demo())];
    let opts = TrainOptions {
        steps: 800,
        lr: 1e-3,
        ..Default::default()
    };
    let FinetuneOutcome::Trained { losses } =
        finetune(&mut theta, &data, &sched(), &opts, 5).unwrap()
    else {
        panic!("finetune skipped a non-empty set");
    };
    assert_eq!(losses.len(), 800);
    let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
    let (head, tail) = (mean(&losses[..100]), mean(&losses[700..]));
    assert!(tail < 0.7 * head, "loss {head} -> {tail}");
}

#[test]
fn finetune_guards() {
    let mut theta = denoiser(Role::InDomain, 8, 1);
    let before = theta.content_hash();
    let opts = TrainOptions::default();
    let out = finetune(&mut theta, &[], &sched(), &opts, 0).unwrap();
    assert!(matches!(out, FinetuneOutcome::Skipped { .. }));
    assert_eq!(theta.content_hash(), before);

    let mut general = denoiser(Role::General, 8, 2);
    let data = vec![TrainingEpisode::from(&demo())];
    assert!(finetune(&mut general, &data, &sched(), &opts, 0).is_err());
    assert!(finetune(
        &mut theta,
        &data,
        &sched(),
        &TrainOptions { steps: 0, ..opts },
        0
    )
    .is_err());
}

#[test]
fn training_is_reproducible() {
    let data = vec![TrainingEpisode::from(&demo())];
    let opts = TrainOptions {
        steps: 20,
        ..Default::default()
    };
    let run = || {
        let mut theta = denoiser(Role::InDomain, 16, 4);
        let losses = train_denoiser(&mut theta, &data, &sched(), &opts, 8).unwrap();
        (losses, theta.content_hash())
    };
    assert_eq!(run(), run());
}

#[test]
fn parallel_rollouts_do_not_depend_on_thread_count() {
    let world = ColorWorld::default();
    let theta = denoiser(Role::InDomain, 8, 1);
    let general = denoiser(Role::General, 8, 2);
    let idm = IdmModel::new(&IdmConfig {
        hidden: vec![8],
        ..Default::default()
    })
    .unwrap();
    let s = sched();
    let cfg = SailConfig {
        rollouts: 5,
        ..Default::default()
    };
    let planner = Planner {
        world: &world,
        theta: &theta,
        general: Some(&general),
        idm: &idm,
        sched: &s,
        cfg: cfg.planner(8),
    };
    let jobs = cfg.rollout_jobs(0);
    let one: Vec<EpisodeRecord> = parallel_rollouts(&planner, &jobs, 1)
        .unwrap()
        .into_iter()
        .map(|o| o.episode)
        .collect();
    let three: Vec<EpisodeRecord> = parallel_rollouts(&planner, &jobs, 3)
        .unwrap()
        .into_iter()
        .map(|o| o.episode)
        .collect();
    assert_eq!(one, three);
}

#[test]
fn relabel_loop_keeps_everything_and_persists_iterations() {
    let world = ColorWorld::default();
    let mut theta = denoiser(Role::InDomain, 8, 1);
    let general = denoiser(Role::General, 8, 2);
    let mut idm = IdmModel::new(&IdmConfig {
        hidden: vec![8],
        ..Default::default()
    })
    .unwrap();
    let s = sched();
    let demos = vec![demo(), demo()];
    let dir = tempfile::tempdir().unwrap();
    let ctx = SailContext {
        world: &world,
        sched: &s,
        general: Some(&general),
        initial_demos: &demos,
        out_dir: Some(dir.path()),
        threads: 1,
    };
    let cfg = SailConfig {
        iterations: 2,
        rollouts: 4,
        filter: FilterMode::Relabel,
        finetune_steps: 3,
        ctrl: ControlMode::Open,
        ..Default::default()
    };
    let mut seen = 0;
    let reports = run_sail(&cfg, &ctx, &mut theta, &mut idm, |_| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 2);
    for (i, r) in reports.iter().enumerate() {
        assert_eq!(r.kept, 4);
        assert_eq!(r.d_ini, 2);
        assert_eq!(r.d_self, 4 * (i + 1));
        assert_eq!(r.finetune_steps, 3);
        let iter_dir = dir.path().join(format!("iter_{i}"));
        assert_eq!(
            std::fs::read_dir(iter_dir.join("episodes"))
                .unwrap()
                .count(),
            4
        );
        assert!(iter_dir.join("ckpt_theta").exists());
    }
    assert_ne!(reports[0].checkpoint_id, reports[1].checkpoint_id);

    let no_general = SailContext {
        general: None,
        ..ctx
    };
    assert!(run_sail(&cfg, &no_general, &mut theta, &mut idm, |_| Ok(())).is_err());
}
