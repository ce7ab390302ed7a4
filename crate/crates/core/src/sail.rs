//! The self-improvement loop: roll out the composed planner on novel tasks,
//! filter the experience, grow the dataset, finetune the in-domain model.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    AdaptationMode, Denoiser, DenoiserTrainer, GuidanceConfig, NoiseSchedule, Role, TrainItem,
};
use crate::env::{ColorWorld, EpisodeRecord, Frame, TaskSpec};
use crate::error::{Error, Result};
use crate::idm::{episode_pairs, IdmModel};
use crate::planner::{ControlMode, Planner, PlannerConfig, RolloutJob, RolloutOutput};
use crate::prompt::{Color, TaskPrompt};
use crate::seed::{derive_seed, rng_for};

const KEY_SCENE: u64 = 0x5ce;
const KEY_SAMPLER: u64 = 0x5a3;
const KEY_FINETUNE: u64 = 0xf17;
const KEY_IDM: u64 = 0x1d4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep successful rollouts only.
    #[default]
    Oracle,
    /// Keep everything.
    None,
    /// Keep everything; failures are relabeled with a negated prompt.
    Relabel,
}

impl FilterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterMode::Oracle => "oracle",
            FilterMode::None => "none",
            FilterMode::Relabel => "relabel",
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "none" => Ok(Self::None),
            "relabel" => Ok(Self::Relabel),
            other => Err(Error::Config(format!("unknown filter mode `{other}`"))),
        }
    }
}

/// A frame sequence with the prompt it is trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingEpisode {
    pub frames: Vec<Frame>,
    pub prompt: TaskPrompt,
    /// Oracle outcome of the episode the frames came from.
    pub success: bool,
}

impl From<&EpisodeRecord> for TrainingEpisode {
    fn from(ep: &EpisodeRecord) -> Self {
        Self {
            frames: ep.frames.clone(),
            prompt: ep.task.clone(),
            success: ep.success,
        }
    }
}

pub fn apply_filter(episodes: &[EpisodeRecord], mode: FilterMode) -> Vec<TrainingEpisode> {
    episodes
        .iter()
        .filter(|ep| mode != FilterMode::Oracle || ep.success)
        .map(|ep| {
            let mut item = TrainingEpisode::from(ep);
            if mode == FilterMode::Relabel && !ep.success {
                item.prompt = item.prompt.negated();
            }
            item
        })
        .collect()
}

/// Frame indices of the training window at `t`: the conditioning frame and the
/// `frames` future frames spaced `k` apart, clamped to the final frame.
pub fn window_indices(len: usize, t: usize, k: usize, frames: usize) -> (usize, Vec<usize>) {
    let last = len - 1;
    (t, (1..=frames).map(|j| (t + j * k).min(last)).collect())
}

/// Every (episode, start) pair that yields a window with at least one real future frame.
fn window_starts(dataset: &[TrainingEpisode]) -> Vec<(usize, usize)> {
    dataset
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.frames.len().saturating_sub(1)).map(move |t| (e, t)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    pub prompt_drop: f64,
    pub frame_skip: usize,
    pub snr_clip: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-4,
            batch: 8,
            prompt_drop: 0.1,
            frame_skip: 4,
            snr_clip: Some(5.0),
        }
    }
}

/// Trains `den` on windows drawn uniformly with replacement from `dataset`.
/// Returns the loss of every step. A fresh optimizer is used for each call.
pub fn train_denoiser(
    den: &mut Denoiser,
    dataset: &[TrainingEpisode],
    sched: &NoiseSchedule,
    opts: &TrainOptions,
    seed: u64,
) -> Result<Vec<f32>> {
    if opts.steps == 0 || opts.batch == 0 || opts.frame_skip == 0 {
        return Err(Error::Config(
            "training needs steps, batch and frame skip >= 1".into(),
        ));
    }
    let starts = window_starts(dataset);
    if starts.is_empty() {
        return Err(Error::Data(
            "training set has no episode with two or more frames".into(),
        ));
    }
    let frames = den.geometry().frames;
    let mut trainer = DenoiserTrainer::new(den, opts.lr, opts.prompt_drop)?;
    trainer.snr_clip = opts.snr_clip;
    let mut rng = rng_for(seed, &[0x7a1]);
    let mut losses = Vec::with_capacity(opts.steps);
    let mut stacks: Vec<Vec<f32>> = vec![Vec::new(); opts.batch];
    let mut picks = Vec::with_capacity(opts.batch);
    for step in 0..opts.steps {
        picks.clear();
        for stack in stacks.iter_mut() {
            let (e, t) = starts[rng.gen_range(0..starts.len())];
            let ep = &dataset[e];
            let (c, future) = window_indices(ep.frames.len(), t, opts.frame_skip, frames);
            stack.clear();
            for i in future {
                stack.extend_from_slice(&ep.frames[i]);
            }
            picks.push((e, c));
        }
        let batch: Vec<TrainItem<'_>> = picks
            .iter()
            .zip(&stacks)
            .map(|(&(e, c), x0)| TrainItem {
                cond: &dataset[e].frames[c],
                x0,
                prompt: &dataset[e].prompt,
            })
            .collect();
        let loss = trainer
            .train_step(den, &batch, sched, &mut rng)
            .map_err(|err| err.context(format!("training step {step}")))?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Outcome of one finetuning call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FinetuneOutcome {
    Trained {
        losses: Vec<f32>,
    },
    /// The dataset was empty; the model is unchanged.
    Skipped {
        warning: String,
    },
}

/// Continues training the in-domain model on `dataset`.
pub fn finetune(
    e_theta: &mut Denoiser,
    dataset: &[TrainingEpisode],
    sched: &NoiseSchedule,
    opts: &TrainOptions,
    seed: u64,
) -> Result<FinetuneOutcome> {
    if e_theta.role() != Role::InDomain {
        return Err(Error::Config(
            "only the in-domain model is finetuned".into(),
        ));
    }
    if opts.steps == 0 {
        return Err(Error::Config("finetune steps must be >= 1".into()));
    }
    if window_starts(dataset).is_empty() {
        return Ok(FinetuneOutcome::Skipped {
            warning: "empty finetuning set; model left unchanged".into(),
        });
    }
    Ok(FinetuneOutcome::Trained {
        losses: train_denoiser(e_theta, dataset, sched, opts, seed)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SailConfig {
    pub iterations: usize,
    pub rollouts: usize,
    pub filter: FilterMode,
    pub adaptation: AdaptationMode,
    pub include_initial_demos: bool,
    pub finetune_steps: usize,
    pub finetune_lr: f32,
    pub finetune_batch: usize,
    pub prompt_drop: f64,
    /// Also finetune on the final iteration's data (its model is never evaluated).
    pub finetune_last: bool,
    pub finetune_idm: bool,
    pub idm_epochs: usize,
    pub idm_lr: f32,
    pub alpha: f32,
    pub gamma: f32,
    pub ctrl: ControlMode,
    pub ddim_steps: usize,
    /// Moment estimates restart at every iteration's finetune.
    pub reset_optimizer: bool,
    pub seed: u64,
    pub novel_tasks: Vec<Color>,
    /// Colors the two distractors are drawn from.
    pub distractors: Vec<Color>,
}

impl Default for SailConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            rollouts: 30,
            filter: FilterMode::Oracle,
            adaptation: AdaptationMode::Ipa,
            include_initial_demos: true,
            finetune_steps: 2000,
            finetune_lr: 1e-4,
            finetune_batch: 8,
            prompt_drop: 0.1,
            finetune_last: true,
            finetune_idm: false,
            idm_epochs: 2,
            idm_lr: 1e-4,
            alpha: 2.5,
            gamma: 0.5,
            ctrl: ControlMode::SemiOpen,
            ddim_steps: 25,
            reset_optimizer: true,
            seed: 0,
            novel_tasks: Color::NOVEL.to_vec(),
            distractors: Color::SEEN.to_vec(),
        }
    }
}

impl SailConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.rollouts == 0 {
            return Err(Error::Config(
                "SAIL needs at least one iteration and one rollout".into(),
            ));
        }
        if self.finetune_steps == 0 || self.finetune_batch == 0 {
            return Err(Error::Config(
                "finetune steps and batch must be >= 1".into(),
            ));
        }
        if !self.reset_optimizer {
            return Err(Error::Config(
                "optimizer state is always reset between iterations".into(),
            ));
        }
        if self.novel_tasks.is_empty() {
            return Err(Error::Config("novel task list is empty".into()));
        }
        if self.scenes().is_empty() {
            return Err(Error::Config(
                "distractor palette leaves no valid scene".into(),
            ));
        }
        self.guidance().validate()
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            mode: self.adaptation,
        }
    }

    pub fn planner(&self, plan_frames: usize) -> PlannerConfig {
        PlannerConfig {
            guidance: self.guidance(),
            ddim_steps: self.ddim_steps,
            plan_frames,
            ctrl: self.ctrl,
        }
    }

    /// Evaluation scenes in round-robin order.
    pub fn scenes(&self) -> Vec<TaskSpec> {
        TaskSpec::all_combinations(&self.novel_tasks, &self.distractors)
    }

    /// The `n` rollout jobs of `iteration`. Scene layouts depend only on the
    /// rollout index, so every iteration faces the same evaluation set.
    pub fn rollout_jobs(&self, iteration: usize) -> Vec<RolloutJob> {
        let scenes = self.scenes();
        (0..self.rollouts)
            .map(|i| RolloutJob {
                spec: scenes[i % scenes.len()].clone(),
                reset_seed: derive_seed(self.seed, &[KEY_SCENE, i as u64]),
                sampler_seed: derive_seed(self.seed, &[KEY_SAMPLER, iteration as u64, i as u64]),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task: String,
    pub n_rollouts: usize,
    pub n_success: usize,
    pub mean_episode_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub tasks: Vec<TaskOutcome>,
    pub n_rollouts: usize,
    pub n_success: usize,
    pub success_rate: f64,
    pub mean_episode_length: f64,
    /// Items kept from this iteration's rollouts.
    pub kept: usize,
    pub d_ini: usize,
    pub d_self: usize,
    pub d_total: usize,
    pub finetune_steps: usize,
    pub final_loss: Option<f32>,
    pub warning: Option<String>,
    /// Content hash of the in-domain model after this iteration.
    pub checkpoint_id: String,
    pub general_hash: Option<String>,
    /// Oracle flags of the self-collected items kept this iteration.
    pub kept_success: Vec<bool>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Fixed inputs of a loop run.
pub struct SailContext<'a> {
    pub world: &'a ColorWorld,
    pub sched: &'a NoiseSchedule,
    pub general: Option<&'a Denoiser>,
    pub initial_demos: &'a [EpisodeRecord],
    /// Persist episodes and checkpoints under this directory.
    pub out_dir: Option<&'a Path>,
    /// Rollout worker threads.
    pub threads: usize,
}

/// Runs the jobs on up to `threads` workers. Episode outcomes do not depend on
/// how jobs are distributed.
pub fn parallel_rollouts(
    planner: &Planner<'_>,
    jobs: &[RolloutJob],
    threads: usize,
) -> Result<Vec<RolloutOutput>> {
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return planner.rollout_batch(jobs, false);
    }
    let chunk = jobs.len().div_ceil(threads);
    let results: Vec<Result<Vec<RolloutOutput>>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(move || planner.rollout_batch(part, false)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(jobs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Per-task rollout counts, in order of first appearance.
pub fn summarize(episodes: &[EpisodeRecord]) -> Vec<TaskOutcome> {
    let mut tasks: Vec<TaskOutcome> = Vec::new();
    let mut lengths: Vec<usize> = Vec::new();
    for ep in episodes {
        let name = ep.task.to_string();
        let i = match tasks.iter().position(|t| t.task == name) {
            Some(i) => i,
            None => {
                tasks.push(TaskOutcome {
                    task: name,
                    n_rollouts: 0,
                    n_success: 0,
                    mean_episode_length: 0.0,
                });
                lengths.push(0);
                tasks.len() - 1
            }
        };
        tasks[i].n_rollouts += 1;
        tasks[i].n_success += ep.success as usize;
        lengths[i] += ep.len();
    }
    for (t, l) in tasks.iter_mut().zip(lengths) {
        t.mean_episode_length = l as f64 / t.n_rollouts as f64;
    }
    tasks
}

fn persist(dir: &Path, episodes: &[EpisodeRecord], theta: &Denoiser) -> Result<()> {
    let ep_dir = dir.join("episodes");
    fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
    for (i, ep) in episodes.iter().enumerate() {
        ep.save(&ep_dir.join(format!("{i:04}.ep")))?;
    }
    theta.save(&dir.join("ckpt_theta"))
}

/// Runs `cfg.iterations` rounds of rollout, filtering, accumulation and finetuning.
/// `on_report` sees each report as soon as its iteration finishes.
pub fn run_sail(
    cfg: &SailConfig,
    ctx: &SailContext<'_>,
    theta: &mut Denoiser,
    idm: &mut IdmModel,
    mut on_report: impl FnMut(&IterationReport) -> Result<()>,
) -> Result<Vec<IterationReport>> {
    cfg.validate()?;
    if theta.role() != Role::InDomain {
        return Err(Error::Config("SAIL adapts an in-domain model".into()));
    }
    if cfg.adaptation.needs_general() && ctx.general.is_none() {
        return Err(Error::Config(format!(
            "adaptation mode {} needs a general model",
            cfg.adaptation
        )));
    }
    let general_hash = ctx.general.map(Denoiser::content_hash);
    let initial: Vec<TrainingEpisode> = if cfg.include_initial_demos {
        ctx.initial_demos
            .iter()
            .map(TrainingEpisode::from)
            .collect()
    } else {
        Vec::new()
    };
    let d_ini = initial.len();
    let mut dataset = initial;
    let mut reports = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let started = Instant::now();
        let wrap = |e: Error| e.context(format!("SAIL iteration {iteration}"));

        let planner = Planner {
            world: ctx.world,
            theta,
            general: ctx.general,
            idm,
            sched: ctx.sched,
            cfg: cfg.planner(theta.geometry().frames),
        };
        let jobs = cfg.rollout_jobs(iteration);
        let episodes: Vec<EpisodeRecord> = parallel_rollouts(&planner, &jobs, ctx.threads)
            .map_err(wrap)?
            .into_iter()
            .map(|o| o.episode)
            .collect();

        let kept = apply_filter(&episodes, cfg.filter);
        let kept_success = kept.iter().map(|k| k.success).collect();
        let n_kept = kept.len();
        dataset.extend(kept);

        let mut warning = None;
        let mut final_loss = None;
        let mut steps_run = 0;
        if cfg.finetune_last || iteration + 1 < cfg.iterations {
            let opts = TrainOptions {
                steps: cfg.finetune_steps,
                lr: cfg.finetune_lr,
                batch: cfg.finetune_batch,
                prompt_drop: cfg.prompt_drop,
                frame_skip: idm.frame_skip(),
                ..TrainOptions::default()
            };
            let seed = derive_seed(cfg.seed, &[KEY_FINETUNE, iteration as u64]);
            match finetune(theta, &dataset, ctx.sched, &opts, seed).map_err(wrap)? {
                FinetuneOutcome::Trained { losses } => {
                    steps_run = losses.len();
                    final_loss = losses.last().copied();
                }
                FinetuneOutcome::Skipped { warning: w } => {
                    log::warn!("iteration {iteration}: {w}");
                    warning = Some(w);
                }
            }
            if cfg.finetune_idm {
                let pairs: Vec<_> = episodes
                    .iter()
                    .filter(|ep| ep.len() > 0)
                    .flat_map(|ep| episode_pairs(ep, idm.frame_skip()))
                    .collect();
                if !pairs.is_empty() {
                    let seed = derive_seed(cfg.seed, &[KEY_IDM, iteration as u64]);
                    idm.fit(&pairs, cfg.idm_epochs, cfg.idm_lr, 32, 0.0, seed)
                        .map_err(wrap)?;
                }
            }
        }

        if let Some(dir) = ctx.out_dir {
            persist(&dir.join(format!("iter_{iteration}")), &episodes, theta).map_err(wrap)?;
        }
        if let (Some(g), Some(h)) = (ctx.general, &general_hash) {
            if &g.content_hash() != h {
                return Err(wrap(Error::Composition(
                    "general model changed during SAIL".into(),
                )));
            }
        }

        let n_success = episodes.iter().filter(|e| e.success).count();
        let total_len: usize = episodes.iter().map(EpisodeRecord::len).sum();
        let report = IterationReport {
            iteration,
            tasks: summarize(&episodes),
            n_rollouts: episodes.len(),
            n_success,
            success_rate: n_success as f64 / episodes.len() as f64,
            mean_episode_length: total_len as f64 / episodes.len() as f64,
            kept: n_kept,
            d_ini,
            d_self: dataset.len() - d_ini,
            d_total: dataset.len(),
            finetune_steps: steps_run,
            final_loss,
            warning,
            checkpoint_id: theta.content_hash(),
            general_hash: general_hash.clone(),
            kept_success,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "iteration {iteration}: {n_success}/{} successes, |D| = {} ({:.1}s)",
            report.n_rollouts,
            report.d_total,
            report.wall_clock_secs
        );
        on_report(&report)?;
        reports.push(report);
    }
    Ok(reports)
}
