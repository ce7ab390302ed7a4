//! Visual-planning rollouts: sample a conditioned video plan, convert
//! consecutive plan frames into actions with the IDM, execute, replan.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ddim_sample_batch, AdaptationMode, Composer, Denoiser, EpsModel, GuidanceConfig, NoiseSchedule,
    PlanRequest,
};
use crate::env::{ColorWorld, EpisodeRecord, TaskSpec, WorldState, FRAME_H, FRAME_W};
use crate::error::{Error, Result};
use crate::idm::IdmModel;
use crate::prompt::TaskPrompt;
use crate::seed::derive_seed;

pub use crate::diffusion::VideoPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Execute the whole plan before replanning.
    Open,
    /// Execute half of the plan.
    #[default]
    SemiOpen,
    /// Execute a single plan segment.
    Closed,
}

impl ControlMode {
    /// Plan segments executed before replanning, for an 8-frame plan.
    pub fn stride(self) -> usize {
        match self {
            ControlMode::Open => 8,
            ControlMode::SemiOpen => 4,
            ControlMode::Closed => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ControlMode::Open => "open",
            ControlMode::SemiOpen => "semi_open",
            ControlMode::Closed => "closed",
        }
    }
}

impl fmt::Display for ControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(Self::Open),
            "semi_open" => Ok(Self::SemiOpen),
            "closed" => Ok(Self::Closed),
            other => Err(Error::Config(format!("unknown control mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub guidance: GuidanceConfig,
    pub ddim_steps: usize,
    pub plan_frames: usize,
    pub ctrl: ControlMode,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            ddim_steps: 25,
            plan_frames: 8,
            ctrl: ControlMode::SemiOpen,
        }
    }
}

/// Samples one plan from `obs` with the composition selected by `guidance.mode`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_plan(
    guidance: &GuidanceConfig,
    e_theta: &Denoiser,
    e_general: Option<&Denoiser>,
    obs: &[f32],
    prompt: &TaskPrompt,
    sched: &NoiseSchedule,
    ddim_steps: usize,
    seed: u64,
) -> Result<VideoPlan> {
    let general = e_general.map(|g| g as &dyn EpsModel);
    let composer = Composer::new(*guidance, e_theta, general)?;
    let frames = e_theta.geometry().frames;
    let req = PlanRequest {
        cond_frame: obs,
        prompt,
        seed,
    };
    let mut plans = ddim_sample_batch(&composer, &[req], sched, ddim_steps, frames)?;
    Ok(plans.pop().expect("one plan"))
}

/// Everything a rollout needs besides the episode itself.
#[derive(Clone, Copy)]
pub struct Planner<'a> {
    pub world: &'a ColorWorld,
    pub theta: &'a Denoiser,
    pub general: Option<&'a Denoiser>,
    pub idm: &'a IdmModel,
    pub sched: &'a NoiseSchedule,
    pub cfg: PlannerConfig,
}

/// One episode to roll out: scene, reset seed, and the seed of its sampler stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutJob {
    pub spec: TaskSpec,
    pub reset_seed: u64,
    pub sampler_seed: u64,
}

pub struct RolloutOutput {
    pub episode: EpisodeRecord,
    /// Plans in synthesis order (empty unless requested).
    pub plans: Vec<VideoPlan>,
}

impl<'a> Planner<'a> {
    fn composer(&self) -> Result<Composer<'a>> {
        if self.cfg.guidance.mode.needs_general() && self.general.is_none() {
            return Err(Error::Config(format!(
                "adaptation mode {} needs a general model",
                self.cfg.guidance.mode
            )));
        }
        let general = self.general.map(|g| g as &dyn EpsModel);
        Composer::new(self.cfg.guidance, self.theta, general)
    }

    pub fn mode(&self) -> AdaptationMode {
        self.cfg.guidance.mode
    }

    /// Plans synthesized by an episode that never succeeds.
    pub fn max_plans_per_episode(&self) -> usize {
        let per_plan = self.cfg.ctrl.stride().min(self.cfg.plan_frames) * self.idm.frame_skip();
        self.world.cfg.horizon.div_ceil(per_plan)
    }

    pub fn plan_rollout(&self, job: &RolloutJob) -> Result<EpisodeRecord> {
        let mut out = self.rollout_batch(std::slice::from_ref(job), false)?;
        Ok(out.pop().expect("one episode").episode)
    }

    /// Rolls out all jobs in lockstep so each replanning round is one batched
    /// sampling call. Every episode's result is independent of its batch-mates.
    pub fn rollout_batch(
        &self,
        jobs: &[RolloutJob],
        keep_plans: bool,
    ) -> Result<Vec<RolloutOutput>> {
        let composer = self.composer()?;
        let stride = self.cfg.ctrl.stride().min(self.cfg.plan_frames);
        let world = self.world;

        let mut states: Vec<WorldState> = Vec::with_capacity(jobs.len());
        let mut outputs: Vec<RolloutOutput> = Vec::with_capacity(jobs.len());
        for job in jobs {
            let s = world.reset(&job.spec.prompt, &job.spec.scene, job.reset_seed)?;
            outputs.push(RolloutOutput {
                episode: EpisodeRecord {
                    frames: vec![world.render(&s)],
                    actions: Vec::new(),
                    task: job.spec.prompt.clone(),
                    success: false,
                    seed: job.reset_seed,
                    replan_steps: Vec::new(),
                    scene: job.spec.scene.clone(),
                },
                plans: Vec::new(),
            });
            states.push(s);
        }

        let mut round = 0u64;
        loop {
            let alive: Vec<usize> = (0..jobs.len())
                .filter(|&i| !world.is_terminal(&states[i]))
                .collect();
            if alive.is_empty() {
                break;
            }
            let requests: Vec<PlanRequest<'_>> = alive
                .iter()
                .map(|&i| PlanRequest {
                    cond_frame: outputs[i]
                        .episode
                        .frames
                        .last()
                        .expect("at least one frame"),
                    prompt: &jobs[i].spec.prompt,
                    seed: derive_seed(jobs[i].sampler_seed, &[round]),
                })
                .collect();
            let plans = ddim_sample_batch(
                &composer,
                &requests,
                self.sched,
                self.cfg.ddim_steps,
                self.cfg.plan_frames,
            )
            .map_err(|e| e.context(format!("planning round {round}")))?;

            for (&i, plan) in alive.iter().zip(plans) {
                let rec = &mut outputs[i].episode;
                rec.replan_steps.push(states[i].step_count as u32);
                'segments: for seg in 0..stride {
                    let actions = self
                        .idm
                        .predict_action(&plan.frames[seg], &plan.frames[seg + 1])?;
                    for a in actions {
                        if world.is_terminal(&states[i]) {
                            break 'segments;
                        }
                        states[i] = world.step(&states[i], a)?;
                        rec.actions.push(a.clipped(world.cfg.action_bound));
                        rec.frames.push(world.render(&states[i]));
                    }
                }
                if keep_plans {
                    outputs[i].plans.push(plan);
                }
            }
            round += 1;
        }
        for (out, s) in outputs.iter_mut().zip(&states) {
            out.episode.success = world.success(s);
        }
        Ok(outputs)
    }
}

impl VideoPlan {
    /// Inspection dump: one text header line, then the frames as little-endian f32.
    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let header = format!(
            "SAILPLAN frames={} h={} w={} prompt=\"{}\" seed={} mode={}\n",
            self.frames.len(),
            FRAME_H,
            FRAME_W,
            self.prompt,
            self.seed,
            self.mode
        );
        let mut out = header.into_bytes();
        for f in &self.frames {
            for v in f {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}
