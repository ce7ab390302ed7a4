use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{Action, ColorWorld, Frame, WorldState, CHANNELS, FRAME_H, FRAME_LEN, FRAME_W};
use crate::error::{Error, Result};
use crate::nn::Reader;
use crate::prompt::{Color, TaskPrompt};
use crate::seed::{derive_seed, rng_for};

pub const EPISODE_MAGIC: &[u8; 8] = b"SAILEP01";

/// One rollout as it happened in the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub frames: Vec<Frame>,
    pub actions: Vec<Action>,
    pub task: TaskPrompt,
    pub success: bool,
    pub seed: u64,
    /// Step indices at which a new plan was synthesized.
    pub replan_steps: Vec<u32>,
    /// Scene colors in placement order, enough to re-create the start state.
    pub scene: Vec<Color>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.frames.len() != self.actions.len() + 1 {
            return Err(Error::Data(format!(
                "episode has {} frames for {} actions",
                self.frames.len(),
                self.actions.len()
            )));
        }
        if self.frames.iter().any(|f| f.len() != FRAME_LEN) {
            return Err(Error::Data("episode frame has wrong size".into()));
        }
        Ok(())
    }

    /// Binary layout (all integers little-endian):
    ///
    /// ```text
    /// "SAILEP01"
    /// u32 H | u32 W | u32 frame_count | u32 action_count
    /// f32 frames[frame_count × H × W × 3]
    /// f32 actions[action_count × 2]
    /// u32 prompt_len | prompt (UTF-8, space-separated tokens)
    /// u8 success | u64 seed
    /// u32 n_replans | u32 replan_steps[n_replans]
    /// u8 n_scene | u8 scene_color_ids[n_scene]
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.frames.len() * FRAME_LEN * 4);
        out.extend_from_slice(EPISODE_MAGIC);
        for v in [FRAME_H, FRAME_W, self.frames.len(), self.actions.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for f in &self.frames {
            for v in f {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for a in &self.actions {
            out.extend_from_slice(&a.dx.to_le_bytes());
            out.extend_from_slice(&a.dy.to_le_bytes());
        }
        let prompt = self.task.to_string();
        out.extend_from_slice(&(prompt.len() as u32).to_le_bytes());
        out.extend_from_slice(prompt.as_bytes());
        out.push(self.success as u8);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.replan_steps.len() as u32).to_le_bytes());
        for s in &self.replan_steps {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.push(self.scene.len() as u8);
        out.extend(self.scene.iter().map(|c| c.id()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "episode");
        if r.take(8)? != EPISODE_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        if (h, w) != (FRAME_H, FRAME_W) {
            return Err(r.fail(&format!("unsupported frame geometry {h}x{w}")));
        }
        let n_frames = r.u32()? as usize;
        let n_actions = r.u32()? as usize;
        let flat = r.f32s(n_frames * h * w * CHANNELS)?;
        let frames = flat.chunks_exact(FRAME_LEN).map(<[f32]>::to_vec).collect();
        let actions = r
            .f32s(n_actions * 2)?
            .chunks_exact(2)
            .map(|a| Action::new(a[0], a[1]))
            .collect();
        let plen = r.u32()? as usize;
        let prompt = std::str::from_utf8(r.take(plen)?)
            .map_err(|_| r.fail("prompt is not UTF-8"))?
            .parse::<TaskPrompt>()?;
        let success = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(r.fail("success flag must be 0 or 1")),
        };
        let seed = r.u64()?;
        let n_replans = r.u32()? as usize;
        let replan_steps = (0..n_replans)
            .map(|_| r.u32())
            .collect::<Result<Vec<_>>>()?;
        let n_scene = r.u8()? as usize;
        let scene = r
            .take(n_scene)?
            .iter()
            .map(|&id| Color::from_id(id).ok_or_else(|| r.fail("unknown color id")))
            .collect::<Result<Vec<_>>>()?;
        if !r.is_done() {
            return Err(r.fail("trailing bytes"));
        }
        let ep = Self {
            frames,
            actions,
            task: prompt,
            success,
            seed,
            replan_steps,
            scene,
        };
        ep.check()?;
        Ok(ep)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}

/// A task prompt plus the colors placed in the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub prompt: TaskPrompt,
    pub scene: Vec<Color>,
}

impl TaskSpec {
    pub fn new(target: Color, distractors: [Color; 2]) -> Self {
        Self {
            prompt: TaskPrompt::color(target),
            scene: vec![target, distractors[0], distractors[1]],
        }
    }

    /// Every (target, unordered distractor pair) drawn from `palette`.
    pub fn all_combinations(targets: &[Color], palette: &[Color]) -> Vec<TaskSpec> {
        let mut out = Vec::new();
        for &t in targets {
            let others: Vec<Color> = palette.iter().copied().filter(|&c| c != t).collect();
            for i in 0..others.len() {
                for j in i + 1..others.len() {
                    out.push(TaskSpec::new(t, [others[i], others[j]]));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoPolicy {
    Expert,
    Suboptimal,
    /// Task-agnostic play: full-speed moves toward random waypoints, with
    /// occasional pauses. Used as interaction data for the IDM.
    Explore,
}

/// Runs the scripted policy from a fresh reset until success or the horizon.
pub fn scripted_episode(
    world: &ColorWorld,
    spec: &TaskSpec,
    policy: DemoPolicy,
    seed: u64,
) -> Result<EpisodeRecord> {
    let mut state = world.reset(&spec.prompt, &spec.scene, seed)?;
    let mut rng = rng_for(seed, &[0xac7]);
    let mut frames = vec![world.render(&state)];
    let mut actions = Vec::new();
    let mut waypoint: Option<[f32; 2]> = None;
    while !world.is_terminal(&state) {
        let a = match policy {
            DemoPolicy::Expert => world.expert_action(&state, &mut rng),
            DemoPolicy::Suboptimal => world.suboptimal_action(&state, &mut rng),
            DemoPolicy::Explore => explore_action(world, &state, &mut waypoint, &mut rng),
        };
        state = world.step(&state, a)?;
        frames.push(world.render(&state));
        actions.push(a.clipped(world.cfg.action_bound));
    }
    Ok(EpisodeRecord {
        frames,
        actions,
        task: spec.prompt.clone(),
        success: world.success(&state),
        seed,
        replan_steps: Vec::new(),
        scene: spec.scene.clone(),
    })
}

fn explore_action<R: Rng>(
    world: &ColorWorld,
    s: &WorldState,
    waypoint: &mut Option<[f32; 2]>,
    rng: &mut R,
) -> Action {
    let [ex, ey] = s.effector;
    let arrived = waypoint.is_some_and(|w| (w[0] - ex).abs() < 0.01 && (w[1] - ey).abs() < 0.01);
    if waypoint.is_none() || arrived || rng.gen_bool(0.05) {
        *waypoint = Some([rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)]);
    }
    if rng.gen_bool(0.1) {
        return Action::ZERO;
    }
    let w = waypoint.expect("waypoint set above");
    Action::new(w[0] - ex, w[1] - ey).clipped(world.cfg.action_bound)
}

/// `n_per_task` scripted episodes for every task, in task-major order.
pub fn collect_demos(
    world: &ColorWorld,
    tasks: &[TaskSpec],
    n_per_task: usize,
    policy: DemoPolicy,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    if n_per_task == 0 {
        return Err(Error::Config("n_per_task must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(tasks.len() * n_per_task);
    for (ti, spec) in tasks.iter().enumerate() {
        for i in 0..n_per_task {
            let ep_seed = derive_seed(seed, &[ti as u64, i as u64]);
            out.push(scripted_episode(world, spec, policy, ep_seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combination_counts() {
        assert_eq!(
            TaskSpec::all_combinations(&Color::SEEN, &Color::SEEN).len(),
            12
        );
        assert_eq!(
            TaskSpec::all_combinations(&Color::ALL, &Color::ALL).len(),
            60
        );
    }

    #[test]
    fn episode_file_round_trip() {
        let world = ColorWorld::default();
        let spec = TaskSpec::new(Color::Pink, [Color::Red, Color::Blue]);
        let mut ep = scripted_episode(&world, &spec, DemoPolicy::Expert, 4).unwrap();
        ep.replan_steps = vec![0, 16];
        let bytes = ep.to_bytes();
        let back = EpisodeRecord::from_bytes(&bytes).unwrap();
        assert_eq!(back, ep);
        assert_eq!(back.to_bytes(), bytes);
        assert!(EpisodeRecord::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn demos_are_reproducible() {
        let world = ColorWorld::default();
        let tasks = TaskSpec::all_combinations(&Color::SEEN, &Color::SEEN);
        let a = collect_demos(&world, &tasks[..2], 3, DemoPolicy::Suboptimal, 77).unwrap();
        let b = collect_demos(&world, &tasks[..2], 3, DemoPolicy::Suboptimal, 77).unwrap();
        assert_eq!(a.len(), 6);
        let bytes = |v: &[EpisodeRecord]| v.iter().flat_map(|e| e.to_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b));
        for ep in &a {
            ep.check().unwrap();
        }
    }
}
