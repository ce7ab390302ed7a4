use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{Color, TaskPrompt};
use crate::seed::rng_for;

pub const FRAME_H: usize = 16;
pub const FRAME_W: usize = 16;
pub const CHANNELS: usize = 3;
pub const FRAME_LEN: usize = FRAME_H * FRAME_W * CHANNELS;

/// Row-major `H × W × 3` pixels in `[0, 1]`.
pub type Frame = Vec<f32>;

/// Arena constants. Positions live in `[0, 1]²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub horizon: usize,
    pub contact_radius: f32,
    pub goal_y: f32,
    pub action_bound: f32,
    pub effector_start: [f32; 2],
    pub place_x: [f32; 2],
    pub place_y: [f32; 2],
    pub min_separation: f32,
    /// How far below the target the expert lines up before pushing.
    pub staging_offset: f32,
    pub expert_jitter: f32,
    /// Probability of a uniformly random action in the suboptimal policy.
    pub random_action_prob: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 40,
            contact_radius: 0.09,
            goal_y: 0.85,
            action_bound: 0.08,
            effector_start: [0.5, 0.05],
            place_x: [0.1, 0.9],
            place_y: [0.15, 0.5],
            min_separation: 0.12,
            staging_offset: 0.2,
            expert_jitter: 0.005,
            random_action_prob: 0.7,
        }
    }
}

impl EnvConfig {
    /// The wider placement band used for the broad-distribution corpus.
    pub fn broad() -> Self {
        Self {
            place_x: [0.05, 0.95],
            place_y: [0.15, 0.65],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |r: [f32; 2]| 0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0;
        if self.horizon == 0 || self.action_bound <= 0.0 || self.contact_radius <= 0.0 {
            return Err(Error::Config(
                "horizon, action bound and contact radius must be positive".into(),
            ));
        }
        if !in_unit(self.place_x) || !in_unit(self.place_y) {
            return Err(Error::Config(
                "placement ranges must lie inside [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.random_action_prob) {
            return Err(Error::Config(
                "random_action_prob must be a probability".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f32,
    pub dy: f32,
}

impl Action {
    pub const ZERO: Action = Action { dx: 0.0, dy: 0.0 };

    pub fn new(dx: f32, dy: f32) -> Self {
        Self { dx, dy }
    }

    pub fn clipped(self, bound: f32) -> Self {
        Self {
            dx: self.dx.clamp(-bound, bound),
            dy: self.dy.clamp(-bound, bound),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: Color,
    pub pos: [f32; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub effector: [f32; 2],
    pub objects: Vec<SceneObject>,
    pub step_count: usize,
    pub task: TaskPrompt,
    pub seed: u64,
}

impl WorldState {
    pub fn target_index(&self) -> Option<usize> {
        let c = self.task.target_color()?;
        self.objects.iter().position(|o| o.color == c)
    }

    pub fn target(&self) -> Option<&SceneObject> {
        self.target_index().map(|i| &self.objects[i])
    }

    pub fn scene_colors(&self) -> Vec<Color> {
        self.objects.iter().map(|o| o.color).collect()
    }
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn cell(v: f32, n: usize) -> usize {
    ((v * n as f32).floor().max(0.0) as usize).min(n - 1)
}

fn corner(v: f32, n: usize) -> usize {
    ((v * n as f32).round().max(1.0) as usize).min(n - 1)
}

/// Kinematic tabletop: an effector pushes colored blocks on contact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColorWorld {
    pub cfg: EnvConfig,
}

impl ColorWorld {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn reset(&self, task: &TaskPrompt, scene: &[Color], seed: u64) -> Result<WorldState> {
        let target = task
            .target_color()
            .ok_or_else(|| Error::Task(format!("prompt `{task}` names no color")))?;
        if !scene.contains(&target) {
            return Err(Error::Task(format!(
                "task color {target} absent from scene"
            )));
        }
        for (i, c) in scene.iter().enumerate() {
            if scene[..i].contains(c) {
                return Err(Error::Task(format!("scene repeats color {c}")));
            }
        }
        let cfg = &self.cfg;
        let mut rng = rng_for(seed, &[0x5ce4e]);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(scene.len());
        for &color in scene {
            let mut attempts = 0;
            let pos = loop {
                let p = [
                    rng.gen_range(cfg.place_x[0]..=cfg.place_x[1]),
                    rng.gen_range(cfg.place_y[0]..=cfg.place_y[1]),
                ];
                if objects.iter().all(|o| dist(o.pos, p) >= cfg.min_separation) {
                    break p;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Config(
                        "could not place objects without overlap".into(),
                    ));
                }
            };
            objects.push(SceneObject { color, pos });
        }
        Ok(WorldState {
            effector: cfg.effector_start,
            objects,
            step_count: 0,
            task: task.clone(),
            seed,
        })
    }

    pub fn is_terminal(&self, s: &WorldState) -> bool {
        s.step_count >= self.cfg.horizon || self.success(s)
    }

    pub fn step(&self, s: &WorldState, a: Action) -> Result<WorldState> {
        if self.is_terminal(s) {
            return Err(Error::Episode(format!(
                "step called on terminal state (step {}, horizon {})",
                s.step_count, self.cfg.horizon
            )));
        }
        let a = a.clipped(self.cfg.action_bound);
        let mut next = s.clone();
        next.effector = [
            (s.effector[0] + a.dx).clamp(0.0, 1.0),
            (s.effector[1] + a.dy).clamp(0.0, 1.0),
        ];
        let contact = next
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i, dist(o.pos, next.effector)))
            .filter(|&(_, d)| d < self.cfg.contact_radius)
            .min_by(|x, y| x.1.total_cmp(&y.1));
        if let Some((i, _)) = contact {
            let o = &mut next.objects[i];
            o.pos = [
                (o.pos[0] + a.dx).clamp(0.0, 1.0),
                (o.pos[1] + a.dy).clamp(0.0, 1.0),
            ];
        }
        next.step_count += 1;
        Ok(next)
    }

    /// Objects are 3×3 blocks centered on their pixel cell; the effector is a
    /// 2×2 white block centered on the nearest pixel corner, drawn last.
    pub fn render(&self, s: &WorldState) -> Frame {
        let mut frame = vec![0.0f32; FRAME_LEN];
        let mut put = |row: usize, col: usize, rgb: [f32; 3]| {
            let base = (row * FRAME_W + col) * CHANNELS;
            frame[base..base + 3].copy_from_slice(&rgb);
        };
        for o in &s.objects {
            let (r, c) = (cell(o.pos[1], FRAME_H), cell(o.pos[0], FRAME_W));
            for row in r.saturating_sub(1)..=(r + 1).min(FRAME_H - 1) {
                for col in c.saturating_sub(1)..=(c + 1).min(FRAME_W - 1) {
                    put(row, col, o.color.rgb());
                }
            }
        }
        let (r, c) = (
            corner(s.effector[1], FRAME_H),
            corner(s.effector[0], FRAME_W),
        );
        for row in r - 1..=r {
            for col in c - 1..=c {
                put(row, col, [1.0, 1.0, 1.0]);
            }
        }
        frame
    }

    pub fn success(&self, s: &WorldState) -> bool {
        s.target().is_some_and(|t| t.pos[1] >= self.cfg.goal_y)
    }

    /// Scripted pusher. Aligned below the target it pushes straight up. Safely
    /// below it (beyond contact reach) it slides sideways into line. Too close
    /// to line up, it backs straight down, or sidesteps when level with or above
    /// the target. Far to the side it heads for the staging point. Every turn
    /// thus happens out of contact reach.
    pub fn expert_action<R: Rng>(&self, s: &WorldState, rng: &mut R) -> Action {
        let cfg = &self.cfg;
        let Some(target) = s.target() else {
            return Action::ZERO;
        };
        let [tx, ty] = target.pos;
        let [ex, ey] = s.effector;
        let reach = cfg.contact_radius + 0.03;
        let waypoint = if (ex - tx).abs() <= 0.02 && ey < ty {
            [tx, ey + cfg.action_bound]
        } else if ey <= ty - reach {
            [tx, ey]
        } else if (ex - tx).abs() < cfg.contact_radius + 0.05 {
            if ey < ty {
                [ex, ey - cfg.action_bound]
            } else {
                let side = if ex >= tx { 1.0 } else { -1.0 };
                [
                    (tx + side * (cfg.contact_radius + 0.07)).clamp(0.0, 1.0),
                    ey,
                ]
            }
        } else {
            [tx, ey.min((ty - cfg.staging_offset).max(0.0))]
        };
        let base = Action::new(waypoint[0] - ex, waypoint[1] - ey).clipped(cfg.action_bound);
        let jitter = Normal::new(0.0f32, cfg.expert_jitter).expect("finite sigma");
        Action::new(base.dx + jitter.sample(rng), base.dy + jitter.sample(rng))
            .clipped(cfg.action_bound)
    }

    /// Uniformly random action with probability `random_action_prob`, else the expert's.
    pub fn suboptimal_action<R: Rng>(&self, s: &WorldState, rng: &mut R) -> Action {
        let b = self.cfg.action_bound;
        if rng.gen_bool(self.cfg.random_action_prob) {
            Action::new(rng.gen_range(-b..=b), rng.gen_range(-b..=b))
        } else {
            self.expert_action(s, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world() -> ColorWorld {
        ColorWorld::default()
    }

    fn scene() -> [Color; 3] {
        [Color::Red, Color::Green, Color::Purple]
    }

    fn manual(effector: [f32; 2], objects: &[(Color, [f32; 2])], task: Color) -> WorldState {
        WorldState {
            effector,
            objects: objects
                .iter()
                .map(|&(color, pos)| SceneObject { color, pos })
                .collect(),
            step_count: 0,
            task: TaskPrompt::color(task),
            seed: 0,
        }
    }

    #[test]
    fn reset_is_seeded_and_separated() {
        let w = world();
        let task = TaskPrompt::color(Color::Purple);
        let a = w.reset(&task, &scene(), 42).unwrap();
        assert_eq!(a, w.reset(&task, &scene(), 42).unwrap());
        assert_eq!(a.effector, [0.5, 0.05]);
        assert_eq!(a.step_count, 0);
        assert_eq!(a.target().unwrap().color, Color::Purple);
        for seed in 0..200 {
            let s = w.reset(&task, &scene(), seed).unwrap();
            for i in 0..3 {
                assert!((0.15..=0.5).contains(&s.objects[i].pos[1]));
                for j in 0..i {
                    assert!(dist(s.objects[i].pos, s.objects[j].pos) >= 0.12);
                }
            }
            assert!(!w.success(&s));
        }
    }

    #[test]
    fn reset_rejects_absent_task_color() {
        let err = world()
            .reset(&TaskPrompt::color(Color::Orange), &scene(), 1)
            .unwrap_err();
        assert!(matches!(err, Error::Task(_)));
    }

    #[test]
    fn zero_action_only_advances_step() {
        let w = world();
        let s = w
            .reset(&TaskPrompt::color(Color::Red), &scene(), 3)
            .unwrap();
        let n = w.step(&s, Action::ZERO).unwrap();
        assert_eq!(n.effector, s.effector);
        assert_eq!(n.objects, s.objects);
        assert_eq!(n.step_count, 1);
    }

    #[test]
    fn contact_pushes_object() {
        let w = world();
        let s = manual([0.5, 0.30], &[(Color::Red, [0.5, 0.37])], Color::Red);
        let n = w.step(&s, Action::new(0.0, 0.08)).unwrap();
        assert!((n.objects[0].pos[1] - 0.45).abs() < 1e-6);
        assert!((n.objects[0].pos[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn only_nearest_contact_moves() {
        let w = world();
        let s = manual(
            [0.5, 0.30],
            &[(Color::Red, [0.5, 0.40]), (Color::Blue, [0.44, 0.42])],
            Color::Red,
        );
        let n = w.step(&s, Action::new(0.0, 0.08)).unwrap();
        assert_ne!(n.objects[0].pos, s.objects[0].pos);
        assert_eq!(n.objects[1].pos, s.objects[1].pos);
    }

    #[test]
    fn effector_clipped_to_arena_and_action_set() {
        let w = world();
        let s = manual([0.99, 0.5], &[(Color::Red, [0.2, 0.2])], Color::Red);
        let n = w.step(&s, Action::new(0.08, 0.0)).unwrap();
        assert_eq!(n.effector[0], 1.0);
        let n = w.step(&s, Action::new(-5.0, 0.0)).unwrap();
        assert!((n.effector[0] - 0.91).abs() < 1e-6);
    }

    #[test]
    fn terminal_state_refuses_step() {
        let w = world();
        let mut s = manual([0.5, 0.5], &[(Color::Red, [0.2, 0.2])], Color::Red);
        s.step_count = 40;
        assert!(matches!(w.step(&s, Action::ZERO), Err(Error::Episode(_))));
        let s = manual([0.5, 0.5], &[(Color::Red, [0.2, 0.9])], Color::Red);
        assert!(matches!(w.step(&s, Action::ZERO), Err(Error::Episode(_))));
    }

    #[test]
    fn success_only_counts_target() {
        let w = world();
        let s = manual([0.5, 0.05], &[(Color::Red, [0.2, 0.86])], Color::Red);
        assert!(w.success(&s));
        let s = manual(
            [0.5, 0.05],
            &[(Color::Red, [0.2, 0.5]), (Color::Blue, [0.6, 0.9])],
            Color::Red,
        );
        assert!(!w.success(&s));
    }

    #[test]
    fn render_counts_and_purity() {
        let w = world();
        let s = manual(
            [0.5, 0.05],
            &[
                (Color::Red, [0.2, 0.3]),
                (Color::Green, [0.5, 0.5]),
                (Color::Pink, [0.8, 0.3]),
            ],
            Color::Red,
        );
        let f = w.render(&s);
        assert_eq!(f, w.render(&s));
        let lit = f.chunks(3).filter(|p| p.iter().any(|&v| v > 0.0)).count();
        assert_eq!(lit, 3 * 9 + 4);
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn moving_object_one_cell_changes_only_its_blocks() {
        let w = world();
        let base = manual([0.5, 0.05], &[(Color::Blue, [0.5, 0.5])], Color::Blue);
        for (dx, dy) in [(1i32, 0i32), (-1, 0), (0, 1), (0, -1), (1, 1)] {
            let mut moved = base.clone();
            moved.objects[0].pos[0] += dx as f32 / 16.0;
            moved.objects[0].pos[1] += dy as f32 / 16.0;
            let (fa, fb) = (w.render(&base), w.render(&moved));
            let block = |pos: [f32; 2]| -> Vec<(usize, usize)> {
                let (r, c) = (cell(pos[1], 16) as i32, cell(pos[0], 16) as i32);
                let mut v = vec![];
                for rr in r - 1..=r + 1 {
                    for cc in c - 1..=c + 1 {
                        v.push((rr as usize, cc as usize));
                    }
                }
                v
            };
            let old = block(base.objects[0].pos);
            let new = block(moved.objects[0].pos);
            for row in 0..16 {
                for col in 0..16 {
                    let i = (row * 16 + col) * 3;
                    let changed = fa[i..i + 3] != fb[i..i + 3];
                    let in_old = old.contains(&(row, col));
                    let in_new = new.contains(&(row, col));
                    assert_eq!(
                        changed,
                        in_old != in_new,
                        "pixel {row},{col} for move {dx},{dy}"
                    );
                }
            }
        }
    }

    #[test]
    fn expert_direction_and_push_phase() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = manual([0.1, 0.05], &[(Color::Red, [0.7, 0.4])], Color::Red);
        assert!(w.expert_action(&s, &mut rng).dx > 0.0);
        let s = manual([0.7, 0.28], &[(Color::Red, [0.7, 0.4])], Color::Red);
        let a = w.expert_action(&s, &mut rng);
        assert!(a.dx.abs() < 0.03 && (a.dy - 0.08).abs() < 0.03, "{a:?}");
    }

    #[test]
    fn forced_expert_branch_matches_expert() {
        let w = ColorWorld::new(EnvConfig {
            random_action_prob: 0.0,
            ..EnvConfig::default()
        })
        .unwrap();
        let s = w
            .reset(&TaskPrompt::color(Color::Green), &scene(), 9)
            .unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = r1.clone();
        let sub = w.suboptimal_action(&s, &mut r1);
        r2.gen_bool(0.0);
        assert_eq!(sub, w.expert_action(&s, &mut r2));
    }
}
