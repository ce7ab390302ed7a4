//! ColorWorld: a kinematic push environment with pixel rendering, an oracle
//! success predicate, and scripted expert / suboptimal policies.

mod episode;
mod world;

pub use episode::{
    collect_demos, scripted_episode, DemoPolicy, EpisodeRecord, TaskSpec, EPISODE_MAGIC,
};
pub use world::{
    Action, ColorWorld, EnvConfig, Frame, SceneObject, WorldState, CHANNELS, FRAME_H, FRAME_LEN,
    FRAME_W,
};
