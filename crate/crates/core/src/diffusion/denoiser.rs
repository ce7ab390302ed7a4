use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::env::{CHANNELS, FRAME_H, FRAME_W};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embed, Activation, NetConfig, Network, ParamStore, Tensor};
use crate::prompt::{TaskPrompt, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    InDomain,
    General,
}

/// Shape of a conditioned video: `frames` future frames of `h × w × 3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            frames: 8,
            h: FRAME_H,
            w: FRAME_W,
        }
    }
}

impl Geometry {
    pub fn frame_len(&self) -> usize {
        self.h * self.w * CHANNELS
    }

    pub fn data_len(&self) -> usize {
        self.frames * self.frame_len()
    }
}

/// One epsilon query: noisy data at timestep `t`, its clean conditioning frame, a prompt.
#[derive(Debug, Clone, Copy)]
pub struct EpsQuery<'a> {
    pub x: &'a [f32],
    pub cond: &'a [f32],
    pub t: usize,
    pub prompt: &'a TaskPrompt,
}

/// Anything that predicts the noise in a noisy sample.
pub trait EpsModel: Sync {
    fn data_len(&self) -> usize;
    fn cond_len(&self) -> usize;
    /// One prediction per query, in order.
    fn predict(&self, queries: &[EpsQuery<'_>]) -> Result<Vec<Vec<f32>>>;
}

/// What the network's raw output means. Either way the denoiser reports epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// The output is the noise estimate itself.
    Epsilon,
    /// The output is the clean stack minus the repeated conditioning frame;
    /// epsilon follows from `(x_t - sqrt(ab) x0) / sqrt(1 - ab)`.
    CleanResidual,
    /// Like `CleanResidual`, but the noisy residual `u = x_t / sqrt(ab) - cond`
    /// is passed through with weight `c_skip` and the output only corrects it:
    /// `x0 = cond + c_skip u + c_out F`, with `s² = (1 - ab) / ab`,
    /// `c_skip = d² / (s² + d²)`, `c_out = s d / sqrt(s² + d²)`, `d = residual_scale`.
    #[default]
    SkipResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    #[serde(default)]
    pub geometry: Geometry,
    pub hidden: Vec<usize>,
    pub time_embed_width: usize,
    pub prompt_embed_width: usize,
    #[serde(default)]
    pub parameterization: Parameterization,
    /// Typical magnitude of `x0 - cond`; only read by `SkipResidual`.
    #[serde(default = "default_residual_scale")]
    pub residual_scale: f32,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

fn default_residual_scale() -> f32 {
    0.05
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::default(),
            hidden: vec![512, 512],
            time_embed_width: 32,
            prompt_embed_width: 32,
            parameterization: Parameterization::SkipResidual,
            residual_scale: default_residual_scale(),
            schedule: ScheduleConfig::default(),
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn net_config(&self) -> NetConfig {
        let g = self.geometry;
        NetConfig {
            input_width: g.data_len() + g.frame_len(),
            hidden: self.hidden.clone(),
            output_width: g.data_len(),
            activation: Activation::Silu,
            time_embed_width: self.time_embed_width,
            prompt_embed_width: self.prompt_embed_width,
            seed: self.seed,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DenoiserMeta {
    kind: String,
    role: Role,
    config: DenoiserConfig,
}

pub const PROMPT_EMBEDDING: &str = "prompt_embedding";

/// Epsilon-prediction MLP over `[noisy stack | clean frame | t features | prompt]`.
///
/// Prompts embed as the mean of their token rows in a learned table, so `not orange`
/// shares the `orange` row. Evaluations are counted per query.
#[derive(Debug)]
pub struct Denoiser {
    role: Role,
    cfg: DenoiserConfig,
    net: Network,
    sched: NoiseSchedule,
    embed_index: usize,
    evals: AtomicU64,
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        Self {
            role: self.role,
            cfg: self.cfg.clone(),
            net: self.net.clone(),
            sched: self.sched.clone(),
            embed_index: self.embed_index,
            evals: AtomicU64::new(0),
        }
    }
}

impl Denoiser {
    pub fn new(role: Role, cfg: DenoiserConfig) -> Result<Self> {
        if cfg.prompt_embed_width == 0 {
            return Err(Error::Config("prompt embedding width must be >= 1".into()));
        }
        let net = Network::new(cfg.net_config())?;
        let mut params = net.into_params();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe3bed);
        let mut table = Tensor::zeros(
            PROMPT_EMBEDDING,
            vec![Token::VOCAB_SIZE, cfg.prompt_embed_width],
        );
        table
            .data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
        params.push(table);
        Self::from_params(role, cfg, params)
    }

    pub fn from_params(role: Role, cfg: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let embed_index = params
            .index_of(PROMPT_EMBEDDING)
            .ok_or_else(|| Error::Config("denoiser checkpoint lacks a prompt embedding".into()))?;
        if params.at(embed_index).shape != [Token::VOCAB_SIZE, cfg.prompt_embed_width] {
            return Err(Error::Config("prompt embedding shape mismatch".into()));
        }
        let net = Network::from_params(cfg.net_config(), params)?;
        let sched = NoiseSchedule::try_from(cfg.schedule)?;
        Ok(Self {
            role,
            cfg,
            net,
            sched,
            embed_index,
            evals: AtomicU64::new(0),
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> Geometry {
        self.cfg.geometry
    }

    /// The schedule the denoiser was trained against.
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub(crate) fn embed_index(&self) -> usize {
        self.embed_index
    }

    pub fn params(&self) -> &ParamStore {
        self.net.params()
    }

    pub fn content_hash(&self) -> String {
        self.net.params().content_hash()
    }

    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_eval_count(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    pub fn prompt_embedding(&self, prompt: &TaskPrompt) -> Vec<f32> {
        let width = self.cfg.prompt_embed_width;
        let table = &self.net.params().at(self.embed_index).data;
        let mut out = vec![0.0f32; width];
        let n = prompt.tokens().len() as f32;
        for tok in prompt.tokens() {
            let row = &table[tok.index() * width..(tok.index() + 1) * width];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v / n;
            }
        }
        out
    }

    /// `(s², c_skip, c_out)` for timestep `t` under `SkipResidual`.
    fn skip_coefficients(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.sched.alpha_bar(t);
        let s2 = (1.0 - ab) / ab;
        let d2 = (self.cfg.residual_scale as f64).powi(2);
        (s2, d2 / (s2 + d2), (s2 * d2 / (s2 + d2)).sqrt())
    }

    /// d(eps) / d(raw output) for timestep `t`; the map is elementwise affine.
    pub(crate) fn output_slope(&self, t: usize) -> f32 {
        match self.cfg.parameterization {
            Parameterization::Epsilon => 1.0,
            Parameterization::CleanResidual => {
                let ab = self.sched.alpha_bar(t);
                (-(ab / (1.0 - ab)).sqrt()) as f32
            }
            Parameterization::SkipResidual => {
                let (s2, _, c_out) = self.skip_coefficients(t);
                (-c_out / s2.sqrt()) as f32
            }
        }
    }

    /// Per-sample gradient weight that makes the loss uniform in raw-output
    /// space, for parameterizations that define one.
    pub(crate) fn output_space_weight(&self, t: usize) -> Option<f32> {
        match self.cfg.parameterization {
            Parameterization::SkipResidual => Some(self.output_slope(t).powi(-2)),
            _ => None,
        }
    }

    /// Converts one raw network output row into an epsilon estimate.
    pub(crate) fn epsilon_from_output(&self, q: &EpsQuery<'_>, raw: &[f32]) -> Vec<f32> {
        match self.cfg.parameterization {
            Parameterization::Epsilon => raw.to_vec(),
            Parameterization::CleanResidual => {
                let ab = self.sched.alpha_bar(q.t);
                let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
                let fl = q.cond.len();
                raw.iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let x0 = q.cond[i % fl] as f64 + r as f64;
                        ((q.x[i] as f64 - a * x0) / s) as f32
                    })
                    .collect()
            }
            Parameterization::SkipResidual => {
                let ab = self.sched.alpha_bar(q.t);
                let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
                let (_, c_skip, c_out) = self.skip_coefficients(q.t);
                let fl = q.cond.len();
                raw.iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let (x, c) = (q.x[i] as f64, q.cond[i % fl] as f64);
                        let x0 = c + c_skip * (x / a - c) + c_out * r as f64;
                        ((x - a * x0) / s) as f32
                    })
                    .collect()
            }
        }
    }

    /// Appends one network input row for `q` to `rows`.
    pub(crate) fn push_row(&self, rows: &mut Vec<f32>, q: &EpsQuery<'_>) -> Result<()> {
        let g = self.cfg.geometry;
        self.sched.check_t(q.t)?;
        if q.x.len() != g.data_len() {
            return Err(Error::Dimension {
                context: "noisy video".into(),
                expected: g.data_len(),
                got: q.x.len(),
            });
        }
        if q.cond.len() != g.frame_len() {
            return Err(Error::Dimension {
                context: "conditioning frame".into(),
                expected: g.frame_len(),
                got: q.cond.len(),
            });
        }
        rows.extend_from_slice(q.x);
        rows.extend_from_slice(q.cond);
        rows.extend(sinusoidal_embed(q.t, self.cfg.time_embed_width)?);
        rows.extend(self.prompt_embedding(q.prompt));
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.params().save(path, &self.meta_json())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        self.net.params().to_checkpoint_bytes(&self.meta_json())
    }

    fn meta_json(&self) -> String {
        serde_json::to_string(&DenoiserMeta {
            kind: "denoiser".into(),
            role: self.role,
            config: self.cfg.clone(),
        })
        .expect("metadata serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        let meta: DenoiserMeta = serde_json::from_str(&meta).map_err(|e| Error::Format {
            kind: "checkpoint",
            reason: format!("{}: bad denoiser metadata: {e}", path.display()),
        })?;
        if meta.kind != "denoiser" {
            return Err(Error::Format {
                kind: "checkpoint",
                reason: format!("{} holds a `{}`, not a denoiser", path.display(), meta.kind),
            });
        }
        Self::from_params(meta.role, meta.config, params)
    }
}

impl EpsModel for Denoiser {
    fn data_len(&self) -> usize {
        self.cfg.geometry.data_len()
    }

    fn cond_len(&self) -> usize {
        self.cfg.geometry.frame_len()
    }

    fn predict(&self, queries: &[EpsQuery<'_>]) -> Result<Vec<Vec<f32>>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let width = self.net.config().full_input_width();
        let mut rows = Vec::with_capacity(queries.len() * width);
        for q in queries {
            self.push_row(&mut rows, q)?;
        }
        let out = self.net.forward_batch(&rows, queries.len())?;
        self.evals
            .fetch_add(queries.len() as u64, Ordering::Relaxed);
        Ok(out
            .chunks_exact(self.data_len())
            .zip(queries)
            .map(|(raw, q)| self.epsilon_from_output(q, raw))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Color;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            geometry: Geometry {
                frames: 2,
                h: 3,
                w: 2,
            },
            hidden: vec![8],
            time_embed_width: 4,
            prompt_embed_width: 3,
            seed: 1,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn prompt_embedding_is_token_mean() {
        let d = Denoiser::new(Role::InDomain, tiny()).unwrap();
        let o = d.prompt_embedding(&TaskPrompt::color(Color::Orange));
        let n = d.prompt_embedding(&"not".parse::<TaskPrompt>().unwrap());
        let both = d.prompt_embedding(&"not orange".parse().unwrap());
        for i in 0..3 {
            assert!((both[i] - 0.5 * (o[i] + n[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_role_and_outputs() {
        let d = Denoiser::new(Role::General, tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ck");
        d.save(&path).unwrap();
        let back = Denoiser::load(&path).unwrap();
        assert_eq!(back.role(), Role::General);
        assert_eq!(back.to_checkpoint_bytes(), d.to_checkpoint_bytes());
        let x = vec![0.3; 36];
        let c = vec![0.1; 18];
        let p = TaskPrompt::color(Color::Red);
        let q = [EpsQuery {
            x: &x,
            cond: &c,
            t: 5,
            prompt: &p,
        }];
        assert_eq!(back.predict(&q).unwrap(), d.predict(&q).unwrap());
        assert_eq!(d.eval_count(), 1);
    }

    #[test]
    fn wrong_shapes_rejected() {
        let d = Denoiser::new(Role::InDomain, tiny()).unwrap();
        let p = TaskPrompt::null();
        let x = vec![0.0; 35];
        let c = vec![0.0; 18];
        let q = [EpsQuery {
            x: &x,
            cond: &c,
            t: 1,
            prompt: &p,
        }];
        assert!(matches!(d.predict(&q), Err(Error::Dimension { .. })));
    }
}
