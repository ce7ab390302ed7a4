//! Inverse dynamics: a pixel MLP mapping `(frame_t, frame_{t+k})` to the
//! effector displacement accumulated over the `k` steps between them.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{Action, EpisodeRecord, FRAME_LEN};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Grads, NetConfig, Network, ParamStore};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmConfig {
    pub frame_skip: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub action_bound: f32,
    /// Probability of training on a degraded copy of a pair (see [`IdmModel::fit`]).
    pub augment_prob: f64,
    /// Final epochs on the in-domain demonstrations alone, without augmentation.
    pub polish_epochs: usize,
    pub polish_lr: f32,
    pub seed: u64,
}

impl Default for IdmConfig {
    fn default() -> Self {
        Self {
            frame_skip: 4,
            hidden: vec![256, 256],
            epochs: 20,
            lr: 1e-3,
            batch: 32,
            action_bound: 0.08,
            augment_prob: 0.5,
            polish_epochs: 100,
            polish_lr: 3e-4,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct IdmMeta {
    kind: String,
    frame_skip: usize,
    action_bound: f32,
    net: NetConfig,
}

/// A frame pair and the displacement that connects them.
#[derive(Debug, Clone)]
pub struct IdmPair<'a> {
    pub from: &'a [f32],
    pub to: &'a [f32],
    pub displacement: [f32; 2],
}

/// Every `(frame_t, frame_{t+k})` pair of an episode. Pairs that run past the
/// final frame reuse it and count no further motion, so finished episodes also
/// contribute stationary examples.
pub fn episode_pairs(ep: &EpisodeRecord, k: usize) -> Vec<IdmPair<'_>> {
    let last = ep.frames.len() - 1;
    (0..last)
        .map(|t| {
            let end = (t + k).min(last);
            let mut d = [0.0f32; 2];
            for a in &ep.actions[t..end] {
                d[0] += a.dx;
                d[1] += a.dy;
            }
            IdmPair {
                from: &ep.frames[t],
                to: &ep.frames[end],
                displacement: d,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdmModel {
    net: Network,
    frame_skip: usize,
    action_bound: f32,
}

impl IdmModel {
    pub fn new(cfg: &IdmConfig) -> Result<Self> {
        if cfg.frame_skip == 0 {
            return Err(Error::Config("frame skip must be >= 1".into()));
        }
        let net = Network::new(NetConfig {
            input_width: 2 * FRAME_LEN,
            hidden: cfg.hidden.clone(),
            output_width: 2,
            activation: Activation::Silu,
            time_embed_width: 0,
            prompt_embed_width: 0,
            seed: cfg.seed,
        })?;
        Ok(Self {
            net,
            frame_skip: cfg.frame_skip,
            action_bound: cfg.action_bound,
        })
    }

    pub fn frame_skip(&self) -> usize {
        self.frame_skip
    }

    pub fn params(&self) -> &ParamStore {
        self.net.params()
    }

    fn span(&self) -> f32 {
        self.frame_skip as f32 * self.action_bound
    }

    fn rows(pairs: &[(&[f32], &[f32])]) -> Result<Vec<f32>> {
        let mut rows = Vec::with_capacity(pairs.len() * 2 * FRAME_LEN);
        for (a, b) in pairs {
            if a.len() != FRAME_LEN || b.len() != FRAME_LEN {
                return Err(Error::Dimension {
                    context: "IDM frame".into(),
                    expected: FRAME_LEN,
                    got: if a.len() != FRAME_LEN {
                        a.len()
                    } else {
                        b.len()
                    },
                });
            }
            rows.extend_from_slice(a);
            rows.extend_from_slice(b);
        }
        Ok(rows)
    }

    /// Total displacement between each frame pair, clipped to `k ·` the per-step bound.
    pub fn predict_displacements(&self, pairs: &[(&[f32], &[f32])]) -> Result<Vec<[f32; 2]>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.net.forward_batch(&Self::rows(pairs)?, pairs.len())?;
        let span = self.span();
        Ok(out
            .chunks_exact(2)
            .map(|o| {
                [
                    (o[0] * span).clamp(-span, span),
                    (o[1] * span).clamp(-span, span),
                ]
            })
            .collect())
    }

    /// `k` equal per-step actions realizing the predicted displacement.
    pub fn predict_action(&self, from: &[f32], to: &[f32]) -> Result<Vec<Action>> {
        let d = self.predict_displacements(&[(from, to)])?[0];
        Ok(self.split(d))
    }

    pub fn split(&self, d: [f32; 2]) -> Vec<Action> {
        let k = self.frame_skip as f32;
        let a = Action::new(d[0] / k, d[1] / k).clipped(self.action_bound);
        vec![a; self.frame_skip]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&IdmMeta {
            kind: "idm".into(),
            frame_skip: self.frame_skip,
            action_bound: self.action_bound,
            net: self.net.config().clone(),
        })
        .expect("metadata serializes");
        self.net.params().save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        let meta: IdmMeta = serde_json::from_str(&meta).map_err(|e| Error::Format {
            kind: "checkpoint",
            reason: format!("{}: bad IDM metadata: {e}", path.display()),
        })?;
        if meta.kind != "idm" {
            return Err(Error::Format {
                kind: "checkpoint",
                reason: format!("{} holds a `{}`, not an IDM", path.display(), meta.kind),
            });
        }
        Ok(Self {
            net: Network::from_params(meta.net, params)?,
            frame_skip: meta.frame_skip,
            action_bound: meta.action_bound,
        })
    }

    /// Mean squared error of the predicted per-step action against the mean
    /// recorded per-step action over each pair's gap.
    pub fn action_mse(&self, pairs: &[IdmPair<'_>]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Data("no pairs to evaluate".into()));
        }
        let k = self.frame_skip as f32;
        let mut se = 0.0f64;
        for chunk in pairs.chunks(256) {
            let inputs: Vec<(&[f32], &[f32])> = chunk.iter().map(|p| (p.from, p.to)).collect();
            let pred = self.predict_displacements(&inputs)?;
            for (p, d) in chunk.iter().zip(pred) {
                for c in 0..2 {
                    se += (((d[c] - p.displacement[c]) / k) as f64).powi(2);
                }
            }
        }
        Ok(se / (2 * pairs.len()) as f64)
    }

    /// Continues training on `pairs`; returns the mean loss of each epoch.
    ///
    /// With probability `augment_prob` a pair is degraded the way sampled plans
    /// are: the later frame is blended toward the earlier one and both get pixel
    /// noise, while the displacement label is kept.
    pub fn fit(
        &mut self,
        pairs: &[IdmPair<'_>],
        epochs: usize,
        lr: f32,
        batch: usize,
        augment_prob: f64,
        seed: u64,
    ) -> Result<Vec<f32>> {
        if pairs.is_empty() {
            return Err(Error::Data("IDM training set has no frame pairs".into()));
        }
        let batch = batch.max(1);
        let span = self.span();
        let mut adam = Adam::new(self.net.params());
        let mut grads = Grads::zeros_like(self.net.params());
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = rng_for(seed, &[0x1d3]);
        let mut epoch_losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0f64;
            for idx in order.chunks(batch) {
                let inputs: Vec<(&[f32], &[f32])> =
                    idx.iter().map(|&i| (pairs[i].from, pairs[i].to)).collect();
                let mut rows = Self::rows(&inputs)?;
                if augment_prob > 0.0 {
                    for row in rows.chunks_exact_mut(2 * FRAME_LEN) {
                        if rng.gen_bool(augment_prob) {
                            degrade(row, &mut rng);
                        }
                    }
                }
                let cache = self.net.forward_cached(&rows, idx.len())?;
                let n = (idx.len() * 2) as f32;
                let mut d_out = vec![0.0f32; idx.len() * 2];
                for (b, &i) in idx.iter().enumerate() {
                    for c in 0..2 {
                        let diff = cache.output[b * 2 + c] - pairs[i].displacement[c] / span;
                        total += (diff as f64).powi(2);
                        d_out[b * 2 + c] = 2.0 * diff / n;
                    }
                }
                grads.zero();
                self.net.backward(&rows, &cache, &d_out, &mut grads, None)?;
                adam.step(self.net.params_mut(), &grads, lr)?;
            }
            let mean = (total / (pairs.len() * 2) as f64) as f32;
            if !mean.is_finite() {
                return Err(Error::Training {
                    name: "idm".into(),
                    reason: "non-finite loss".into(),
                });
            }
            epoch_losses.push(mean);
        }
        Ok(epoch_losses)
    }
}

/// Blends the second frame of a `[from | to]` row toward the first and adds pixel noise.
fn degrade<R: Rng>(row: &mut [f32], rng: &mut R) {
    let (from, to) = row.split_at_mut(FRAME_LEN);
    let keep: f32 = rng.gen_range(0.3..1.0);
    for (t, f) in to.iter_mut().zip(from.iter()) {
        *t = keep * *t + (1.0 - keep) * f;
    }
    let sigma: f32 = rng.gen_range(0.0..0.1);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    for v in row.iter_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Trains a fresh IDM on every frame pair of `dataset`.
pub fn train_idm(dataset: &[EpisodeRecord], cfg: &IdmConfig) -> Result<(IdmModel, Vec<f32>)> {
    let pairs: Vec<IdmPair<'_>> = dataset
        .iter()
        .filter(|ep| ep.frames.len() > cfg.frame_skip)
        .flat_map(|ep| episode_pairs(ep, cfg.frame_skip))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no episode has more than {} frames",
            cfg.frame_skip
        )));
    }
    let mut model = IdmModel::new(cfg)?;
    let losses = model.fit(
        &pairs,
        cfg.epochs,
        cfg.lr,
        cfg.batch,
        cfg.augment_prob,
        cfg.seed,
    )?;
    Ok((model, losses))
}
