use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::denoiser::{Denoiser, EpsQuery};
use super::guidance::NoisyVideo;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{Adam, Grads};
use crate::prompt::{TaskPrompt, Token};

/// `sqrt(ab_t) · x0 + sqrt(1 - ab_t) · eps`, paired with the clean frame.
pub fn forward_noise(
    x0: &[f32],
    cond_frame: &[f32],
    t: usize,
    eps: &[f32],
    sched: &NoiseSchedule,
) -> Result<NoisyVideo> {
    sched.check_t(t)?;
    if eps.len() != x0.len() {
        return Err(Error::Dimension {
            context: "noise".into(),
            expected: x0.len(),
            got: eps.len(),
        });
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    Ok(NoisyVideo {
        data,
        t,
        cond_frame: cond_frame.to_vec(),
    })
}

/// A clean training example: conditioning frame, future-frame stack, prompt.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub cond: &'a [f32],
    pub x0: &'a [f32],
    pub prompt: &'a TaskPrompt,
}

/// Mean squared error.
pub fn eps_mse(pred: &[f32], target: &[f32]) -> f32 {
    let n = pred.len().max(1) as f64;
    (pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| ((p - t) as f64).powi(2))
        .sum::<f64>()
        / n) as f32
}

/// Epsilon-matching trainer with classifier-free prompt dropout.
///
/// The reported loss is the plain epsilon MSE. When `snr_clip` is set, each
/// sample's gradient is scaled by `min(1, snr_clip / snr(t))`, which caps the
/// effective clean-sample weight of near-noiseless timesteps. Parameterizations
/// with their own output-space weighting ignore `snr_clip`.
///
/// Owns the Adam moments; creating a new trainer restarts them.
pub struct DenoiserTrainer {
    adam: Adam,
    grads: Grads,
    pub lr: f32,
    pub drop_prob: f64,
    pub snr_clip: Option<f64>,
}

impl DenoiserTrainer {
    pub fn new(den: &Denoiser, lr: f32, drop_prob: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !(0.0..=1.0).contains(&drop_prob) {
            return Err(Error::Config(format!(
                "drop probability must be in [0,1], got {drop_prob}"
            )));
        }
        Ok(Self {
            adam: Adam::new(den.params()),
            grads: Grads::zeros_like(den.params()),
            lr,
            drop_prob,
            snr_clip: None,
        })
    }

    /// One minibatch update. Returns the pre-update loss.
    pub fn train_step<R: Rng>(
        &mut self,
        den: &mut Denoiser,
        batch: &[TrainItem<'_>],
        sched: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::Data("empty training batch".into()));
        }
        if sched != den.schedule() {
            return Err(Error::Config(
                "training schedule differs from the denoiser's".into(),
            ));
        }
        let null = TaskPrompt::null();
        let mut noisy = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut prompts = Vec::with_capacity(batch.len());
        for item in batch {
            let t = rng.gen_range(1..=sched.t_max());
            let eps: Vec<f32> = (0..item.x0.len())
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let dropped = rng.gen_bool(self.drop_prob);
            noisy.push(forward_noise(item.x0, item.cond, t, &eps, sched)?);
            targets.push(eps);
            prompts.push(if dropped { &null } else { item.prompt });
        }
        let queries: Vec<EpsQuery<'_>> = noisy
            .iter()
            .zip(&prompts)
            .map(|(nv, p)| EpsQuery {
                x: &nv.data,
                cond: &nv.cond_frame,
                t: nv.t,
                prompt: p,
            })
            .collect();
        self.step_on(den, &queries, &targets)
    }

    fn weight(&self, den: &Denoiser, t: usize) -> f32 {
        if let Some(w) = den.output_space_weight(t) {
            return w;
        }
        match self.snr_clip {
            Some(clip) => {
                let ab = den.schedule().alpha_bar(t);
                (clip * (1.0 - ab) / ab).min(1.0) as f32
            }
            None => 1.0,
        }
    }

    /// Gradient step on explicit (query, target epsilon) pairs.
    pub fn step_on(
        &mut self,
        den: &mut Denoiser,
        queries: &[EpsQuery<'_>],
        targets: &[Vec<f32>],
    ) -> Result<f32> {
        let n = queries.len();
        if targets.len() != n {
            return Err(Error::Dimension {
                context: "training targets".into(),
                expected: n,
                got: targets.len(),
            });
        }
        let net_cfg = den.network().config().clone();
        let width = net_cfg.full_input_width();
        let mut rows = Vec::with_capacity(n * width);
        for q in queries {
            den.push_row(&mut rows, q)?;
        }
        let cache = den.network().forward_cached(&rows, n)?;
        let out_w = net_cfg.output_width;
        let scale = 2.0 / (n * out_w) as f32;
        let mut loss = 0.0f64;
        let mut d_out = vec![0.0f32; n * out_w];
        for (b, (target, q)) in targets.iter().zip(queries).enumerate() {
            let pred = den.epsilon_from_output(q, &cache.output[b * out_w..(b + 1) * out_w]);
            let slope = den.output_slope(q.t) * self.weight(den, q.t);
            for j in 0..out_w {
                let diff = pred[j] - target[j];
                loss += (diff as f64) * (diff as f64);
                d_out[b * out_w + j] = scale * diff * slope;
            }
        }
        let loss = (loss / (n * out_w) as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::Training {
                name: "loss".into(),
                reason: "non-finite loss".into(),
            });
        }

        self.grads.zero();
        let pw = net_cfg.prompt_embed_width;
        let prompt_cols = width - pw..width;
        let d_prompt = den
            .network()
            .backward(&rows, &cache, &d_out, &mut self.grads, Some(prompt_cols))?
            .expect("prompt columns requested");
        let embed = den.embed_index();
        let table_grad = &mut self.grads.arrays[embed];
        for (q, dp) in queries.iter().zip(d_prompt.chunks_exact(pw)) {
            let tokens: &[Token] = q.prompt.tokens();
            let share = 1.0 / tokens.len() as f32;
            for tok in tokens {
                let row = &mut table_grad[tok.index() * pw..(tok.index() + 1) * pw];
                for (g, d) in row.iter_mut().zip(dp) {
                    *g += share * d;
                }
            }
        }
        self.adam
            .step(den.network_mut().params_mut(), &self.grads, self.lr)?;
        Ok(loss)
    }
}
