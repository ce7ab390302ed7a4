use rand_distr::{Distribution, StandardNormal};

use super::guidance::{AdaptationMode, Composer, Item};
use super::schedule::NoiseSchedule;
use crate::env::Frame;
use crate::error::{Error, Result};
use crate::prompt::TaskPrompt;
use crate::seed::rng_for;

/// The clean observation followed by the synthesized future frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPlan {
    pub frames: Vec<Frame>,
    pub prompt: TaskPrompt,
    pub seed: u64,
    pub mode: AdaptationMode,
}

/// Strided DDIM timesteps `T, T - s, ..., s` with `s = T / steps`.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max || !t_max.is_multiple_of(steps) {
        return Err(Error::Config(format!(
            "DDIM steps must divide T={t_max}, got {steps}"
        )));
    }
    let stride = t_max / steps;
    Ok((0..steps).map(|i| t_max - i * stride).collect())
}

/// Seeded unit-Gaussian starting point.
pub fn initial_noise(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = rng_for(seed, &[0xdd1]);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Deterministic (eta = 0) DDIM integration of a batch of samples.
///
/// `score(xs, t)` returns one epsilon per sample. Each step forms
/// `x0 = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)` and moves to
/// `x_prev = sqrt(ab_prev) x0 + sqrt(1 - ab_prev) eps`; the final step lands on
/// `ab = 1`, i.e. returns the last `x0` estimate. No clipping is applied.
pub fn ddim_integrate<F>(
    mut score: F,
    mut xs: Vec<Vec<f32>>,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Vec<Vec<f32>>>
where
    F: FnMut(&[Vec<f32>], usize) -> Result<Vec<Vec<f32>>>,
{
    let ts = ddim_timesteps(sched.t_max(), steps)?;
    let stride = sched.t_max() / steps;
    for (step, &t) in ts.iter().enumerate() {
        let eps = score(&xs, t)?;
        if eps.len() != xs.len() {
            return Err(Error::Dimension {
                context: "score batch".into(),
                expected: xs.len(),
                got: eps.len(),
            });
        }
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t - stride);
        let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (sp, s1p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (x, e) in xs.iter_mut().zip(&eps) {
            if e.len() != x.len() {
                return Err(Error::Dimension {
                    context: "score output".into(),
                    expected: x.len(),
                    got: e.len(),
                });
            }
            for (xi, &ei) in x.iter_mut().zip(e) {
                let ei = ei as f64;
                let x0 = (*xi as f64 - s1a * ei) / sa;
                *xi = (sp * x0 + s1p * ei) as f32;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Sampling { step, t });
            }
        }
    }
    Ok(xs)
}

/// One conditioned sampling request.
#[derive(Debug, Clone)]
pub struct PlanRequest<'a> {
    pub cond_frame: &'a [f32],
    pub prompt: &'a TaskPrompt,
    pub seed: u64,
}

/// Samples one plan per request with a shared composed score; results do not
/// depend on which other requests share the batch.
pub fn ddim_sample_batch(
    composer: &Composer<'_>,
    requests: &[PlanRequest<'_>],
    sched: &NoiseSchedule,
    steps: usize,
    frames: usize,
) -> Result<Vec<VideoPlan>> {
    let len = composer.data_len();
    if frames == 0 || !len.is_multiple_of(frames) {
        return Err(Error::Config(format!(
            "{len} values do not split into {frames} frames"
        )));
    }
    let init = requests
        .iter()
        .map(|r| initial_noise(len, r.seed))
        .collect();
    let out = ddim_integrate(
        |xs, t| {
            let items: Vec<Item<'_>> = xs
                .iter()
                .zip(requests)
                .map(|(x, r)| Item {
                    x,
                    cond: r.cond_frame,
                    t,
                    prompt: r.prompt,
                })
                .collect();
            composer.epsilon(&items)
        },
        init,
        sched,
        steps,
    )?;
    Ok(out
        .into_iter()
        .zip(requests)
        .map(|(x, r)| {
            let frame_len = len / frames;
            let mut plan = Vec::with_capacity(frames + 1);
            plan.push(r.cond_frame.to_vec());
            plan.extend(
                x.chunks_exact(frame_len)
                    .map(|f| f.iter().map(|v| v.clamp(0.0, 1.0)).collect()),
            );
            VideoPlan {
                frames: plan,
                prompt: r.prompt.clone(),
                seed: r.seed,
                mode: composer.guidance.mode,
            }
        })
        .collect())
}

/// Samples a single plan; see [`ddim_sample_batch`].
pub fn ddim_sample(
    composer: &Composer<'_>,
    cond_frame: &[f32],
    prompt: &TaskPrompt,
    sched: &NoiseSchedule,
    steps: usize,
    frames: usize,
    seed: u64,
) -> Result<VideoPlan> {
    let req = PlanRequest {
        cond_frame,
        prompt,
        seed,
    };
    let mut v = ddim_sample_batch(composer, &[req], sched, steps, frames)?;
    Ok(v.pop().expect("one plan"))
}
