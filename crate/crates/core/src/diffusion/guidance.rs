use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::denoiser::{EpsModel, EpsQuery};
use crate::error::{Error, Result};
use crate::prompt::TaskPrompt;

/// A noised future-frame stack together with its clean conditioning frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyVideo {
    pub data: Vec<f32>,
    pub t: usize,
    pub cond_frame: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// Classifier-free guidance on the in-domain model alone.
    InDomainCfg,
    /// General model as main denoiser, in-domain conditional as a weighted prior.
    Ipa,
    /// In-domain model as main denoiser, general conditional as a weighted prior.
    Pa,
}

impl AdaptationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptationMode::InDomainCfg => "in_domain_cfg",
            AdaptationMode::Ipa => "ipa",
            AdaptationMode::Pa => "pa",
        }
    }

    pub fn needs_general(self) -> bool {
        !matches!(self, AdaptationMode::InDomainCfg)
    }
}

impl fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_domain_cfg" => Ok(Self::InDomainCfg),
            "ipa" => Ok(Self::Ipa),
            "pa" => Ok(Self::Pa),
            other => Err(Error::Config(format!("unknown adaptation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Text-guidance scale.
    pub alpha: f32,
    /// Prior strength of the auxiliary model's conditional term.
    pub gamma: f32,
    pub mode: AdaptationMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 2.5,
            gamma: 0.5,
            mode: AdaptationMode::Ipa,
        }
    }
}

impl GuidanceConfig {
    /// The stronger text guidance used for the real-robot pushing setup.
    pub fn strong_text() -> Self {
        Self {
            alpha: 7.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "guidance needs alpha >= 0 and gamma >= 0, got {} / {}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

/// `e_u + alpha · (e_c - e_u)`
fn cfg_combine(e_u: &[f32], e_c: &[f32], alpha: f32) -> Vec<f32> {
    e_u.iter()
        .zip(e_c)
        .map(|(&u, &c)| u + alpha * (c - u))
        .collect()
}

/// `e_u + alpha · (e_c + gamma · e_aux - e_u)`
fn prior_combine(e_u: &[f32], e_c: &[f32], e_aux: &[f32], alpha: f32, gamma: f32) -> Vec<f32> {
    e_u.iter()
        .zip(e_c)
        .zip(e_aux)
        .map(|((&u, &c), &a)| u + alpha * ((c + gamma * a) - u))
        .collect()
}

fn check_pair(a: &dyn EpsModel, b: &dyn EpsModel) -> Result<()> {
    if a.data_len() != b.data_len() || a.cond_len() != b.cond_len() {
        return Err(Error::Composition(format!(
            "denoiser geometries differ: data {} vs {}, cond {} vs {}",
            a.data_len(),
            b.data_len(),
            a.cond_len(),
            b.cond_len()
        )));
    }
    Ok(())
}

/// Evaluates `model` unconditionally and conditionally on each item in one batch,
/// returning `(unconditional, conditional)` per item.
fn eval_u_c(model: &dyn EpsModel, items: &[Item<'_>]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let null = TaskPrompt::null();
    let mut queries = Vec::with_capacity(items.len() * 2);
    for it in items {
        queries.push(EpsQuery {
            x: it.x,
            cond: it.cond,
            t: it.t,
            prompt: &null,
        });
        queries.push(EpsQuery {
            x: it.x,
            cond: it.cond,
            t: it.t,
            prompt: it.prompt,
        });
    }
    let mut out = model.predict(&queries)?.into_iter();
    Ok((0..items.len())
        .map(|_| {
            let u = out.next().expect("two outputs per item");
            let c = out.next().expect("two outputs per item");
            (u, c)
        })
        .collect())
}

fn eval_c(model: &dyn EpsModel, items: &[Item<'_>]) -> Result<Vec<Vec<f32>>> {
    let queries: Vec<EpsQuery<'_>> = items
        .iter()
        .map(|it| EpsQuery {
            x: it.x,
            cond: it.cond,
            t: it.t,
            prompt: it.prompt,
        })
        .collect();
    model.predict(&queries)
}

/// One element of a batched composition.
#[derive(Debug, Clone, Copy)]
pub struct Item<'a> {
    pub x: &'a [f32],
    pub cond: &'a [f32],
    pub t: usize,
    pub prompt: &'a TaskPrompt,
}

/// A guidance rule bound to its denoisers; evaluates composed epsilons in batches.
///
/// Per item: CFG costs two in-domain evaluations; IPA two general and one
/// in-domain; PA two in-domain and one general.
#[derive(Clone, Copy)]
pub struct Composer<'a> {
    pub guidance: GuidanceConfig,
    pub theta: &'a dyn EpsModel,
    pub general: Option<&'a dyn EpsModel>,
}

impl<'a> Composer<'a> {
    pub fn new(
        guidance: GuidanceConfig,
        theta: &'a dyn EpsModel,
        general: Option<&'a dyn EpsModel>,
    ) -> Result<Self> {
        guidance.validate()?;
        if guidance.mode.needs_general() {
            let g = general.ok_or_else(|| {
                Error::Config(format!(
                    "adaptation mode {} needs a general model",
                    guidance.mode
                ))
            })?;
            check_pair(theta, g)?;
        }
        Ok(Self {
            guidance,
            theta,
            general,
        })
    }

    pub fn data_len(&self) -> usize {
        self.theta.data_len()
    }

    pub fn epsilon(&self, items: &[Item<'_>]) -> Result<Vec<Vec<f32>>> {
        let GuidanceConfig { alpha, gamma, mode } = self.guidance;
        match mode {
            AdaptationMode::InDomainCfg => Ok(eval_u_c(self.theta, items)?
                .iter()
                .map(|(u, c)| cfg_combine(u, c, alpha))
                .collect()),
            AdaptationMode::Ipa => {
                let general = self.general.expect("checked in new");
                let g = eval_u_c(general, items)?;
                let th = eval_c(self.theta, items)?;
                Ok(g.iter()
                    .zip(&th)
                    .map(|((u, c), a)| prior_combine(u, c, a, alpha, gamma))
                    .collect())
            }
            AdaptationMode::Pa => {
                let general = self.general.expect("checked in new");
                let th = eval_u_c(self.theta, items)?;
                let g = eval_c(general, items)?;
                Ok(th
                    .iter()
                    .zip(&g)
                    .map(|((u, c), a)| prior_combine(u, c, a, alpha, gamma))
                    .collect())
            }
        }
    }
}

fn item<'a>(nv: &'a NoisyVideo, prompt: &'a TaskPrompt) -> Item<'a> {
    Item {
        x: &nv.data,
        cond: &nv.cond_frame,
        t: nv.t,
        prompt,
    }
}

/// Classifier-free guidance: `e_u + alpha · (e_c - e_u)`.
pub fn cfg_epsilon(
    model: &dyn EpsModel,
    nv: &NoisyVideo,
    prompt: &TaskPrompt,
    alpha: f32,
) -> Result<Vec<f32>> {
    let guidance = GuidanceConfig {
        alpha,
        gamma: 0.0,
        mode: AdaptationMode::InDomainCfg,
    };
    let mut out = Composer::new(guidance, model, None)?.epsilon(&[item(nv, prompt)])?;
    Ok(out.pop().expect("one item"))
}

/// `e_general(x) + alpha · (e_general(x | p) + gamma · e_theta(x | p) - e_general(x))`.
pub fn ipa_epsilon(
    e_theta: &dyn EpsModel,
    e_general: &dyn EpsModel,
    nv: &NoisyVideo,
    prompt: &TaskPrompt,
    g: &GuidanceConfig,
) -> Result<Vec<f32>> {
    let guidance = GuidanceConfig {
        mode: AdaptationMode::Ipa,
        ..*g
    };
    let mut out =
        Composer::new(guidance, e_theta, Some(e_general))?.epsilon(&[item(nv, prompt)])?;
    Ok(out.pop().expect("one item"))
}

/// `e_theta(x) + alpha · (e_theta(x | p) + gamma · e_general(x | p) - e_theta(x))`.
pub fn pa_epsilon(
    e_theta: &dyn EpsModel,
    e_general: &dyn EpsModel,
    nv: &NoisyVideo,
    prompt: &TaskPrompt,
    g: &GuidanceConfig,
) -> Result<Vec<f32>> {
    let guidance = GuidanceConfig {
        mode: AdaptationMode::Pa,
        ..*g
    };
    let mut out =
        Composer::new(guidance, e_theta, Some(e_general))?.epsilon(&[item(nv, prompt)])?;
    Ok(out.pop().expect("one item"))
}
