//! Run configuration, the train / sail / eval / plot commands, metrics files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{Denoiser, DenoiserConfig, NoiseSchedule, Role, ScheduleConfig};
use crate::env::{collect_demos, ColorWorld, DemoPolicy, EnvConfig, EpisodeRecord, TaskSpec};
use crate::error::{Error, Result};
use crate::idm::{episode_pairs, train_idm, IdmConfig, IdmModel, IdmPair};
use crate::planner::Planner;
use crate::prompt::Color;
use crate::sail::{
    parallel_rollouts, run_sail, summarize, train_denoiser, IterationReport, SailConfig,
    SailContext, TaskOutcome, TrainOptions, TrainingEpisode,
};
use crate::seed::derive_seed;

pub const METRICS_HEADER: &str =
    "iteration,task,adaptation_mode,filter_mode,n_rollouts,n_success,success_rate,mean_episode_length,seed";

/// Demonstration corpora for initial training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub demos_per_task: usize,
    pub policy: DemoPolicy,
    pub general_demos_per_task: usize,
    /// Arena used for the general corpus; broader placements than the in-domain arena.
    pub general_env: EnvConfig,
    /// Task-agnostic exploration episodes per seen-color scene, added to the
    /// IDM's training data alongside the in-domain corpus.
    pub idm_explore_per_task: usize,
    /// Extra expert episodes per seen-color scene for the IDM only.
    pub idm_expert_per_task: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            demos_per_task: 10,
            policy: DemoPolicy::Expert,
            general_demos_per_task: 10,
            general_env: EnvConfig::broad(),
            idm_explore_per_task: 60,
            idm_expert_per_task: 100,
        }
    }
}

/// Every knob of a run. Missing JSON fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Where `train` writes and `sail` / `eval` read checkpoints; defaults to `<out_dir>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub theta: DenoiserConfig,
    pub general: DenoiserConfig,
    pub theta_train: TrainOptions,
    pub general_train: TrainOptions,
    pub idm: IdmConfig,
    pub sail: SailConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = ScheduleConfig::default();
        let theta = DenoiserConfig {
            hidden: vec![256, 256],
            schedule,
            ..DenoiserConfig::default()
        };
        let train = TrainOptions {
            steps: 10_000,
            lr: 1e-3,
            batch: 16,
            ..TrainOptions::default()
        };
        Self {
            out_dir: PathBuf::from("runs"),
            checkpoint_dir: None,
            seed: 0,
            schedule,
            env: EnvConfig::default(),
            data: DataConfig::default(),
            general: theta.clone(),
            theta,
            theta_train: train,
            general_train: train,
            idm: IdmConfig::default(),
            sail: SailConfig {
                finetune_lr: 1e-3,
                ..SailConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Applies cross-field rules (shared seed, shared schedule) and validates.
    pub fn resolved(mut self) -> Result<Self> {
        self.sail.seed = self.seed;
        self.theta.schedule = self.schedule;
        self.general.schedule = self.schedule;
        self.theta.seed = derive_seed(self.seed, &[1]);
        self.general.seed = derive_seed(self.seed, &[2]);
        self.idm.seed = derive_seed(self.seed, &[3]);
        self.idm.action_bound = self.env.action_bound;
        self.theta_train.frame_skip = self.idm.frame_skip;
        self.general_train.frame_skip = self.idm.frame_skip;
        ColorWorld::new(self.env.clone())?;
        ColorWorld::new(self.data.general_env.clone())?;
        NoiseSchedule::try_from(self.schedule)?;
        self.sail.validate()?;
        if self.theta.geometry != self.general.geometry {
            return Err(Error::Config(
                "in-domain and general models need the same geometry".into(),
            ));
        }
        if self.data.demos_per_task == 0 {
            return Err(Error::Config("demos_per_task must be >= 1".into()));
        }
        if self
            .sail
            .novel_tasks
            .iter()
            .any(|c| Color::SEEN.contains(c))
        {
            return Err(Error::Config(
                "novel tasks must not use in-domain colors".into(),
            ));
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the resolved JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoints"))
    }

    pub fn world(&self) -> Result<ColorWorld> {
        ColorWorld::new(self.env.clone())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::try_from(self.schedule)
    }
}

/// The seen-color corpus the in-domain model and IDM learn from.
pub fn in_domain_corpus(cfg: &RunConfig) -> Result<Vec<EpisodeRecord>> {
    let specs = TaskSpec::all_combinations(&Color::SEEN, &Color::SEEN);
    collect_demos(
        &cfg.world()?,
        &specs,
        cfg.data.demos_per_task,
        cfg.data.policy,
        derive_seed(cfg.seed, &[10]),
    )
}

/// Exploration and extra expert episodes over the seen-color scenes, for IDM training.
pub fn interaction_corpus(cfg: &RunConfig) -> Result<Vec<EpisodeRecord>> {
    let specs = TaskSpec::all_combinations(&Color::SEEN, &Color::SEEN);
    let world = cfg.world()?;
    let mut out = Vec::new();
    for (n, policy, key) in [
        (cfg.data.idm_explore_per_task, DemoPolicy::Explore, 12),
        (cfg.data.idm_expert_per_task, DemoPolicy::Expert, 13),
    ] {
        if n > 0 {
            out.extend(collect_demos(
                &world,
                &specs,
                n,
                policy,
                derive_seed(cfg.seed, &[key]),
            )?);
        }
    }
    Ok(out)
}

/// The all-color expert corpus of the general model, from the broad arena.
pub fn general_corpus(cfg: &RunConfig) -> Result<Vec<EpisodeRecord>> {
    let specs = TaskSpec::all_combinations(&Color::ALL, &Color::ALL);
    let world = ColorWorld::new(cfg.data.general_env.clone())?;
    collect_demos(
        &world,
        &specs,
        cfg.data.general_demos_per_task,
        DemoPolicy::Expert,
        derive_seed(cfg.seed, &[11]),
    )
}

pub struct Models {
    pub theta: Denoiser,
    pub general: Denoiser,
    pub idm: IdmModel,
}

pub struct TrainLosses {
    pub theta: Vec<f32>,
    pub general: Vec<f32>,
    pub idm: Vec<f32>,
}

pub fn train_theta(cfg: &RunConfig, corpus: &[EpisodeRecord]) -> Result<(Denoiser, Vec<f32>)> {
    let mut theta = Denoiser::new(Role::InDomain, cfg.theta.clone())?;
    let data: Vec<TrainingEpisode> = corpus.iter().map(TrainingEpisode::from).collect();
    let losses = train_denoiser(
        &mut theta,
        &data,
        &cfg.noise_schedule()?,
        &cfg.theta_train,
        derive_seed(cfg.seed, &[20]),
    )
    .map_err(|e| e.context("training the in-domain model"))?;
    Ok((theta, losses))
}

pub fn train_general(cfg: &RunConfig, corpus: &[EpisodeRecord]) -> Result<(Denoiser, Vec<f32>)> {
    let mut general = Denoiser::new(Role::General, cfg.general.clone())?;
    let data: Vec<TrainingEpisode> = corpus.iter().map(TrainingEpisode::from).collect();
    let losses = train_denoiser(
        &mut general,
        &data,
        &cfg.noise_schedule()?,
        &cfg.general_train,
        derive_seed(cfg.seed, &[21]),
    )
    .map_err(|e| e.context("training the general model"))?;
    Ok((general, losses))
}

/// Builds both corpora and trains the three models.
pub fn train_models(cfg: &RunConfig) -> Result<(Models, TrainLosses)> {
    let ind = in_domain_corpus(cfg)?;
    let gen = general_corpus(cfg)?;
    let mut interaction = interaction_corpus(cfg)?;
    log::info!(
        "corpora: {} in-domain, {} general, {} extra IDM episodes",
        ind.len(),
        gen.len(),
        interaction.len()
    );
    interaction.extend(ind.iter().cloned());
    let (mut idm, mut idm_losses) =
        train_idm(&interaction, &cfg.idm).map_err(|e| e.context("training the IDM"))?;
    if cfg.idm.polish_epochs > 0 {
        let pairs: Vec<IdmPair<'_>> = ind
            .iter()
            .flat_map(|ep| episode_pairs(ep, cfg.idm.frame_skip))
            .collect();
        let seed = derive_seed(cfg.seed, &[4]);
        idm_losses.extend(
            idm.fit(
                &pairs,
                cfg.idm.polish_epochs,
                cfg.idm.polish_lr,
                cfg.idm.batch,
                0.0,
                seed,
            )
            .map_err(|e| e.context("polishing the IDM"))?,
        );
    }
    let (theta, theta_losses) = train_theta(cfg, &ind)?;
    let (general, general_losses) = train_general(cfg, &gen)?;
    Ok((
        Models {
            theta,
            general,
            idm,
        },
        TrainLosses {
            theta: theta_losses,
            general: general_losses,
            idm: idm_losses,
        },
    ))
}

pub struct CheckpointPaths {
    pub theta: PathBuf,
    pub general: PathBuf,
    pub idm: PathBuf,
}

impl CheckpointPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            theta: dir.join("theta.ck"),
            general: dir.join("general.ck"),
            idm: dir.join("idm.ck"),
        }
    }

    pub fn load(&self) -> Result<Models> {
        for p in [&self.theta, &self.general, &self.idm] {
            if !p.exists() {
                return Err(Error::Config(format!("missing checkpoint {}", p.display())));
            }
        }
        let theta = Denoiser::load(&self.theta)?;
        let general = Denoiser::load(&self.general)?;
        if theta.role() != Role::InDomain || general.role() != Role::General {
            return Err(Error::Config(
                "checkpoint roles do not match their file names".into(),
            ));
        }
        Ok(Models {
            theta,
            general,
            idm: IdmModel::load(&self.idm)?,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn loss_csv(losses: &[f32], unit: &str) -> String {
    let mut s = format!("{unit},loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

/// Trains all models and writes checkpoints, loss logs and the resolved config.
pub fn cmd_train(cfg: &RunConfig) -> Result<CheckpointPaths> {
    let dir = cfg.checkpoint_dir();
    let (models, losses) = train_models(cfg)?;
    let paths = CheckpointPaths::in_dir(&dir);
    models.theta.save(&paths.theta)?;
    models.general.save(&paths.general)?;
    models.idm.save(&paths.idm)?;
    write_file(
        &dir.join("loss_theta.csv"),
        loss_csv(&losses.theta, "step").as_bytes(),
    )?;
    write_file(
        &dir.join("loss_general.csv"),
        loss_csv(&losses.general, "step").as_bytes(),
    )?;
    write_file(
        &dir.join("loss_idm.csv"),
        loss_csv(&losses.idm, "epoch").as_bytes(),
    )?;
    write_file(&dir.join("train.json"), cfg.to_json().as_bytes())?;
    Ok(paths)
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub task: String,
    pub adaptation_mode: String,
    pub filter_mode: String,
    pub n_rollouts: usize,
    pub n_success: usize,
    pub success_rate: f64,
    pub mean_episode_length: f64,
    pub seed: u64,
}

pub fn report_rows(report: &IterationReport, sail: &SailConfig) -> Vec<MetricsRow> {
    task_rows(report.iteration, &report.tasks, sail)
}

pub fn task_rows(iteration: usize, tasks: &[TaskOutcome], sail: &SailConfig) -> Vec<MetricsRow> {
    tasks
        .iter()
        .map(|t| MetricsRow {
            iteration,
            task: t.task.clone(),
            adaptation_mode: sail.adaptation.to_string(),
            filter_mode: sail.filter.to_string(),
            n_rollouts: t.n_rollouts,
            n_success: t.n_success,
            success_rate: t.n_success as f64 / t.n_rollouts as f64,
            mean_episode_length: t.mean_episode_length,
            seed: sail.seed,
        })
        .collect()
}

/// Appends rows to a metrics file, writing the header first if the file is new.
pub struct MetricsWriter {
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        write_file(path, format!("{METRICS_HEADER}\n").as_bytes())?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, rows: &[MetricsRow]) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for r in rows {
            w.serialize(r).expect("rows serialize");
        }
        let bytes = w.into_inner().expect("in-memory writer");
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(&bytes)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text).map_err(|e| e.context(path.display().to_string()))
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let first = text.lines().next().unwrap_or_default();
    if first.trim_end() != METRICS_HEADER {
        return Err(Error::Parse {
            line: 1,
            reason: format!("expected header `{METRICS_HEADER}`"),
        });
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<MetricsRow>() {
        let row = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&row.success_rate) {
            return Err(Error::Parse {
                line: rows.len() + 2,
                reason: format!("success rate {} outside [0, 1]", row.success_rate),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Rollout parallelism from `SAIL_THREADS`, defaulting to the available cores.
pub fn threads_from_env() -> usize {
    std::env::var("SAIL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Directory of a SAIL run: distinct for every distinct resolved config.
pub fn sail_run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("sail").join(format!(
        "{}-{}-s{}-{}",
        cfg.sail.adaptation,
        cfg.sail.filter,
        cfg.seed,
        &cfg.hash()[..12]
    ))
}

/// Runs the loop from trained checkpoints, flushing metrics after every iteration.
pub fn cmd_sail(cfg: &RunConfig) -> Result<PathBuf> {
    let paths = CheckpointPaths::in_dir(&cfg.checkpoint_dir());
    let Models {
        mut theta,
        general,
        mut idm,
    } = paths.load()?;
    let dir = sail_run_dir(cfg);
    write_file(&dir.join("run.json"), cfg.to_json().as_bytes())?;
    let mut metrics = MetricsWriter::create(&dir.join("metrics.csv"))?;
    let world = cfg.world()?;
    let sched = theta.schedule().clone();
    let initial = in_domain_corpus(cfg)?;
    let ctx = SailContext {
        world: &world,
        sched: &sched,
        general: Some(&general),
        initial_demos: &initial,
        out_dir: Some(&dir),
        threads: threads_from_env(),
    };
    run_sail(&cfg.sail, &ctx, &mut theta, &mut idm, |report| {
        metrics.append(&report_rows(report, &cfg.sail))
    })?;
    Ok(dir)
}

/// Evaluates the checkpoints without finetuning. Writes one episode file per
/// rollout and one metrics row per task under `<out_dir>/eval-...`.
pub fn cmd_eval(
    cfg: &RunConfig,
    theta_override: Option<&Path>,
) -> Result<(PathBuf, Vec<MetricsRow>)> {
    let paths = CheckpointPaths::in_dir(&cfg.checkpoint_dir());
    let mut models = paths.load()?;
    if let Some(p) = theta_override {
        models.theta = Denoiser::load(p)?;
    }
    let dir = cfg.out_dir.join("eval").join(format!(
        "{}-s{}-{}",
        cfg.sail.adaptation,
        cfg.seed,
        &models.theta.content_hash()[..12]
    ));
    let rows = evaluate(cfg, &models, Some(&dir))?;
    let mut metrics = MetricsWriter::create(&dir.join("metrics.csv"))?;
    metrics.append(&rows)?;
    Ok((dir, rows))
}

/// Rolls out `cfg.sail.rollouts` episodes on the configured tasks with the
/// configured composition; returns one row per task.
pub fn evaluate(
    cfg: &RunConfig,
    models: &Models,
    episode_dir: Option<&Path>,
) -> Result<Vec<MetricsRow>> {
    let world = cfg.world()?;
    let sched = models.theta.schedule().clone();
    let planner = Planner {
        world: &world,
        theta: &models.theta,
        general: Some(&models.general),
        idm: &models.idm,
        sched: &sched,
        cfg: cfg.sail.planner(models.theta.geometry().frames),
    };
    let jobs = cfg.sail.rollout_jobs(0);
    let episodes: Vec<EpisodeRecord> = parallel_rollouts(&planner, &jobs, threads_from_env())?
        .into_iter()
        .map(|o| o.episode)
        .collect();
    if let Some(dir) = episode_dir {
        let ep_dir = dir.join("episodes");
        fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
        for (i, ep) in episodes.iter().enumerate() {
            ep.save(&ep_dir.join(format!("{i:04}.ep")))?;
        }
    }
    Ok(task_rows(0, &summarize(&episodes), &cfg.sail))
}

/// Pretty-prints an episode file.
pub fn inspect_episode(path: &Path) -> Result<String> {
    let ep = EpisodeRecord::load(path)?;
    let mut s = String::new();
    let _ = writeln!(s, "file:      {}", path.display());
    let _ = writeln!(s, "task:      {}", ep.task);
    let scene: Vec<&str> = ep.scene.iter().map(|c| c.name()).collect();
    let _ = writeln!(s, "scene:     {}", scene.join(", "));
    let _ = writeln!(s, "seed:      {}", ep.seed);
    let _ = writeln!(s, "success:   {}", ep.success);
    let _ = writeln!(s, "frames:    {}", ep.frames.len());
    let _ = writeln!(s, "actions:   {}", ep.actions.len());
    let replans: Vec<String> = ep.replan_steps.iter().map(u32::to_string).collect();
    let _ = writeln!(s, "replans:   [{}]", replans.join(", "));
    for (i, a) in ep.actions.iter().enumerate() {
        let _ = writeln!(s, "  {i:3}  dx={:+.4}  dy={:+.4}", a.dx, a.dy);
    }
    Ok(s)
}

struct Series {
    label: String,
    /// iteration -> per-seed success rates (tasks pooled).
    points: BTreeMap<usize, Vec<f64>>,
}

fn collect_series(rows: &[MetricsRow]) -> Vec<Series> {
    // (mode, filter) -> iteration -> seed -> (successes, rollouts)
    let mut acc: BTreeMap<(String, String), BTreeMap<usize, BTreeMap<u64, (usize, usize)>>> =
        BTreeMap::new();
    for r in rows {
        let e = acc
            .entry((r.adaptation_mode.clone(), r.filter_mode.clone()))
            .or_default()
            .entry(r.iteration)
            .or_default()
            .entry(r.seed)
            .or_default();
        e.0 += r.n_success;
        e.1 += r.n_rollouts;
    }
    acc.into_iter()
        .map(|((mode, filter), iters)| Series {
            label: format!("{mode} / {filter}"),
            points: iters
                .into_iter()
                .map(|(it, seeds)| {
                    let rates = seeds
                        .values()
                        .map(|&(s, n)| if n == 0 { 0.0 } else { s as f64 / n as f64 })
                        .collect();
                    (it, rates)
                })
                .collect(),
        })
        .collect()
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Success rate against iteration: a mean line per (adaptation, filter) pair
/// with a min-max band over seeds.
pub fn render_plot(rows: &[MetricsRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Data("no metrics rows to plot".into()));
    }
    let series = collect_series(rows);
    let max_iter = rows.iter().map(|r| r.iteration).max().unwrap_or(0);
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 200.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |it: usize| {
        if max_iter == 0 {
            left + pw / 2.0
        } else {
            left + pw * it as f64 / max_iter as f64
        }
    };
    let y = |v: f64| top + ph * (1.0 - v);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"##,
            y(v),
            left + pw,
            y(v),
            left - 6.0,
            y(v) + 4.0
        );
    }
    for it in 0..=max_iter {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{it}</text>"#,
            x(it),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/><line x1="{left:.2}" y1="{top:.2}" x2="{left:.2}" y2="{:.2}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">iteration</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">success rate</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let stats: Vec<(usize, f64, f64, f64)> = ser
            .points
            .iter()
            .map(|(&it, rates)| {
                let mean = rates.iter().sum::<f64>() / rates.len() as f64;
                let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (it, mean, lo, hi)
            })
            .collect();
        let upper = stats
            .iter()
            .map(|&(it, _, _, hi)| format!("{:.2},{:.2}", x(it), y(hi)));
        let lower = stats
            .iter()
            .rev()
            .map(|&(it, _, lo, _)| format!("{:.2},{:.2}", x(it), y(lo)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = stats
            .iter()
            .map(|&(it, m, _, _)| format!("{:.2},{:.2}", x(it), y(m)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for &(it, m, _, _) in &stats {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                x(it),
                y(m)
            );
        }
        let ly = top + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            w - right + 15.0,
            w - right + 40.0,
            w - right + 46.0,
            ly + 4.0,
            ser.label
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Reads metrics files and renders them into one chart.
pub fn cmd_plot(files: &[PathBuf]) -> Result<String> {
    if files.is_empty() {
        return Err(Error::Config("plot needs at least one metrics file".into()));
    }
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_metrics(f)?);
    }
    render_plot(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iteration: usize, seed: u64, n_success: usize) -> MetricsRow {
        MetricsRow {
            iteration,
            task: "orange".into(),
            adaptation_mode: "ipa".into(),
            filter_mode: "oracle".into(),
            n_rollouts: 10,
            n_success,
            success_rate: n_success as f64 / 10.0,
            mean_episode_length: 20.5,
            seed,
        }
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&p).unwrap();
        w.append(&[row(0, 1, 3)]).unwrap();
        w.append(&[row(1, 1, 5)]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(read_metrics(&p).unwrap(), vec![row(0, 1, 3), row(1, 1, 5)]);
    }

    #[test]
    fn malformed_metrics_report_line() {
        let text = format!("{METRICS_HEADER}\n0,orange,ipa,oracle,10,3,0.3,20,1\n1,orange,ipa,oracle,ten,3,0.3,20,1\n");
        match parse_metrics(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_metrics("a,b\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn plot_is_deterministic_with_bands() {
        let rows = vec![
            row(0, 1, 2),
            row(0, 2, 4),
            row(0, 3, 3),
            row(1, 1, 5),
            row(1, 2, 7),
            row(1, 3, 6),
        ];
        let a = render_plot(&rows).unwrap();
        assert_eq!(a, render_plot(&rows).unwrap());
        assert_eq!(a.matches("<polyline").count(), 1);
        assert_eq!(a.matches("<polygon").count(), 1);
        assert!(a.contains("iteration") && a.contains("success rate"));
        let one = render_plot(&[row(0, 1, 2)]).unwrap();
        assert_eq!(one.matches("<circle").count(), 1);
    }

    #[test]
    fn config_defaults_resolve_and_hash_differs() {
        let a = RunConfig::default().resolved().unwrap();
        let mut b = a.clone();
        b.sail.adaptation = crate::diffusion::AdaptationMode::InDomainCfg;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(sail_run_dir(&a), sail_run_dir(&b));
        let parsed = RunConfig::from_json(&a.to_json()).unwrap();
        assert_eq!(parsed, a);
        assert!(RunConfig::from_json(r#"{"sead": 3}"#)
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn in_domain_corpus_has_no_novel_colors() {
        let cfg = RunConfig {
            data: DataConfig {
                demos_per_task: 1,
                ..DataConfig::default()
            },
            ..RunConfig::default()
        };
        let eps = in_domain_corpus(&cfg).unwrap();
        assert_eq!(eps.len(), 12);
        assert!(eps
            .iter()
            .all(|e| e.scene.iter().all(|c| Color::SEEN.contains(c))));
    }
}
