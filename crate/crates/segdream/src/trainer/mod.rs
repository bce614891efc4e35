//! Training orchestration: environment interaction, mask provisioning at
//! collection time, replay storage, world-model and actor-critic updates,
//! periodic evaluation on held-out distractor seeds, metrics, and
//! checkpointing.

pub mod metrics;

use crate::agent::Agent;
use crate::checkpoint;
use crate::config::{MaskKind, RunConfig, Variant};
use crate::containers::{EpisodeHeader, EpisodeWriter};
use crate::envsim::{Env, StepResult};
use crate::error::{Result, SdError};
use crate::evalkit::{episodic_quality, frame_iou, mean_sem, precision_recall};
use crate::maskprov::MaskProvider;
use crate::math::adam::Adam;
use crate::replay::{quantize_obs, Episode, Frame, ReplayBuffer};
use crate::worldmodel::loss::world_model_loss;
use crate::worldmodel::{LatentMode, LatentState, WorldModel};
use metrics::MetricsLogger;
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Episode seeds below this value are reserved for training; evaluation
/// seeds start here, so the two distractor streams never overlap.
pub const EVAL_SEED_BASE: u64 = 1 << 40;
/// Replay capacity in frames.
const REPLAY_CAPACITY: usize = 200_000;
/// Update-loss logging cadence (in updates).
const LOG_EVERY_UPDATES: usize = 25;
/// Binarization threshold for RGB-derived masks in evaluation metrics.
pub const RGB_MASK_THRESHOLD: f32 = 0.5;
/// Mask-quality metrics are computed on every Nth evaluation frame.
const EVAL_MASK_STRIDE: usize = 4;
/// Uniform-random warmup phase (decision steps). Actions are held for a few
/// steps at a time so exploration sweeps the arena instead of dithering.
const WARMUP_UNIFORM_STEPS: usize = 600;
const WARMUP_HOLD_MIN: usize = 4;
const WARMUP_HOLD_MAX: usize = 12;

pub fn train_episode_seed(index: u64) -> u64 {
    assert!(index < EVAL_SEED_BASE, "training episode index overflow");
    index
}

pub fn eval_episode_seed(index: u64) -> u64 {
    EVAL_SEED_BASE + index
}

/// Train/eval distractor-seed disjointness, checked at run start.
pub fn seed_ranges_disjoint(train_index: u64, eval_index: u64) -> bool {
    train_episode_seed(train_index) < EVAL_SEED_BASE
        && eval_episode_seed(eval_index) >= EVAL_SEED_BASE
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Record training episodes to an episode container.
    pub record_episodes: bool,
    /// Two-thread actor/learner mode; the default single-thread mode is
    /// fully deterministic.
    pub parallel: bool,
    pub quiet: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> RunOptions {
        RunOptions {
            out_dir: out_dir.into(),
            record_episodes: false,
            parallel: false,
            quiet: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub env_steps: usize,
    pub updates: usize,
    pub episodes: usize,
    /// Mean return of the final evaluation.
    pub final_eval_return: f64,
    /// Per-episode returns of the final evaluation.
    pub final_eval_returns: Vec<f64>,
    /// Mean mask-head episodic IoU at the final evaluation, when present.
    pub final_eval_iou_head: Option<f64>,
    pub out_dir: PathBuf,
}

/// Check whether a run directory holds a completed run.
pub fn run_is_complete(dir: &Path) -> bool {
    dir.join("checkpoint.sdcp").is_file()
}

struct EvalSummary {
    returns: Vec<f64>,
    iou_head: Option<f64>,
}

/// Per-frame mask sources compared against ground truth during evaluation.
struct EvalAccum {
    head: Vec<(Array2<bool>, Array2<bool>)>,
    fm: Vec<(Array2<bool>, Array2<bool>)>,
    rgb: Vec<(Array2<bool>, Array2<bool>)>,
    head_pr: Vec<(f64, f64)>,
    fm_pr: Vec<(f64, f64)>,
    rgb_pr: Vec<(f64, f64)>,
}

impl EvalAccum {
    fn new() -> EvalAccum {
        EvalAccum {
            head: Vec::new(),
            fm: Vec::new(),
            rgb: Vec::new(),
            head_pr: Vec::new(),
            fm_pr: Vec::new(),
            rgb_pr: Vec::new(),
        }
    }
}

/// Run one experiment to completion. Deterministic for a fixed `RunConfig`
/// in single-thread mode: identical configs produce identical metrics logs.
pub fn run(config: &RunConfig, opts: &RunOptions) -> Result<RunReport> {
    config.validate()?;
    assert!(seed_ranges_disjoint(0, 0));
    std::fs::create_dir_all(&opts.out_dir)?;
    std::fs::write(opts.out_dir.join("config.toml"), config.to_toml_string())?;

    if opts.parallel {
        return run_parallel(config, opts);
    }
    run_single(config, opts)
}

struct Trainer {
    config: RunConfig,
    wm: WorldModel<f32>,
    agent: Agent<f32>,
    wm_opt: Adam<f32>,
    replay: ReplayBuffer,
    rng: ChaCha8Rng,
    metrics: MetricsLogger,
    out_dir: PathBuf,
    updates: usize,
    episodes: usize,
    eval_counter: u64,
    quiet: bool,
}

impl Trainer {
    fn new(config: &RunConfig, opts: &RunOptions) -> Result<Trainer> {
        let adim = config.env.action_dim();
        let wm = WorldModel::<f32>::build(
            &config.model,
            config.env.image_size,
            adim,
            config.seed.wrapping_add(0xA11CE),
        )?;
        let agent = Agent::<f32>::build(
            &config.agent,
            config.model.state_dim(),
            adim,
            config.model.det_dim,
            config.model.learn_rate,
            config.seed.wrapping_add(0xB0B),
        )?;
        let wm_opt = Adam::new(&wm.params, config.model.learn_rate);
        let replay = ReplayBuffer::new(REPLAY_CAPACITY, config.seq_len);
        let metrics = MetricsLogger::create(&opts.out_dir.join("metrics.jsonl"))?;
        Ok(Trainer {
            config: config.clone(),
            wm,
            agent,
            wm_opt,
            replay,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xC0FFEE)),
            metrics,
            out_dir: opts.out_dir.clone(),
            updates: 0,
            episodes: 0,
            eval_counter: 0,
            quiet: opts.quiet,
        })
    }

    fn model_input(&self, obs: &Array3<f32>, mask: &Array2<bool>) -> Array3<f32> {
        if self.wm.cfg.variant.masks_input() {
            let mut out = obs.clone();
            for ((y, x), &m) in mask.indexed_iter() {
                if !m {
                    for c in 0..3 {
                        out[(y, x, c)] = 0.0;
                    }
                }
            }
            out
        } else {
            obs.clone()
        }
    }

    /// One gradient step of the world model plus one actor-critic step on
    /// imagined rollouts; aborts with a diagnostic checkpoint on NaN.
    fn update(&mut self, env_step: usize) -> Result<()> {
        let batch = self.replay.sample(self.config.batch_size, &mut self.rng)?;
        let loss = match world_model_loss(&self.wm, &batch, LatentMode::Sample, &mut self.rng) {
            Ok(l) => l,
            Err(e) => return self.abort_diagnostic(env_step, e),
        };
        let mut grads = loss.graph.backward(loss.total);
        let collected = self.wm.params.collect_grads(&loss.binding, &mut grads);
        let grad_norm = self.wm_opt.step(&mut self.wm.params, &collected);

        let start_h = loss
            .start_h
            .into_dimensionality::<ndarray::Ix2>()
            .expect("start states are 2-d");
        let start_z = loss
            .start_z
            .into_dimensionality::<ndarray::Ix2>()
            .expect("start states are 2-d");
        let rollout = self.agent.imagine(
            &self.wm,
            &start_h,
            &start_z,
            self.config.agent.horizon,
            &mut self.rng,
        )?;
        let ac = match self.agent.actor_critic_update(&rollout) {
            Ok(a) => a,
            Err(e) => return self.abort_diagnostic(env_step, e),
        };

        self.updates += 1;
        if self.updates % LOG_EVERY_UPDATES == 1 {
            let step = env_step as u64;
            let v = &loss.values;
            for (name, value) in [
                ("loss/total", v.total),
                ("loss/rgb", v.rgb),
                ("loss/reward", v.reward),
                ("loss/cont", v.cont),
                ("loss/dyn", v.dyn_),
                ("loss/rep", v.rep),
                ("loss/mask_bce", v.mask_bce),
                ("loss/kl_raw", v.kl_raw),
                ("loss/grad_norm", grad_norm),
                ("actor/loss", ac.actor),
                ("critic/loss", ac.critic),
                ("actor/entropy", ac.entropy),
                ("agent/return_scale", ac.scale),
            ] {
                self.metrics.log(step, name, value)?;
            }
        }
        Ok(())
    }

    fn abort_diagnostic(&mut self, env_step: usize, err: SdError) -> Result<()> {
        let path = self.out_dir.join("diagnostic.sdcp");
        let _ = checkpoint::save(&path, &self.config, env_step as u64, &self.wm, &self.agent);
        let _ = self.metrics.flush();
        Err(SdError::Numerical(format!(
            "aborted at env step {env_step}: {err} (diagnostic checkpoint at {})",
            path.display()
        )))
    }

    /// Greedy-mean-action evaluation on held-out distractor seeds.
    fn evaluate(&mut self, env_step: usize) -> Result<EvalSummary> {
        let summary = evaluate_model(
            &self.config,
            &self.wm,
            &self.agent,
            self.eval_counter,
            self.config.eval_episodes,
            Some(&mut self.metrics),
            env_step as u64,
        )?;
        self.eval_counter += 1;
        if !self.quiet {
            let (mean, sem) = mean_sem(&summary.returns);
            eprintln!(
                "step {env_step}: eval return {mean:.2} +- {sem:.2} ({} episodes)",
                summary.returns.len()
            );
        }
        Ok(summary)
    }
}

/// Evaluation shared by the trainer loop and the standalone `eval` command.
fn evaluate_model(
    config: &RunConfig,
    wm: &WorldModel<f32>,
    agent: &Agent<f32>,
    eval_counter: u64,
    episodes: usize,
    mut metrics: Option<&mut MetricsLogger>,
    log_step: u64,
) -> Result<EvalSummary> {
    let mut env = Env::new(config.env.clone())?;
    let mut provider = MaskProvider::new(crate::config::MaskProviderConfig {
        seed: config
            .masks
            .seed
            .wrapping_add(EVAL_SEED_BASE)
            .wrapping_add(eval_counter),
        ..config.masks.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(
        config.seed.wrapping_add(0xE7A1).wrapping_add(eval_counter),
    );
    let mut returns = Vec::with_capacity(episodes);
    let mut accum = EvalAccum::new();
    let threshold = config.model.mask_threshold as f32;

    for ep in 0..episodes {
        let seed = eval_episode_seed(eval_counter * episodes as u64 + ep as u64);
        let mut r = env.reset(seed);
        let mut latent = LatentState::zeros(&config.model);
        let mut prev_action = vec![0.0f32; env.action_dim()];
        let mut ep_return = 0.0f64;
        let mut ep_head: Vec<(Array2<bool>, Array2<bool>)> = Vec::new();
        let mut ep_fm: Vec<(Array2<bool>, Array2<bool>)> = Vec::new();
        let mut ep_rgb: Vec<(Array2<bool>, Array2<bool>)> = Vec::new();
        let mut head_probs: Vec<(Array2<f32>, Array2<bool>)> = Vec::new();

        let mut frame_idx = 0usize;
        loop {
            let mask_frame = provider.provide(&r.observation, &r.gt_mask)?;
            let obs_in = if config.model.variant.masks_input() {
                masked_obs(&r.observation, &mask_frame.mask)
            } else {
                r.observation.clone()
            };
            wm.observe(
                &mut latent,
                &obs_in,
                &prev_action,
                r.is_first,
                LatentMode::Mode,
                &mut rng,
            )?;
            // mask-quality bookkeeping against ground truth (strided: the
            // decoders are the expensive part of evaluation)
            if frame_idx % EVAL_MASK_STRIDE == 0 {
                let out = wm.outputs(&latent, &obs_in)?;
                if let Some(prob) = &out.mask_prob {
                    let pred = prob.mapv(|p| p >= threshold);
                    ep_head.push((pred, r.gt_mask.clone()));
                    head_probs.push((prob.clone(), r.gt_mask.clone()));
                }
                ep_fm.push((mask_frame.mask.clone(), r.gt_mask.clone()));
                let rgb_mask = rgb_derived_mask(&out.rgb_mean, RGB_MASK_THRESHOLD);
                ep_rgb.push((rgb_mask, r.gt_mask.clone()));
            }
            frame_idx += 1;

            let x = latent.x();
            let action = agent.act(&x, false, &mut rng);
            let step = env.step(&action)?;
            ep_return += step.reward as f64;
            prev_action = action;
            if !step.cont {
                break;
            }
            r = step;
        }

        returns.push(ep_return);
        if let Some(m) = metrics.as_deref_mut() {
            m.log(log_step, "eval/episode_return", ep_return)?;
        }
        if !ep_head.is_empty() {
            let q = episodic_quality(&ep_head)?;
            accum.head.extend(ep_head);
            for (prob, gt) in &head_probs {
                accum
                    .head_pr
                    .push(precision_recall(prob, gt, threshold)?);
            }
            if let Some(m) = metrics.as_deref_mut() {
                m.log(log_step, "eval/episode_iou_head", q.iou)?;
            }
        }
        {
            let q = episodic_quality(&ep_fm)?;
            for (pred, gt) in &ep_fm {
                let prob = pred.mapv(|b| if b { 1.0f32 } else { 0.0 });
                accum.fm_pr.push(precision_recall(&prob, gt, 0.5)?);
            }
            accum.fm.extend(ep_fm);
            if let Some(m) = metrics.as_deref_mut() {
                m.log(log_step, "eval/episode_iou_fm", q.iou)?;
            }
        }
        {
            for (pred, gt) in &ep_rgb {
                let prob = pred.mapv(|b| if b { 1.0f32 } else { 0.0 });
                accum.rgb_pr.push(precision_recall(&prob, gt, 0.5)?);
            }
            accum.rgb.extend(ep_rgb);
        }
    }

    // aggregate mask metrics over all eval frames
    let iou_head = if accum.head.is_empty() {
        None
    } else {
        let mut s = 0.0;
        for (p, g) in &accum.head {
            s += frame_iou(p, g)?;
        }
        Some(s / accum.head.len() as f64)
    };
    if let Some(m) = metrics.as_deref_mut() {
        let (ret_mean, ret_sem) = mean_sem(&returns);
        m.log(log_step, "eval/return_mean", ret_mean)?;
        m.log(log_step, "eval/return_sem", ret_sem)?;
        if let Some(iou) = iou_head {
            m.log(log_step, "eval/iou_head", iou)?;
            let (p, r) = mean_pr(&accum.head_pr);
            m.log(log_step, "eval/precision_head", p)?;
            m.log(log_step, "eval/recall_head", r)?;
        }
        let mut s = 0.0;
        for (p, g) in &accum.fm {
            s += frame_iou(p, g)?;
        }
        m.log(log_step, "eval/iou_fm", s / accum.fm.len().max(1) as f64)?;
        let (p, r) = mean_pr(&accum.fm_pr);
        m.log(log_step, "eval/precision_fm", p)?;
        m.log(log_step, "eval/recall_fm", r)?;
        let (p, r) = mean_pr(&accum.rgb_pr);
        m.log(log_step, "eval/precision_rgb", p)?;
        m.log(log_step, "eval/recall_rgb", r)?;
        m.flush()?;
    }
    Ok(EvalSummary {
        returns,
        iou_head,
    })
}

fn mean_pr(prs: &[(f64, f64)]) -> (f64, f64) {
    if prs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = prs.len() as f64;
    (
        prs.iter().map(|(p, _)| p).sum::<f64>() / n,
        prs.iter().map(|(_, r)| r).sum::<f64>() / n,
    )
}

/// Binarize a decoded RGB image by its brightest channel.
pub fn rgb_derived_mask(rgb: &Array3<f32>, threshold: f32) -> Array2<bool> {
    let (h, w, _) = rgb.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let m = rgb[(y, x, 0)].max(rgb[(y, x, 1)]).max(rgb[(y, x, 2)]);
        m >= threshold
    })
}

fn masked_obs(obs: &Array3<f32>, mask: &Array2<bool>) -> Array3<f32> {
    let mut out = obs.clone();
    for ((y, x), &m) in mask.indexed_iter() {
        if !m {
            for c in 0..3 {
                out[(y, x, c)] = 0.0;
            }
        }
    }
    out
}

fn run_single(config: &RunConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut t = Trainer::new(config, opts)?;
    let mut env = Env::new(config.env.clone())?;
    let mut provider = MaskProvider::new(config.masks.clone())?;
    if config.masks.kind == MaskKind::External {
        return Err(SdError::Config(
            "training with kind=external requires registering an adapter; \
             use gen-masks for offline labeling instead"
                .into(),
        ));
    }
    // sd_gt consumes ground-truth masks regardless of the provider setting
    let use_gt_for_training = config.model.variant == Variant::SdGt;

    let mut recorder = if opts.record_episodes {
        Some(EpisodeWriter::create(
            &opts.out_dir.join("episodes.sdep"),
            &EpisodeHeader {
                image_size: config.env.image_size,
                action_dim: config.env.action_dim(),
                env: config.env.clone(),
                masks: config.masks.clone(),
            },
        )?)
    } else {
        None
    };

    let min_frames_for_update = config.batch_size * config.seq_len;
    let mut episode_index: u64 = 0;
    let mut r = env.reset(train_episode_seed(episode_index));
    let mut latent = LatentState::zeros(&config.model);
    let mut prev_action = vec![0.0f32; env.action_dim()];
    let mut frames: Vec<Frame> = Vec::new();
    let mask0 = provider.provide(&r.observation, &r.gt_mask)?;
    frames.push(make_frame(&r, &prev_action, &mask0.mask, use_gt_for_training));
    let mut update_credit = 0.0f64;
    let mut final_eval: Option<EvalSummary> = None;

    let mut held_action: Vec<f32> = Vec::new();
    let mut hold_left = 0usize;
    for env_step in 0..config.total_env_steps {
        let obs_in = t.model_input(&r.observation, &frames.last().unwrap().mask_fm);
        let x = t.wm.observe(
            &mut latent,
            &obs_in,
            &prev_action,
            r.is_first,
            LatentMode::Sample,
            &mut t.rng,
        )?;
        let action = if env_step < WARMUP_UNIFORM_STEPS.min(config.total_env_steps / 4) {
            if hold_left == 0 || r.is_first {
                use rand::Rng;
                held_action = (0..env.action_dim())
                    .map(|_| t.rng.random_range(-1.0..1.0f32))
                    .collect();
                hold_left = t.rng.random_range(WARMUP_HOLD_MIN..=WARMUP_HOLD_MAX);
            }
            hold_left -= 1;
            held_action.clone()
        } else {
            t.agent.act(&x, true, &mut t.rng)
        };
        let step = env.step(&action)?;
        let mask = provider.provide(&step.observation, &step.gt_mask)?;
        frames.push(make_frame(&step, &action, &mask.mask, use_gt_for_training));
        prev_action = action;

        if !step.cont {
            // episode complete
            let episode = Episode {
                frames: std::mem::take(&mut frames),
            };
            let ep_return = episode.total_reward();
            let ep_iou = {
                let pairs: Vec<(Array2<bool>, Array2<bool>)> = episode
                    .frames
                    .iter()
                    .map(|f| (f.mask_fm.clone(), f.mask_gt.clone()))
                    .collect();
                episodic_quality(&pairs)?.iou
            };
            t.metrics
                .log(env_step as u64 + 1, "train/episode_return", ep_return)?;
            t.metrics
                .log(env_step as u64 + 1, "train/episode_iou_fm", ep_iou)?;
            if let Some(rec) = recorder.as_mut() {
                rec.append(&episode)?;
            }
            t.replay.add(episode);
            t.episodes += 1;

            episode_index += 1;
            r = env.reset(train_episode_seed(episode_index));
            latent = LatentState::zeros(&config.model);
            prev_action = vec![0.0f32; env.action_dim()];
            let m0 = provider.provide(&r.observation, &r.gt_mask)?;
            frames.push(make_frame(&r, &prev_action, &m0.mask, use_gt_for_training));
        } else {
            r = step;
        }

        if t.replay.stored_frames() >= min_frames_for_update {
            update_credit += config.train_ratio;
            while update_credit >= 1.0 {
                t.update(env_step + 1)?;
                update_credit -= 1.0;
            }
        }

        if config.eval_every > 0 && (env_step + 1) % config.eval_every == 0 {
            let summary = t.evaluate(env_step + 1)?;
            if env_step + 1 == config.total_env_steps {
                final_eval = Some(summary);
            }
        }
    }

    let final_eval = match final_eval {
        Some(s) => s,
        None => t.evaluate(config.total_env_steps)?,
    };
    t.metrics.flush()?;
    if let Some(rec) = recorder {
        rec.finish()?;
    }
    checkpoint::save(
        &opts.out_dir.join("checkpoint.sdcp"),
        config,
        config.total_env_steps as u64,
        &t.wm,
        &t.agent,
    )?;

    let (mean, _) = mean_sem(&final_eval.returns);
    Ok(RunReport {
        env_steps: config.total_env_steps,
        updates: t.updates,
        episodes: t.episodes,
        final_eval_return: mean,
        final_eval_returns: final_eval.returns,
        final_eval_iou_head: final_eval.iou_head,
        out_dir: opts.out_dir.clone(),
    })
}

fn make_frame(r: &StepResult, action: &[f32], mask_fm: &Array2<bool>, use_gt: bool) -> Frame {
    Frame {
        obs: quantize_obs(&r.observation),
        prev_action: action.to_vec(),
        reward: r.reward,
        cont: r.cont,
        is_first: r.is_first,
        mask_fm: if use_gt {
            r.gt_mask.clone()
        } else {
            mask_fm.clone()
        },
        mask_gt: r.gt_mask.clone(),
    }
}

/// Two-thread mode: an actor thread collects episodes with parameter
/// snapshots while the learner trains and evaluates. Episode hand-off is a
/// channel, so the replay buffer itself stays single-owner; a sampled batch
/// always reflects a prefix of the episodes sent. Not deterministic.
fn run_parallel(config: &RunConfig, opts: &RunOptions) -> Result<RunReport> {
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::{mpsc, Arc, Mutex};

    let mut t = Trainer::new(config, opts)?;
    let stop = Arc::new(AtomicBool::new(false));
    let snapshot: Arc<Mutex<(Vec<ndarray::ArrayD<f32>>, Vec<ndarray::ArrayD<f32>>)>> =
        Arc::new(Mutex::new((
            t.wm.params.iter().map(|(_, v)| v.clone()).collect(),
            t.agent.actor_params.iter().map(|(_, v)| v.clone()).collect(),
        )));
    let (tx, rx) = mpsc::channel::<Episode>();

    let actor_cfg = config.clone();
    let actor_stop = stop.clone();
    let actor_snapshot = snapshot.clone();
    let handle = std::thread::spawn(move || -> Result<usize> {
        let mut env = Env::new(actor_cfg.env.clone())?;
        let mut provider = MaskProvider::new(actor_cfg.masks.clone())?;
        let use_gt = actor_cfg.model.variant == Variant::SdGt;
        let mut wm = WorldModel::<f32>::build(
            &actor_cfg.model,
            actor_cfg.env.image_size,
            actor_cfg.env.action_dim(),
            actor_cfg.seed.wrapping_add(0xA11CE),
        )?;
        let mut agent = Agent::<f32>::build(
            &actor_cfg.agent,
            actor_cfg.model.state_dim(),
            actor_cfg.env.action_dim(),
            actor_cfg.model.det_dim,
            actor_cfg.model.learn_rate,
            actor_cfg.seed.wrapping_add(0xB0B),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(actor_cfg.seed.wrapping_add(0xAC7));
        let mut episode_index = 0u64;
        let mut steps = 0usize;
        while steps < actor_cfg.total_env_steps && !actor_stop.load(Ordering::Relaxed) {
            {
                let snap = actor_snapshot.lock().unwrap();
                assign_values(&mut wm.params, &snap.0);
                assign_values(&mut agent.actor_params, &snap.1);
            }
            let mut r = env.reset(train_episode_seed(episode_index));
            episode_index += 1;
            let mut latent = LatentState::zeros(&actor_cfg.model);
            let mut prev_action = vec![0.0f32; env.action_dim()];
            let m0 = provider.provide(&r.observation, &r.gt_mask)?;
            let mut frames = vec![make_frame(&r, &prev_action, &m0.mask, use_gt)];
            loop {
                let obs_in = if actor_cfg.model.variant.masks_input() {
                    masked_obs(&r.observation, &frames.last().unwrap().mask_fm)
                } else {
                    r.observation.clone()
                };
                let x = wm.observe(
                    &mut latent,
                    &obs_in,
                    &prev_action,
                    r.is_first,
                    LatentMode::Sample,
                    &mut rng,
                )?;
                let action = agent.act(&x, true, &mut rng);
                let step = env.step(&action)?;
                let mask = provider.provide(&step.observation, &step.gt_mask)?;
                frames.push(make_frame(&step, &action, &mask.mask, use_gt));
                prev_action = action;
                steps += 1;
                if !step.cont || steps >= actor_cfg.total_env_steps {
                    break;
                }
                r = step;
            }
            if tx.send(Episode { frames }).is_err() {
                break;
            }
        }
        Ok(steps)
    });

    let min_frames = config.batch_size * config.seq_len;
    let mut frames_received = 0usize;
    let mut update_credit = 0.0f64;
    let mut next_eval = config.eval_every;
    while frames_received < config.total_env_steps {
        match rx.recv_timeout(std::time::Duration::from_millis(200)) {
            Ok(episode) => {
                let steps = episode.len() - 1;
                frames_received += steps;
                let ep_return = episode.total_reward();
                t.metrics
                    .log(frames_received as u64, "train/episode_return", ep_return)?;
                t.replay.add(episode);
                t.episodes += 1;
                if t.replay.stored_frames() >= min_frames {
                    update_credit += steps as f64 * config.train_ratio;
                    while update_credit >= 1.0 {
                        t.update(frames_received)?;
                        update_credit -= 1.0;
                    }
                    let mut snap = snapshot.lock().unwrap();
                    snap.0 = t.wm.params.iter().map(|(_, v)| v.clone()).collect();
                    snap.1 = t.agent.actor_params.iter().map(|(_, v)| v.clone()).collect();
                }
                if config.eval_every > 0 && frames_received >= next_eval {
                    t.evaluate(frames_received)?;
                    next_eval += config.eval_every;
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                if handle.is_finished() {
                    break;
                }
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    stop.store(true, Ordering::Relaxed);
    let actor_steps = handle
        .join()
        .map_err(|_| SdError::Usage("actor thread panicked".into()))??;

    let final_eval = t.evaluate(frames_received)?;
    t.metrics.flush()?;
    checkpoint::save(
        &opts.out_dir.join("checkpoint.sdcp"),
        config,
        frames_received as u64,
        &t.wm,
        &t.agent,
    )?;
    let (mean, _) = mean_sem(&final_eval.returns);
    Ok(RunReport {
        env_steps: actor_steps,
        updates: t.updates,
        episodes: t.episodes,
        final_eval_return: mean,
        final_eval_returns: final_eval.returns,
        final_eval_iou_head: final_eval.iou_head,
        out_dir: opts.out_dir.clone(),
    })
}

fn assign_values(params: &mut crate::math::params::ParamSet<f32>, values: &[ndarray::ArrayD<f32>]) {
    for (i, v) in values.iter().enumerate() {
        params.value_at_mut(i).assign(v);
    }
}

/// Evaluate a checkpoint on held-out distractor seeds (the `eval` command).
pub fn evaluate_checkpoint(
    checkpoint_path: &Path,
    episodes: usize,
    eval_seed: u64,
) -> Result<(Vec<f64>, Option<f64>)> {
    let bundle = checkpoint::load(checkpoint_path)?;
    let summary = evaluate_model(
        &bundle.config,
        &bundle.wm,
        &bundle.agent,
        // distinct counters keep eval streams deterministic per seed
        1_000_000 + eval_seed,
        episodes,
        None,
        bundle.step,
    )?;
    Ok((summary.returns, summary.iou_head))
}
