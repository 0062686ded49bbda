//! Two-phase optimization.
//!
//! Phase A ("pretrain") fits a plain text-to-image denoiser with
//! self-attention, giving the base weights that personalization starts from.
//! Phase B ("bootpig") clones those weights into a Reference UNet, collects
//! per-layer reference features through it, and trains the configured
//! parameter subsets (reference model and/or the base model's RSA layers)
//! against the same noise-prediction objective.
//!
//! Every stochastic choice in a step is drawn, in a fixed order, from a
//! stream derived from (seed, phase, step), so a run can be resumed at any
//! checkpoint and reproduce the unbroken run bitwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{RunConfig, TrainableBase, TrainableRef};
use crate::databoot::{self, Triplet};
use crate::error::{Error, Result};
use crate::rng;
use crate::scheduler::{add_noise_batch, NoiseSchedule};
use crate::tensor::{ops, Tensor};
use crate::unet::{
    collect_reference_features_with_ctx, AttnCond, ForwardCtx, ParamSet, ReferenceFeatureSet, UNet,
};

pub mod optim;

pub use optim::{clip_grad_norm, AdamW};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Bootpig,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Bootpig => "bootpig",
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr_ref: f64,
    pub lr_rsa: f64,
}

/// Name predicate for the base model's trainable subset. The RSA layers are
/// the self-attention projections that run in reference mode.
pub fn base_param_filter(t: TrainableBase) -> impl Fn(&str) -> bool {
    move |name: &str| match t {
        TrainableBase::All => true,
        TrainableBase::Rsa => name.contains(".sa."),
        TrainableBase::None => false,
    }
}

pub fn ref_param_filter(t: TrainableRef) -> impl Fn(&str) -> bool {
    move |_: &str| matches!(t, TrainableRef::All)
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

/// A triplet corpus loaded fully into memory (a 5000-record 32x32 corpus is
/// ~35 MB of pixels).
pub struct Corpus {
    pub dir: PathBuf,
    pub triplets: Vec<Triplet>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let records = databoot::read_manifest(dir)?;
        let triplets = records
            .iter()
            .map(|rec| databoot::read_triplet(dir, rec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { dir: dir.to_path_buf(), triplets })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Memory budget
// ---------------------------------------------------------------------------

/// Deterministic upper-bound estimate of peak training memory.
///
/// The dominant term is the autodiff tape: forward activations are retained
/// wherever gradients must flow, so the estimate grows with the fraction of
/// parameters that train. Parameter, gradient, and optimizer-state buffers
/// are counted exactly.
pub fn estimate_memory_mb(cfg: &RunConfig, phase: Phase) -> f64 {
    let ucfg = cfg.unet_config();
    let p: usize = ucfg
        .param_specs()
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    let (copies, trainable) = match phase {
        Phase::Pretrain => (1usize, p),
        Phase::Bootpig => {
            let base = base_param_filter(cfg.trainable_base);
            let refp = ref_param_filter(cfg.trainable_ref);
            let tb: usize = ucfg
                .param_specs()
                .iter()
                .filter(|(n, _)| base(n))
                .map(|(_, s)| s.iter().product::<usize>())
                .sum();
            let tr: usize = ucfg
                .param_specs()
                .iter()
                .filter(|(n, _)| refp(n))
                .map(|(_, s)| s.iter().product::<usize>())
                .sum();
            (2, tb + tr)
        }
    };
    let total = copies * p;
    let frac = if total == 0 { 0.0 } else { trainable as f64 / total as f64 };
    let static_bytes = 4.0 * total as f64; // resident parameters
    let opt_bytes = 12.0 * trainable as f64; // grad + first/second moments
    // activation footprint per batch element, scaled by how much of the
    // graph must stay live for the backward pass
    let unit = (cfg.batch * cfg.image_size * cfg.image_size * cfg.base_width * 4) as f64;
    let act_bytes = unit * (60.0 + 180.0 * frac);
    (static_bytes + opt_bytes + act_bytes) / 1.0e6
}

pub fn check_memory_budget(cfg: &RunConfig, phase: Phase) -> Result<()> {
    let est = estimate_memory_mb(cfg, phase);
    if est > cfg.memory_budget_mb as f64 {
        return Err(Error::Resource(format!(
            "estimated {est:.0} MB for trainable base={} ref={} at batch {} exceeds the \
             {} MB budget; shrink the batch or freeze more parameters",
            cfg.trainable_base, cfg.trainable_ref, cfg.batch, cfg.memory_budget_mb
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

/// Raw inputs for one optimization step; pixel data in [-1, 1] CHW.
pub struct Batch {
    pub targets: Tensor<f32>,
    /// Noised-reference inputs; required for the bootpig step.
    pub refs: Option<Tensor<f32>>,
    pub captions: Vec<Vec<usize>>,
}

#[derive(Debug)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub ref_drops: usize,
    pub caption_drops: usize,
    /// Names of parameters the optimizer actually updated this step.
    pub updated: Vec<String>,
}

fn sample_timesteps(rng: &mut ChaCha8Rng, b: usize, timesteps: usize) -> Vec<usize> {
    (0..b).map(|_| rng.gen_range(1..=timesteps)).collect()
}

fn randn_like(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f32>> {
    let n = shape.iter().product();
    Tensor::from_vec(rng::randn_vec::<f32>(rng, n), shape)
}

fn finite_loss(loss: f64, step_kind: &str) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::numerics(step_kind, format!("non-finite loss {loss}")));
    }
    Ok(loss)
}

fn owned_grads(ctx: &ForwardCtx<f32>, prefix: &str) -> Vec<(String, Vec<f32>)> {
    ctx.grads()
        .into_iter()
        .map(|(n, g)| (format!("{prefix}{n}"), g))
        .collect()
}

/// One phase-A update: noise targets, predict the noise in SA mode, update
/// every parameter. Captions drop to the empty sequence with probability
/// `cond_drop_prob` so the unconditional CFG branch is trained.
pub fn pretrain_step(
    model: &mut UNet<f32>,
    opt: &mut AdamW,
    sched: &NoiseSchedule,
    cfg: &RunConfig,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let b = batch.captions.len();
    let ts = sample_timesteps(rng, b, sched.timesteps());
    let eps = randn_like(rng, batch.targets.shape())?;
    let x_t = add_noise_batch(&batch.targets, &eps, &ts, sched)?;
    let drops: Vec<bool> = (0..b).map(|_| rng.gen::<f64>() < cfg.cond_drop_prob).collect();
    let captions: Vec<Vec<usize>> = batch
        .captions
        .iter()
        .zip(&drops)
        .map(|(c, &d)| if d { Vec::new() } else { c.clone() })
        .collect();

    let ctx = ForwardCtx::bind(&model.params, &|_| true)?;
    let out = crate::unet::denoise_with_ctx(
        &model.config,
        &ctx,
        &x_t,
        &ts,
        &captions,
        &AttnCond::Sa,
        None,
    )?;
    let loss_t = ops::mse(&out, &eps)?;
    let loss = finite_loss(loss_t.item() as f64, "pretrain_step")?;
    loss_t.backward()?;

    let mut grads = owned_grads(&ctx, "");
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    opt.begin_step();
    let updated: Vec<String> = grads.iter().map(|(n, _)| n.clone()).collect();
    opt.apply(&mut model.params, "", &grads, cfg.lr_ref)?;
    Ok(StepStats {
        loss,
        grad_norm,
        ref_drops: 0,
        caption_drops: drops.iter().filter(|&&d| d).count(),
        updated,
    })
}

/// One phase-B update following the bootstrapped-personalization recipe:
/// noise the references and targets independently, collect per-layer
/// reference features through the Reference UNet (with the full caption,
/// before any dropout), then drop reference features and captions
/// independently per element, predict the target noise in RSA mode, and
/// update only the configured trainable sets (reference parameters at
/// `lr_ref`, base RSA parameters at `lr_rsa`) after a joint gradient clip.
pub fn bootpig_step(
    base: &mut UNet<f32>,
    refm: &mut UNet<f32>,
    opt: &mut AdamW,
    sched: &NoiseSchedule,
    cfg: &RunConfig,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let b = batch.captions.len();
    let refs = batch
        .refs
        .as_ref()
        .ok_or_else(|| Error::Config("bootpig step needs reference images".into()))?;
    let ts = sample_timesteps(rng, b, sched.timesteps());

    // Reference path: independent noise draw, features collected with the
    // target caption before the conditioning drop is decided.
    let eps_ref = randn_like(rng, refs.shape())?;
    let ref_t = add_noise_batch(refs, &eps_ref, &ts, sched)?;
    let base_filter = base_param_filter(cfg.trainable_base);
    let ref_filter = ref_param_filter(cfg.trainable_ref);
    let ref_ctx = ForwardCtx::bind(&refm.params, &ref_filter)?;
    let feats: Vec<ReferenceFeatureSet<f32>> =
        collect_reference_features_with_ctx(&refm.config, &ref_ctx, &ref_t, &ts, &batch.captions)?;

    // Target path with independent per-element dropout of reference features
    // and caption.
    let eps = randn_like(rng, batch.targets.shape())?;
    let x_t = add_noise_batch(&batch.targets, &eps, &ts, sched)?;
    let drop_ref: Vec<bool> = (0..b).map(|_| rng.gen::<f64>() < cfg.cond_drop_prob).collect();
    let drop_cap: Vec<bool> = (0..b).map(|_| rng.gen::<f64>() < cfg.cond_drop_prob).collect();
    let captions: Vec<Vec<usize>> = batch
        .captions
        .iter()
        .zip(&drop_cap)
        .map(|(c, &d)| if d { Vec::new() } else { c.clone() })
        .collect();
    let cond_refs: Vec<Option<ReferenceFeatureSet<f32>>> = feats
        .into_iter()
        .zip(&drop_ref)
        .map(|(f, &d)| if d { None } else { Some(f) })
        .collect();

    let base_ctx = ForwardCtx::bind(&base.params, &base_filter)?;
    let out = crate::unet::denoise_with_ctx(
        &base.config,
        &base_ctx,
        &x_t,
        &ts,
        &captions,
        &AttnCond::Mixed(&cond_refs),
        None,
    )?;
    let loss_t = ops::mse(&out, &eps)?;
    let loss = finite_loss(loss_t.item() as f64, "bootpig_step")?;
    // fully frozen configs produce a tape-free loss; there is nothing to do
    if loss_t.requires_grad() {
        loss_t.backward()?;
    }

    let mut grads = owned_grads(&base_ctx, "base.");
    grads.extend(owned_grads(&ref_ctx, "ref."));
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);

    opt.begin_step();
    let updated: Vec<String> = grads.iter().map(|(n, _)| n.clone()).collect();
    let base_grads: Vec<(String, Vec<f32>)> = grads
        .iter()
        .filter(|(n, _)| n.starts_with("base."))
        .map(|(n, g)| (n.clone(), g.clone()))
        .collect();
    let ref_grads: Vec<(String, Vec<f32>)> = grads
        .into_iter()
        .filter(|(n, _)| n.starts_with("ref."))
        .collect();
    opt.apply(&mut base.params, "base.", &base_grads, cfg.lr_rsa)?;
    opt.apply(&mut refm.params, "ref.", &ref_grads, cfg.lr_ref)?;
    Ok(StepStats {
        loss,
        grad_norm,
        ref_drops: drop_ref.iter().filter(|&&d| d).count(),
        caption_drops: drop_cap.iter().filter(|&&d| d).count(),
        updated,
    })
}

// ---------------------------------------------------------------------------
// Run loop: checkpoints, stats log, resume
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Stats of the steps executed in this invocation.
    pub stats: Vec<TrainStats>,
    /// Fraction of batch elements whose reference features were dropped
    /// (phase B) or caption was dropped (phase A), over this invocation.
    pub drop_frequency: f64,
    /// Union of parameter names updated at least once.
    pub updated_params: Vec<String>,
}

const DOMAIN_PRETRAIN: u64 = 0x7A_01;
const DOMAIN_BOOTPIG: u64 = 0x7A_02;

fn step_domain(phase: Phase) -> u64 {
    match phase {
        Phase::Pretrain => DOMAIN_PRETRAIN,
        Phase::Bootpig => DOMAIN_BOOTPIG,
    }
}

fn checkpoint_name(phase: Phase, step: usize) -> String {
    format!("{phase}_step{step:06}.bpig")
}

fn checkpoint_blob(cfg: &RunConfig, phase: Phase, step: usize) -> String {
    format!("#phase={phase}\n#step={step}\n{}", cfg.to_text())
}

/// Split a stored blob into (phase, step, config text).
fn parse_blob(blob: &str) -> Result<(String, usize, String)> {
    let mut phase = None;
    let mut step = None;
    let mut cfg_text = String::new();
    for line in blob.lines() {
        if let Some(v) = line.strip_prefix("#phase=") {
            phase = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("#step=") {
            step = v.parse::<usize>().ok();
        } else {
            cfg_text.push_str(line);
            cfg_text.push('\n');
        }
    }
    match (phase, step) {
        (Some(p), Some(s)) => Ok((p, s, cfg_text)),
        _ => Err(Error::Config("checkpoint blob lacks phase/step metadata".into())),
    }
}

/// How much of the stored config must match the requested run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConfigCheck {
    /// Every key (resume must continue the exact same run).
    Full,
    /// Only model topology and noise schedule (cross-phase initialization:
    /// training knobs legitimately differ between phases).
    Topology,
}

fn config_diff(stored: &str, current: &str, check: ConfigCheck) -> Vec<String> {
    let parse = |t: &str| -> BTreeMap<String, String> {
        t.lines()
            .filter_map(|l| l.split_once('='))
            .filter(|(k, _)| match check {
                // the step target and checkpoint cadence may grow on resume;
                // per-step streams depend only on (seed, phase, step)
                ConfigCheck::Full => *k != "train.steps" && *k != "train.checkpoint_every",
                ConfigCheck::Topology => {
                    k.starts_with("model.") || k.starts_with("schedule.")
                }
            })
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    };
    let (a, b) = (parse(stored), parse(current));
    let mut diffs = Vec::new();
    for k in a.keys().chain(b.keys()) {
        let (va, vb) = (a.get(k), b.get(k));
        if va != vb && !diffs.iter().any(|d: &String| d.starts_with(k.as_str())) {
            diffs.push(format!(
                "{k}: checkpoint={} current={}",
                va.map(String::as_str).unwrap_or("<absent>"),
                vb.map(String::as_str).unwrap_or("<absent>")
            ));
        }
    }
    diffs
}

fn merge_params(parts: &[(&str, &ParamSet<f32>)]) -> Result<ParamSet<f32>> {
    let mut out = ParamSet::new();
    for (prefix, ps) in parts {
        for (name, p) in ps.iter() {
            out.insert(format!("{prefix}{name}"), p.shape.clone(), p.data.as_ref().clone())?;
        }
    }
    Ok(out)
}

fn split_prefix(ps: &ParamSet<f32>, prefix: &str) -> Result<ParamSet<f32>> {
    let mut out = ParamSet::new();
    for (name, p) in ps.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.insert(rest.to_string(), p.shape.clone(), p.data.as_ref().clone())?;
        }
    }
    Ok(out)
}

fn latest_checkpoint(dir: &Path, phase: Phase) -> Result<Option<(PathBuf, usize)>> {
    let prefix = format!("{phase}_step");
    let mut best: Option<(PathBuf, usize)> = None;
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(step) = name
            .strip_prefix(&prefix)
            .and_then(|s| s.strip_suffix(".bpig"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            if best.as_ref().map(|(_, s)| step > *s).unwrap_or(true) {
                best = Some((entry.path(), step));
            }
        }
    }
    Ok(best)
}

fn write_stats_log(path: &Path, keep: &[TrainStats]) -> Result<()> {
    let mut text = String::new();
    for s in keep {
        text.push_str(
            &serde_json::to_string(s).map_err(|e| Error::Config(format!("stats encode: {e}")))?,
        );
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_stats_log(path: &Path) -> Result<Vec<TrainStats>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("stats line: {e}"))))
        .collect()
}

/// Models + optimizer state for one phase of training.
struct TrainState {
    base: UNet<f32>,
    refm: Option<UNet<f32>>,
    opt: AdamW,
    step: usize,
}

impl TrainState {
    fn save(&self, path: &Path, cfg: &RunConfig, phase: Phase) -> Result<()> {
        let opt_state = self.opt.state_params()?;
        let merged = match &self.refm {
            None => merge_params(&[("model.", &self.base.params), ("adam.", &opt_state)])?,
            Some(r) => merge_params(&[
                ("base.", &self.base.params),
                ("ref.", &r.params),
                ("adam.", &opt_state),
            ])?,
        };
        checkpoint::save(path, &checkpoint_blob(cfg, phase, self.step), &merged)
    }

    fn load(path: &Path, cfg: &RunConfig, phase: Phase, check: ConfigCheck) -> Result<Self> {
        let (blob, merged) = checkpoint::load(path)?;
        let (stored_phase, step, cfg_text) = parse_blob(&blob)?;
        if stored_phase != phase.to_string() {
            return Err(Error::Config(format!(
                "{}: checkpoint is from phase '{stored_phase}', expected '{phase}'",
                path.display()
            )));
        }
        let diffs = config_diff(&cfg_text, &cfg.to_text(), check);
        if !diffs.is_empty() {
            return Err(Error::Config(format!(
                "{}: checkpoint config differs from the requested run:\n  {}",
                path.display(),
                diffs.join("\n  ")
            )));
        }
        let ucfg = cfg.unet_config();
        let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        opt.load_state(&split_prefix(&merged, "adam.")?)?;
        let state = match phase {
            Phase::Pretrain => TrainState {
                base: UNet { config: ucfg, params: split_prefix(&merged, "model.")? },
                refm: None,
                opt,
                step,
            },
            Phase::Bootpig => TrainState {
                base: UNet { config: ucfg.clone(), params: split_prefix(&merged, "base.")? },
                refm: Some(UNet { config: ucfg, params: split_prefix(&merged, "ref.")? }),
                opt,
                step,
            },
        };
        Ok(state)
    }
}

/// Build one training batch: sample records, convert pixels, and (phase B)
/// augment each reference deterministically from the step stream.
fn assemble_batch(
    corpus: &Corpus,
    cfg: &RunConfig,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let s = cfg.image_size;
    let b = cfg.batch;
    let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..corpus.len())).collect();
    let mut targets = Vec::with_capacity(b * cfg.in_channels * s * s);
    let mut refs = Vec::with_capacity(b * cfg.in_channels * s * s);
    let mut captions = Vec::with_capacity(b);
    let policy = cfg.augmentation_policy();
    for &i in &idx {
        let t = &corpus.triplets[i];
        targets.extend(t.target.to_chw_f32());
        captions.push(t.caption.clone());
        if phase == Phase::Bootpig {
            let aug_seed: u64 = rng.gen();
            let aug = databoot::augment_reference(&t.reference, &policy, aug_seed)?;
            refs.extend(aug.to_chw_f32());
        }
    }
    let shape = [b, cfg.in_channels, s, s];
    Ok(Batch {
        targets: Tensor::from_vec(targets, &shape)?,
        refs: if phase == Phase::Bootpig {
            Some(Tensor::from_vec(refs, &shape)?)
        } else {
            None
        },
        captions,
    })
}

/// Run (or resume) one training phase to `cfg.steps`, checkpointing every
/// `cfg.checkpoint_every` steps and appending to `stats.jsonl`.
///
/// Phase B requires `init_from` (a pretrain checkpoint) unless resuming; the
/// Reference UNet starts as a clone of the base weights.
pub fn run_training(
    cfg: &RunConfig,
    phase: Phase,
    corpus: &Corpus,
    ckpt_dir: &Path,
    init_from: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_memory_budget(cfg, phase)?;
    std::fs::create_dir_all(ckpt_dir).map_err(|e| Error::io(ckpt_dir, e))?;
    if corpus.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("cannot train on an empty corpus".into()));
    }

    let mut state = if resume {
        let (path, _) = latest_checkpoint(ckpt_dir, phase)?.ok_or_else(|| {
            Error::Config(format!(
                "--resume: no {phase} checkpoint found in {}",
                ckpt_dir.display()
            ))
        })?;
        TrainState::load(&path, cfg, phase, ConfigCheck::Full)?
    } else {
        let opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        match phase {
            Phase::Pretrain => TrainState {
                base: UNet::init(cfg.unet_config(), cfg.seed)?,
                refm: None,
                opt,
                step: 0,
            },
            Phase::Bootpig => {
                let path = init_from.ok_or_else(|| {
                    Error::Config(
                        "bootpig training starts from a pretrain checkpoint; run the \
                         pretrain phase first and pass its checkpoint"
                            .into(),
                    )
                })?;
                let loaded = TrainState::load(path, cfg, Phase::Pretrain, ConfigCheck::Topology)?;
                let base = loaded.base;
                let refm = base.clone_weights();
                TrainState { base, refm: Some(refm), opt, step: 0 }
            }
        }
    };

    let stats_path = ckpt_dir.join(format!("{phase}_stats.jsonl"));
    let mut all_stats: Vec<TrainStats> = read_stats_log(&stats_path)?
        .into_iter()
        .filter(|s| s.step <= state.step)
        .collect();

    if state.step == 0 {
        state.save(&ckpt_dir.join(checkpoint_name(phase, 0)), cfg, phase)?;
    }

    let sched = cfg.schedule()?;
    let mut run_stats = Vec::new();
    let mut drop_events = 0usize;
    let mut drop_draws = 0usize;
    let mut updated: std::collections::BTreeSet<String> = Default::default();

    while state.step < cfg.steps {
        let step = state.step;
        let mut step_rng = rng::derived(cfg.seed, step_domain(phase), step as u64);
        let batch = assemble_batch(corpus, cfg, phase, &mut step_rng)?;
        let ss = match phase {
            Phase::Pretrain => pretrain_step(
                &mut state.base,
                &mut state.opt,
                &sched,
                cfg,
                &batch,
                &mut step_rng,
            )?,
            Phase::Bootpig => bootpig_step(
                &mut state.base,
                state.refm.as_mut().expect("bootpig state has a reference model"),
                &mut state.opt,
                &sched,
                cfg,
                &batch,
                &mut step_rng,
            )?,
        };
        state.step += 1;
        drop_events += match phase {
            Phase::Pretrain => ss.caption_drops,
            Phase::Bootpig => ss.ref_drops,
        };
        drop_draws += cfg.batch;
        updated.extend(ss.updated.iter().cloned());
        let line = TrainStats {
            step: state.step,
            loss: ss.loss,
            grad_norm: ss.grad_norm,
            lr_ref: cfg.lr_ref,
            lr_rsa: cfg.lr_rsa,
        };
        all_stats.push(line.clone());
        run_stats.push(line);
        write_stats_log(&stats_path, &all_stats)?;
        if state.step % cfg.checkpoint_every.max(1) == 0 || state.step == cfg.steps {
            state.save(&ckpt_dir.join(checkpoint_name(phase, state.step)), cfg, phase)?;
        }
    }

    let final_checkpoint = ckpt_dir.join(checkpoint_name(phase, state.step));
    if !final_checkpoint.exists() {
        state.save(&final_checkpoint, cfg, phase)?;
    }
    Ok(TrainOutcome {
        final_checkpoint,
        stats: run_stats,
        drop_frequency: if drop_draws == 0 {
            0.0
        } else {
            drop_events as f64 / drop_draws as f64
        },
        updated_params: updated.into_iter().collect(),
    })
}

/// Load the (base, reference) model pair from a bootpig checkpoint, or a
/// (base, base-clone) pair from a pretrain checkpoint.
pub fn load_model_pair(path: &Path, cfg: &RunConfig) -> Result<(UNet<f32>, UNet<f32>)> {
    let (blob, merged) = checkpoint::load(path)?;
    let (stored_phase, _, _) = parse_blob(&blob)?;
    let ucfg = cfg.unet_config();
    match stored_phase.as_str() {
        "pretrain" => {
            let base = UNet { config: ucfg, params: split_prefix(&merged, "model.")? };
            let refm = base.clone_weights();
            Ok((base, refm))
        }
        "bootpig" => Ok((
            UNet { config: ucfg.clone(), params: split_prefix(&merged, "base.")? },
            UNet { config: ucfg, params: split_prefix(&merged, "ref.")? },
        )),
        other => Err(Error::Config(format!(
            "{}: unknown checkpoint phase '{other}'",
            path.display()
        ))),
    }
}
