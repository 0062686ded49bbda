//! Flat `key=value` run configuration.
//!
//! One text blob covers every knob in the pipeline (schedule, model topology,
//! data, training, guidance, evaluation, seed), so a run is reconstructable
//! from its logged config alone. Unknown keys are rejected rather than
//! ignored; `to_text` emits the fully resolved canonical form, which is also
//! the config blob stored inside checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::databoot::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::scheduler::{make_schedule, NoiseSchedule, SamplerConfig, SamplerKind};
use crate::unet::MiniUNetConfig;

/// Which base-model parameters the bootstrap phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableBase {
    All,
    Rsa,
    None,
}

impl FromStr for TrainableBase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TrainableBase::All),
            "rsa" => Ok(TrainableBase::Rsa),
            "none" => Ok(TrainableBase::None),
            other => Err(Error::Config(format!(
                "trainable_base '{other}' not one of all|rsa|none"
            ))),
        }
    }
}

impl fmt::Display for TrainableBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainableBase::All => "all",
            TrainableBase::Rsa => "rsa",
            TrainableBase::None => "none",
        })
    }
}

/// Which reference-model parameters the bootstrap phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableRef {
    All,
    None,
}

impl FromStr for TrainableRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TrainableRef::All),
            "none" => Ok(TrainableRef::None),
            other => Err(Error::Config(format!(
                "trainable_ref '{other}' not one of all|none"
            ))),
        }
    }
}

impl fmt::Display for TrainableRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainableRef::All => "all",
            TrainableRef::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // noise schedule
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    // model topology
    pub image_size: usize,
    pub in_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub vocab_size: usize,
    pub text_width: usize,
    pub time_width: usize,
    pub norm_groups: usize,
    pub max_caption_len: usize,
    // data
    pub num_triplets: usize,
    pub aug_flip_prob: f64,
    pub aug_scale_lo: f64,
    pub aug_scale_hi: f64,
    pub aug_jitter: f64,
    // training
    pub trainable_base: TrainableBase,
    pub trainable_ref: TrainableRef,
    pub lr_ref: f64,
    pub lr_rsa: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub batch: usize,
    pub steps: usize,
    pub cond_drop_prob: f64,
    pub checkpoint_every: usize,
    pub memory_budget_mb: usize,
    // guidance / sampling
    pub eta_img: f64,
    pub eta_text_img: f64,
    pub sampler: SamplerKind,
    pub sample_steps: usize,
    pub ddim_eta: f64,
    pub pooling: String,
    // evaluation
    pub eval_scenes: usize,
    pub eval_refs: usize,
    // global
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Laptop-scale preset used by the acceptance experiments.
    pub fn desk() -> Self {
        RunConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            image_size: 32,
            in_channels: 3,
            base_width: 32,
            channel_mults: vec![1, 2, 4],
            attention_resolutions: vec![16, 8],
            vocab_size: 32,
            text_width: 64,
            time_width: 64,
            norm_groups: 8,
            max_caption_len: 8,
            num_triplets: 5000,
            aug_flip_prob: 0.5,
            aug_scale_lo: 0.7,
            aug_scale_hi: 1.3,
            aug_jitter: 0.2,
            trainable_base: TrainableBase::Rsa,
            trainable_ref: TrainableRef::All,
            lr_ref: 2e-4,
            lr_rsa: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            batch: 16,
            steps: 3000,
            cond_drop_prob: 0.15,
            checkpoint_every: 500,
            memory_budget_mb: 4096,
            eta_img: 5.0,
            eta_text_img: 7.5,
            sampler: SamplerKind::Ddim,
            sample_steps: 50,
            ddim_eta: 0.0,
            pooling: "softmax".into(),
            eval_scenes: 64,
            eval_refs: 1,
            seed: 7,
        }
    }

    /// Reference-scale hyperparameters (learning rates, batch, step count) on
    /// the same desk topology; recorded for comparison, not for acceptance.
    pub fn paper() -> Self {
        RunConfig {
            lr_ref: 5e-6,
            lr_rsa: 1e-6,
            batch: 64,
            steps: 10_000,
            ..RunConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "paper" => Ok(RunConfig::paper()),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    /// Set one knob from its text form; the key names match `to_text`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
        }
        fn plist(key: &str, value: &str) -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
                })
                .collect()
        }
        match key {
            "schedule.timesteps" => self.timesteps = p(key, value)?,
            "schedule.beta_start" => self.beta_start = p(key, value)?,
            "schedule.beta_end" => self.beta_end = p(key, value)?,
            "model.image_size" => self.image_size = p(key, value)?,
            "model.in_channels" => self.in_channels = p(key, value)?,
            "model.base_width" => self.base_width = p(key, value)?,
            "model.channel_mults" => self.channel_mults = plist(key, value)?,
            "model.attention_resolutions" => self.attention_resolutions = plist(key, value)?,
            "model.vocab_size" => self.vocab_size = p(key, value)?,
            "model.text_width" => self.text_width = p(key, value)?,
            "model.time_width" => self.time_width = p(key, value)?,
            "model.norm_groups" => self.norm_groups = p(key, value)?,
            "model.max_caption_len" => self.max_caption_len = p(key, value)?,
            "data.num_triplets" => self.num_triplets = p(key, value)?,
            "data.aug_flip_prob" => self.aug_flip_prob = p(key, value)?,
            "data.aug_scale_lo" => self.aug_scale_lo = p(key, value)?,
            "data.aug_scale_hi" => self.aug_scale_hi = p(key, value)?,
            "data.aug_jitter" => self.aug_jitter = p(key, value)?,
            "train.trainable_base" => self.trainable_base = p(key, value)?,
            "train.trainable_ref" => self.trainable_ref = p(key, value)?,
            "train.lr_ref" => self.lr_ref = p(key, value)?,
            "train.lr_rsa" => self.lr_rsa = p(key, value)?,
            "train.beta1" => self.beta1 = p(key, value)?,
            "train.beta2" => self.beta2 = p(key, value)?,
            "train.weight_decay" => self.weight_decay = p(key, value)?,
            "train.adam_eps" => self.adam_eps = p(key, value)?,
            "train.grad_clip" => self.grad_clip = p(key, value)?,
            "train.batch" => self.batch = p(key, value)?,
            "train.steps" => self.steps = p(key, value)?,
            "train.cond_drop_prob" => self.cond_drop_prob = p(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "train.memory_budget_mb" => self.memory_budget_mb = p(key, value)?,
            "guidance.eta_img" => self.eta_img = p(key, value)?,
            "guidance.eta_text_img" => self.eta_text_img = p(key, value)?,
            "guidance.sampler" => self.sampler = p(key, value)?,
            "guidance.steps" => self.sample_steps = p(key, value)?,
            "guidance.ddim_eta" => self.ddim_eta = p(key, value)?,
            "guidance.pooling" => self.pooling = value.to_string(),
            "eval.scenes" => self.eval_scenes = p(key, value)?,
            "eval.refs" => self.eval_refs = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Fully resolved canonical text: one `key=value` line per knob, in a
    /// fixed order. `from_text(to_text(c)) == c` for every valid config.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let pairs: Vec<(&str, String)> = vec![
            ("schedule.timesteps", self.timesteps.to_string()),
            ("schedule.beta_start", format!("{:e}", self.beta_start)),
            ("schedule.beta_end", format!("{:e}", self.beta_end)),
            ("model.image_size", self.image_size.to_string()),
            ("model.in_channels", self.in_channels.to_string()),
            ("model.base_width", self.base_width.to_string()),
            ("model.channel_mults", list(&self.channel_mults)),
            ("model.attention_resolutions", list(&self.attention_resolutions)),
            ("model.vocab_size", self.vocab_size.to_string()),
            ("model.text_width", self.text_width.to_string()),
            ("model.time_width", self.time_width.to_string()),
            ("model.norm_groups", self.norm_groups.to_string()),
            ("model.max_caption_len", self.max_caption_len.to_string()),
            ("data.num_triplets", self.num_triplets.to_string()),
            ("data.aug_flip_prob", format!("{:e}", self.aug_flip_prob)),
            ("data.aug_scale_lo", format!("{:e}", self.aug_scale_lo)),
            ("data.aug_scale_hi", format!("{:e}", self.aug_scale_hi)),
            ("data.aug_jitter", format!("{:e}", self.aug_jitter)),
            ("train.trainable_base", self.trainable_base.to_string()),
            ("train.trainable_ref", self.trainable_ref.to_string()),
            ("train.lr_ref", format!("{:e}", self.lr_ref)),
            ("train.lr_rsa", format!("{:e}", self.lr_rsa)),
            ("train.beta1", format!("{:e}", self.beta1)),
            ("train.beta2", format!("{:e}", self.beta2)),
            ("train.weight_decay", format!("{:e}", self.weight_decay)),
            ("train.adam_eps", format!("{:e}", self.adam_eps)),
            ("train.grad_clip", format!("{:e}", self.grad_clip)),
            ("train.batch", self.batch.to_string()),
            ("train.steps", self.steps.to_string()),
            ("train.cond_drop_prob", format!("{:e}", self.cond_drop_prob)),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.memory_budget_mb", self.memory_budget_mb.to_string()),
            ("guidance.eta_img", format!("{:e}", self.eta_img)),
            ("guidance.eta_text_img", format!("{:e}", self.eta_text_img)),
            (
                "guidance.sampler",
                match self.sampler {
                    SamplerKind::Ddpm => "ddpm".into(),
                    SamplerKind::Ddim => "ddim".into(),
                },
            ),
            ("guidance.steps", self.sample_steps.to_string()),
            ("guidance.ddim_eta", format!("{:e}", self.ddim_eta)),
            ("guidance.pooling", self.pooling.clone()),
            ("eval.scenes", self.eval_scenes.to_string()),
            ("eval.refs", self.eval_refs.to_string()),
            ("seed", self.seed.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parse `key=value` lines on top of the desk preset. Blank lines and
    /// `#` comments are allowed; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::desk();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.unet_config().validate()?;
        self.schedule()?;
        self.sampler_config().validate(self.timesteps)?;
        self.augmentation_policy().validate()?;
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config(format!(
                "cond_drop_prob {} outside [0,1]",
                self.cond_drop_prob
            )));
        }
        for (name, v) in [
            ("lr_ref", self.lr_ref),
            ("lr_rsa", self.lr_rsa),
            ("grad_clip", self.grad_clip),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.vocab_size < crate::databoot::vocab::SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than the caption vocabulary ({})",
                self.vocab_size,
                crate::databoot::vocab::SIZE
            )));
        }
        crate::unet::attention::PoolingMode::from_str(&self.pooling)?;
        Ok(())
    }

    pub fn unet_config(&self) -> MiniUNetConfig {
        MiniUNetConfig {
            image_size: self.image_size,
            in_channels: self.in_channels,
            base_width: self.base_width,
            channel_mults: self.channel_mults.clone(),
            attention_resolutions: self.attention_resolutions.clone(),
            vocab_size: self.vocab_size,
            text_width: self.text_width,
            time_width: self.time_width,
            norm_groups: self.norm_groups,
            max_caption_len: self.max_caption_len,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler,
            steps: self.sample_steps,
            eta: self.ddim_eta,
        }
    }

    pub fn augmentation_policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            flip_prob: self.aug_flip_prob,
            scale_lo: self.aug_scale_lo,
            scale_hi: self.aug_scale_hi,
            jitter: self.aug_jitter,
        }
    }

    pub fn pooling_mode(&self) -> Result<crate::unet::attention::PoolingMode> {
        crate::unet::attention::PoolingMode::from_str(&self.pooling)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_lossless() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            let text = cfg.to_text();
            let back = RunConfig::from_text(&text).unwrap();
            assert_eq!(back, cfg);
            // canonical: re-serialization is identical
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn presets_differ_where_documented() {
        let desk = RunConfig::desk();
        let paper = RunConfig::paper();
        assert_eq!(paper.lr_ref, 5e-6);
        assert_eq!(paper.lr_rsa, 1e-6);
        assert_eq!(paper.batch, 64);
        assert_eq!(paper.steps, 10_000);
        assert_eq!(desk.lr_ref, 2e-4);
        assert_eq!(desk.batch, 16);
        assert_eq!(desk.steps, 3000);
        // topology is shared
        assert_eq!(paper.unet_config(), desk.unet_config());
        assert!(RunConfig::preset("desk").is_ok());
        assert!(RunConfig::preset("galaxy").is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_text("train.lr_reff=1e-4\n").is_err());
        assert!(RunConfig::from_text("train.batch=lots\n").is_err());
        assert!(RunConfig::from_text("train.trainable_base=some\n").is_err());
        assert!(RunConfig::from_text("no_equals_sign\n").is_err());
        // comments and blank lines are fine
        let cfg = RunConfig::from_text("# comment\n\nseed=9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn validation_catches_inconsistent_combinations() {
        // image size not divisible by 2^levels
        assert!(RunConfig::from_text("model.image_size=30\n").is_err());
        // sampler steps must evenly divide the timestep count
        assert!(RunConfig::from_text("guidance.steps=7\n").is_err());
        // vocab must cover the caption vocabulary
        assert!(RunConfig::from_text("model.vocab_size=10\n").is_err());
        assert!(RunConfig::from_text("train.cond_drop_prob=1.5\n").is_err());
        assert!(RunConfig::from_text("guidance.pooling=max\n").is_err());
        assert!(RunConfig::from_text("data.aug_scale_lo=3.0\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut cfg = RunConfig::desk();
        cfg.set("train.steps", "200").unwrap();
        cfg.set("guidance.pooling", "average").unwrap();
        std::fs::write(&path, cfg.to_text()).unwrap();
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_file(&dir.path().join("missing.cfg")).is_err());
    }
}
