//! Operator command-line interface.
//!
//! Subcommands: `bootstrap | pretrain | train | generate | eval | gradcheck`.
//! Every run resolves a full `RunConfig` (preset, optional config file,
//! `--set` overrides) and logs the resolved text next to its outputs, so any
//! artifact is reconstructable from its config alone.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::databoot::{self, ppm, CaptionAttrs};
use crate::error::{Error, Result};
use crate::inference::{generate, GuidanceConfig};
use crate::metrics;
use crate::tensor::gradcheck;
use crate::trainer::{self, Corpus, Phase};
use crate::unet::attention::PoolingMode;

#[derive(Parser, Debug)]
#[command(
    name = "bootpig",
    about = "Desk-scale subject-driven diffusion: bootstrap data, train, generate, evaluate",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Configuration preset: desk | paper
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Optional key=value config file applied on top of the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, e.g. --set train.batch=8 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut base = RunConfig::preset(&self.preset)?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("bad config line: '{line}'")))?;
                base.set(k.trim(), v.trim())?;
            }
            base
        } else {
            RunConfig::preset(&self.preset)?
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a procedural triplet corpus (reference, target, mask, caption)
    Bootstrap {
        #[command(flatten)]
        common: ConfigArgs,
        /// Output corpus directory
        #[arg(long)]
        out: PathBuf,
        /// Number of triplets (default: data.num_triplets)
        #[arg(long)]
        n: Option<usize>,
    },
    /// Phase A: train the base denoiser alone (plain self-attention)
    Pretrain {
        #[command(flatten)]
        common: ConfigArgs,
        /// Corpus directory from `bootstrap`
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output directory
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in --out
        #[arg(long)]
        resume: bool,
        /// Override train.steps (0 emits the initialization checkpoint)
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Phase B: train reference conditioning (RSA base layers + reference model)
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Corpus directory from `bootstrap`
        #[arg(long)]
        data: PathBuf,
        /// Pretrain checkpoint to initialize from
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint output directory
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in --out
        #[arg(long)]
        resume: bool,
        /// Override train.steps (0 emits the initialization checkpoint)
        #[arg(long)]
        steps: Option<usize>,
        /// Base-model trainability: all | rsa | none
        #[arg(long)]
        trainable_base: Option<String>,
        /// Reference-model trainability: all | none
        #[arg(long)]
        trainable_ref: Option<String>,
    },
    /// Sample one image from a caption and 1..k reference images
    Generate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Trained checkpoint (phase B, or phase A for text-only conditioning)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference image(s), PPM format (repeatable)
        #[arg(long = "reference", value_name = "PPM", required = true, num_args = 1..)]
        references: Vec<PathBuf>,
        /// Caption as four words: color shape relation background
        #[arg(long)]
        caption: String,
        /// Output image path
        #[arg(long, default_value = "generated.ppm")]
        out: PathBuf,
        /// Multi-reference pooling: softmax | concat | average
        #[arg(long)]
        pooling: Option<String>,
    },
    /// Score a checkpoint on held-out scenes with both fidelity proxies
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        /// Trained checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of held-out scenes (default: eval.scenes)
        #[arg(long)]
        num_scenes: Option<usize>,
        /// References per scene; 0 is the unconditional baseline
        #[arg(long)]
        num_refs: Option<usize>,
        /// Report output path
        #[arg(long, default_value = "eval_report.jsonl")]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite over every differentiable op
    Gradcheck {
        /// Suite seed (controls the random shapes)
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

/// Write the fully resolved config next to a command's outputs.
fn log_config(cfg: &RunConfig, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

fn cmd_bootstrap(cfg: &RunConfig, out: &Path, n: Option<usize>) -> Result<()> {
    let n = n.unwrap_or(cfg.num_triplets);
    let records = databoot::write_corpus(n, out, cfg.seed, cfg.image_size)?;
    log_config(cfg, out, "run.config")?;
    println!(
        "bootstrap: wrote {} triplets at {}x{} to {}",
        records.len(),
        cfg.image_size,
        cfg.image_size,
        out.display()
    );
    Ok(())
}

fn cmd_training(
    cfg: &RunConfig,
    phase: Phase,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
    resume: bool,
) -> Result<()> {
    let corpus = Corpus::load(data)?;
    log_config(cfg, out, &format!("{phase}.config"))?;
    let outcome = trainer::run_training(cfg, phase, &corpus, out, init, resume)?;
    println!(
        "{phase}: {} steps, final loss {:.4}, drop frequency {:.4}, checkpoint {}",
        outcome.stats.len(),
        outcome.stats.last().map(|s| s.loss).unwrap_or(f64::NAN),
        outcome.drop_frequency,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    references: &[PathBuf],
    caption: &str,
    out: &Path,
) -> Result<()> {
    let (base, refm) = trainer::load_model_pair(checkpoint, cfg)?;
    let g = GuidanceConfig::from_run(cfg)?;
    let sched = cfg.schedule()?;
    let refs = references
        .iter()
        .map(|p| ppm::read_image(p))
        .collect::<Result<Vec<_>>>()?;
    let attrs = CaptionAttrs::parse(caption)?;
    let img = generate(&base, &refm, &refs, &attrs.encode(), &g, &sched)?;
    ppm::write_image(out, &img)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        log_config(cfg, dir, "generate.config")?;
    } else {
        log_config(cfg, Path::new("."), "generate.config")?;
    }
    println!("generate: wrote {} ({})", out.display(), attrs.describe());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    num_scenes: usize,
    num_refs: usize,
    out: &Path,
) -> Result<()> {
    let (base, refm) = trainer::load_model_pair(checkpoint, cfg)?;
    let g = GuidanceConfig::from_run(cfg)?;
    let sched = cfg.schedule()?;
    let corpus = metrics::heldout_scenes(num_scenes, cfg.seed, cfg.image_size)?;
    let report = metrics::evaluate(
        &base,
        &refm,
        &corpus,
        num_refs,
        &g,
        &sched,
        &cfg.augmentation_policy(),
    )?;
    report.save(out)?;
    print!("{}", report.table());
    println!("eval: report written to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let started = std::time::Instant::now();
    let reports = gradcheck::run_suite(seed)?;
    let mut failures = 0usize;
    for (name, rep) in &reports {
        let status = if rep.ok() { "pass" } else { "FAIL" };
        println!(
            "{status}  {name:<22} max_rel_err {:.3e} over {} elements",
            rep.max_rel_err, rep.checked
        );
        if !rep.ok() {
            failures += 1;
        }
    }
    println!(
        "gradcheck: {}/{} cases passed in {:.1}s",
        reports.len() - failures,
        reports.len(),
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        return Err(Error::numerics("gradcheck", format!("{failures} cases failed")));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Bootstrap { common, out, n } => {
            let cfg = common.resolve()?;
            cmd_bootstrap(&cfg, &out, n)
        }
        Cmd::Pretrain { common, data, out, resume, steps } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cmd_training(&cfg, Phase::Pretrain, &data, &out, None, resume)
        }
        Cmd::Train {
            common,
            data,
            init,
            out,
            resume,
            steps,
            trainable_base,
            trainable_ref,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(tb) = &trainable_base {
                cfg.set("train.trainable_base", tb)?;
            }
            if let Some(tr) = &trainable_ref {
                cfg.set("train.trainable_ref", tr)?;
            }
            if init.is_none() && !resume {
                return Err(Error::Config(
                    "train needs --init <pretrain checkpoint> (run `pretrain` first) \
                     or --resume"
                        .into(),
                ));
            }
            cmd_training(&cfg, Phase::Bootpig, &data, &out, init.as_deref(), resume)
        }
        Cmd::Generate { common, checkpoint, references, caption, out, pooling } => {
            let mut cfg = common.resolve()?;
            if let Some(p) = &pooling {
                cfg.set("guidance.pooling", p)?;
            }
            // belt and braces: clap already requires at least one reference
            if references.is_empty() {
                return Err(Error::Config("generate needs at least one --reference".into()));
            }
            let _: PoolingMode = cfg.pooling_mode()?;
            cmd_generate(&cfg, &checkpoint, &references, &caption, &out)
        }
        Cmd::Eval { common, checkpoint, num_scenes, num_refs, out } => {
            let cfg = common.resolve()?;
            cmd_eval(
                &cfg,
                &checkpoint,
                num_scenes.unwrap_or(cfg.eval_scenes),
                num_refs.unwrap_or(cfg.eval_refs),
                &out,
            )
        }
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Entry point for the `bootpig` binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

#[cfg(test)]
mod tests;
