//! The two-phase training pipeline at miniature scale.
//!
//! Phase A ("pretrain") teaches a plain text-conditioned denoiser. Phase B
//! clones it into a frozen-topology reference extractor and trains only the
//! base model's self-attention projections (now running as RSA) plus the
//! reference model, with per-element conditioning dropout. The footprint of
//! updated parameters is logged, which is how the trainability ablations are
//! compared.
//!
//! Run with: cargo run --release --example train_two_phase

use bootpig::config::RunConfig;
use bootpig::databoot;
use bootpig::trainer::{run_training, Corpus, Phase};
use bootpig::Result;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    for (k, v) in [
        ("model.image_size", "16"),
        ("model.base_width", "4"),
        ("model.channel_mults", "1,2"),
        ("model.attention_resolutions", "8"),
        ("model.text_width", "8"),
        ("model.time_width", "8"),
        ("model.norm_groups", "2"),
        ("model.max_caption_len", "6"),
        ("data.num_triplets", "32"),
        ("train.batch", "4"),
        ("train.steps", "40"),
        ("train.checkpoint_every", "20"),
        ("train.lr_ref", "1e-3"),
        ("train.lr_rsa", "5e-4"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn main() -> Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = tiny_config();

    let data = dir.path().join("corpus");
    databoot::write_corpus(cfg.num_triplets, &data, cfg.seed, cfg.image_size)?;
    let corpus = Corpus::load(&data)?;
    println!(
        "corpus: {} triplets at {}x{} px",
        corpus.len(),
        cfg.image_size,
        cfg.image_size
    );

    let ckpts = dir.path().join("ckpts");
    let a = run_training(&cfg, Phase::Pretrain, &corpus, &ckpts, None, false)?;
    println!(
        "phase A: loss {:.4} -> {:.4} over {} steps",
        a.stats.first().unwrap().loss,
        a.stats.last().unwrap().loss,
        a.stats.len()
    );

    let b = run_training(
        &cfg,
        Phase::Bootpig,
        &corpus,
        &ckpts,
        Some(&a.final_checkpoint),
        false,
    )?;
    println!(
        "phase B: loss {:.4} -> {:.4}, conditioning-drop frequency {:.3}",
        b.stats.first().unwrap().loss,
        b.stats.last().unwrap().loss,
        b.drop_frequency
    );

    // the update footprint: only RSA projections of the base model train in
    // phase B (plus the whole reference model)
    let base_updates: Vec<&String> = b
        .updated_params
        .iter()
        .filter(|n| n.starts_with("base."))
        .collect();
    let ref_updates = b.updated_params.iter().filter(|n| n.starts_with("ref.")).count();
    println!("\nphase B updated {} reference-model tensors", ref_updates);
    println!("base-model tensors updated (all RSA projections):");
    for name in base_updates.iter().take(8) {
        println!("  {name}");
    }
    if base_updates.len() > 8 {
        println!("  ... {} total", base_updates.len());
    }
    println!("\nfinal checkpoint: {}", b.final_checkpoint.display());
    Ok(())
}
