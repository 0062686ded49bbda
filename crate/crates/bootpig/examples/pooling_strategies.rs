//! Multi-reference pooling strategies compared on one generation.
//!
//! With several references per subject, each sampler step computes one RSA
//! output per reference and merges them: `softmax` blends pixelwise by how
//! strongly each reference bends the output (the method's default),
//! `concat` feeds all reference tokens to a single RSA call, and `average`
//! takes the unweighted mean. Duplicating one reference k times must match
//! the single-reference result, since the blend weights sum to one.
//!
//! Run with: cargo run --release --example pooling_strategies

use bootpig::config::RunConfig;
use bootpig::databoot::{self, AugmentationPolicy};
use bootpig::inference::{generate, GuidanceConfig};
use bootpig::unet::attention::PoolingMode;
use bootpig::unet::UNet;
use bootpig::{rng, Result};

fn main() -> Result<()> {
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
        ("guidance.steps", "5"),
    ] {
        cfg.set(k, v).unwrap();
    }
    // an untrained model with a randomized output head is enough to show the
    // pooling mechanics; its outputs depend on the conditioning path
    let mut base = UNet::<f32>::init(cfg.unet_config(), 1)?;
    let n = base.params.get("final.conv.w")?.numel();
    let mut r = rng::seeded(8);
    base.params
        .set_data("final.conv.w", (0..n).map(|_| 0.1 * rng::normal_f64(&mut r) as f32).collect())?;
    let refm = base.clone_weights();
    let sched = cfg.schedule()?;

    // three augmented views of one subject
    let t = databoot::render_triplet(&databoot::sample_scene(17), 16)?;
    let aug = AugmentationPolicy::default();
    let refs: Vec<_> = (0..3)
        .map(|j| databoot::augment_reference(&t.reference, &aug, 100 + j))
        .collect::<Result<_>>()?;
    println!("subject: {}", databoot::CaptionAttrs::decode(&t.caption)?.describe());

    let base_g = GuidanceConfig::from_run(&cfg)?;
    let mut outputs = Vec::new();
    for mode in [PoolingMode::Softmax, PoolingMode::Concat, PoolingMode::Average] {
        let g = GuidanceConfig { pooling: mode, ..base_g.clone() };
        let img = generate(&base, &refm, &refs, &t.caption, &g, &sched)?;
        println!("{mode:?}: first pixels {:?}", &img.data[..6]);
        outputs.push(img);
    }
    assert_ne!(outputs[0], outputs[1], "softmax and concat should differ");
    assert_ne!(outputs[0], outputs[2], "softmax and average should differ");

    // duplicated references reduce to the single-reference output
    let single = generate(&base, &refm, &refs[..1], &t.caption, &base_g, &sched)?;
    let tripled = generate(
        &base,
        &refm,
        &[refs[0].clone(), refs[0].clone(), refs[0].clone()],
        &t.caption,
        &base_g,
        &sched,
    )?;
    let max_diff = single
        .data
        .iter()
        .zip(&tripled.data)
        .map(|(a, b)| (*a as i16 - *b as i16).abs())
        .max()
        .unwrap();
    println!("max pixel diff, one reference vs the same one three times: {max_diff}");
    Ok(())
}
