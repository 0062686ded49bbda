//! Checkpoint format and run-configuration round trips.
//!
//! Checkpoints are a self-describing binary format: magic, version, the
//! fully resolved config text, named f32 tensors in little-endian, and a
//! trailing SHA-256. Loads verify the checksum first, so truncation or
//! corruption fails loudly. Run configs are flat `key=value` text with a
//! canonical serialization, so a run is reconstructable from its log.
//!
//! Run with: cargo run --example checkpoint_and_config

use bootpig::checkpoint;
use bootpig::config::RunConfig;
use bootpig::unet::UNet;
use bootpig::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.set("train.batch", "8")?;
    cfg.set("guidance.pooling", "average")?;
    println!("canonical config text:\n{}", cfg.to_text());

    // unknown keys are rejected rather than silently ignored
    match cfg.set("train.batchsize", "8") {
        Err(e) => println!("unknown key rejected: {e}"),
        Ok(()) => unreachable!(),
    }

    // round-trip a model through the binary format
    let mut ucfg = cfg.unet_config();
    ucfg.image_size = 16;
    ucfg.base_width = 4;
    ucfg.channel_mults = vec![1, 2];
    ucfg.attention_resolutions = vec![8];
    ucfg.norm_groups = 2;
    ucfg.text_width = 8;
    ucfg.time_width = 8;
    let model = UNet::<f32>::init(ucfg, 3)?;
    let bytes = checkpoint::to_bytes(&cfg.to_text(), &model.params)?;
    println!(
        "serialized {} tensors ({} scalars) into {} bytes",
        model.params.len(),
        model.params.num_scalars(),
        bytes.len()
    );

    let (blob, params) = checkpoint::from_bytes(&bytes)?;
    assert_eq!(blob, cfg.to_text());
    for (name, p) in model.params.iter() {
        assert_eq!(p.data.as_slice(), params.get(name)?.data.as_slice());
    }
    println!("round trip is bitwise lossless");

    // corruption is caught by the trailing checksum
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0xFF;
    match checkpoint::from_bytes(&bad) {
        Err(e) => println!("corrupted byte detected: {e}"),
        Ok(_) => unreachable!(),
    }
    println!("parameter digest: {}", checkpoint::params_digest(&model.params)?);
    Ok(())
}
