//! Rough per-step wall-time probe for the desk-scale training configuration.

use bootpig::tensor::{ops, Tensor};
use bootpig::unet::{denoise_with_ctx, AttnCond, ForwardCtx, MiniUNetConfig, UNet};
use bootpig::{rng, Result};

fn main() -> Result<()> {
    let cfg = MiniUNetConfig::desk();
    let model = UNet::<f32>::init(cfg.clone(), 1)?;
    let refm = model.clone_weights();
    println!("params: {}", model.params.num_scalars());

    let b = 16usize;
    let mut r = rng::seeded(2);
    let n = b * 3 * 32 * 32;
    let x = Tensor::from_vec(rng::randn_vec::<f32>(&mut r, n), &[b, 3, 32, 32])?;
    let ts: Vec<usize> = (0..b).map(|i| 1 + i * 60).collect();
    let captions: Vec<Vec<usize>> = (0..b).map(|i| vec![1 + i % 8, 9, 15, 20]).collect();

    // Phase A step: SA forward + backward on all params.
    let t0 = std::time::Instant::now();
    let iters = 3;
    for _ in 0..iters {
        let ctx = ForwardCtx::bind(&model.params, &|_| true)?;
        let out = denoise_with_ctx(&cfg, &ctx, &x, &ts, &captions, &AttnCond::Sa, None)?;
        let loss = ops::mse(&out, &x)?;
        loss.backward()?;
        let _ = ctx.grads();
    }
    println!("phase A step: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);

    // Phase B step: trainable ref forward (feature collection) + RSA base
    // forward + joint backward.
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        let ref_ctx = ForwardCtx::bind(&refm.params, &|_| true)?;
        let feats = bootpig::unet::collect_reference_features_with_ctx(
            &cfg, &ref_ctx, &x, &ts, &captions,
        )?;
        let ctx = ForwardCtx::bind(&model.params, &|nm| nm.contains(".sa."))?;
        let out = denoise_with_ctx(&cfg, &ctx, &x, &ts, &captions, &AttnCond::Rsa(&feats), None)?;
        let loss = ops::mse(&out, &x)?;
        loss.backward()?;
        let _ = ctx.grads();
        let _ = ref_ctx.grads();
    }
    println!("phase B step: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);
    Ok(())
}
