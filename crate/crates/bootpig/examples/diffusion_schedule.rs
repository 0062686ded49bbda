//! Noise schedule, forward noising, and the DDIM round-trip identity.
//!
//! The forward process is x_t = alpha_t x_0 + sigma_t eps. A deterministic
//! DDIM step with the *exact* eps must invert it: stepping x_t down to t=0
//! with the true noise recovers x_0 (up to the x0 clamp). This is the
//! self-consistency oracle the samplers are tested against.
//!
//! Run with: cargo run --example diffusion_schedule

use bootpig::rng;
use bootpig::scheduler::{add_noise, ddim_step, make_schedule, SamplerConfig, SamplerKind};
use bootpig::tensor::Tensor;
use bootpig::Result;
use rand::Rng;

fn main() -> Result<()> {
    let sched = make_schedule(1000, 1e-4, 0.02)?;
    for t in [1, 250, 500, 750, 999] {
        println!(
            "t={t:>3}: alpha={:.4} sigma={:.4}",
            sched.alpha(t),
            sched.sigma(t)
        );
    }
    println!("at the final step the signal is almost gone: sigma_999 >= 0.99\n");

    // round trip: noise to a random level, then invert with the exact eps
    let mut r = rng::seeded(5);
    let n = 3 * 16 * 16;
    let x0 = Tensor::from_vec(
        rng::randn_vec::<f64>(&mut r, n)
            .into_iter()
            .map(|v: f64| (0.4 * v).clamp(-1.0, 1.0))
            .collect(),
        &[1, 3, 16, 16],
    )?;
    let eps = Tensor::from_vec(rng::randn_vec::<f64>(&mut r, n), &[1, 3, 16, 16])?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let t = r.gen_range(1..1000);
        let xt = add_noise(&x0, &eps, t, &sched)?;
        let back = ddim_step(&xt, &eps, t, 0, &sched, 0.0, None)?;
        let err = x0
            .data()
            .iter()
            .zip(back.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    println!("worst |x0 - invert(add_noise(x0))| over 20 random t: {worst:.3e}");

    // sampler plans: DDIM strides through the schedule, DDPM visits every step
    let ddim = SamplerConfig { kind: SamplerKind::Ddim, steps: 10, eta: 0.0 };
    println!("\n10-step DDIM plan over T=1000: {:?}", ddim.timestep_pairs(1000)?);
    let ddpm = SamplerConfig { kind: SamplerKind::Ddpm, steps: 1000, eta: 1.0 };
    println!("DDPM visits {} pairs", ddpm.timestep_pairs(1000)?.len());
    Ok(())
}
