//! Subject-driven generation: per-step reference feature extraction,
//! two-scale classifier-free guidance, and multi-reference pooling.
//!
//! Guidance combines three noise estimates from the base model:
//! unconditional (plain SA, empty caption), image-conditioned (RSA, empty
//! caption), and image+text-conditioned (RSA with the caption):
//!
//! ```text
//! eps = eps_uncond + eta_img * (eps_img - eps_uncond)
//!                  + eta_text_img * (eps_img_text - eps_img)
//! ```
//!
//! evaluated in the algebraically equivalent coefficient form so that the
//! degenerate scales (0,0) and (1,1) return their respective branches
//! exactly. References are re-noised at every sampler step from the
//! generation seed stream, so runs are bitwise reproducible.

use crate::config::RunConfig;
use crate::databoot::ppm::ImageU8;
use crate::error::{Error, Result};
use crate::rng;
use crate::scheduler::{add_noise, ddim_step, NoiseSchedule, SamplerConfig};
use crate::tensor::{ops, Tensor};
use crate::unet::attention::PoolingMode;
use crate::unet::{AttnCond, ReferenceFeatureSet, UNet};

#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    pub eta_img: f64,
    pub eta_text_img: f64,
    pub sampler: SamplerConfig,
    pub pooling: PoolingMode,
    pub seed: u64,
}

impl GuidanceConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let g = GuidanceConfig {
            eta_img: cfg.eta_img,
            eta_text_img: cfg.eta_text_img,
            sampler: cfg.sampler_config(),
            pooling: cfg.pooling_mode()?,
            seed: cfg.seed,
        };
        g.validate(cfg.timesteps)?;
        Ok(g)
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.eta_img < 0.0 || self.eta_text_img < 0.0 {
            return Err(Error::Config(format!(
                "guidance scales ({}, {}) must be >= 0",
                self.eta_img, self.eta_text_img
            )));
        }
        self.sampler.validate(timesteps)
    }
}

/// Combine the three noise estimates with coefficients
/// (1 - eta_img, eta_img - eta_text_img, eta_text_img).
pub fn combine_guidance(
    eps_uncond: &Tensor<f32>,
    eps_img: &Tensor<f32>,
    eps_img_text: &Tensor<f32>,
    eta_img: f64,
    eta_text_img: f64,
) -> Result<Tensor<f32>> {
    let cu = (1.0 - eta_img) as f32;
    let ci = (eta_img - eta_text_img) as f32;
    let ct = eta_text_img as f32;
    let a = ops::scale(eps_uncond, cu)?;
    let b = ops::scale(eps_img, ci)?;
    let c = ops::scale(eps_img_text, ct)?;
    ops::add(&ops::add(&a, &b)?, &c)
}

/// One guided noise estimate at level `t` for a single image (batch of 1).
/// With no references, both conditioned branches fall back to plain SA, which
/// reduces the cascade to standard text CFG.
pub fn guided_noise(
    base: &UNet<f32>,
    x_t: &Tensor<f32>,
    t: usize,
    caption: &[usize],
    refs: &[ReferenceFeatureSet<f32>],
    g: &GuidanceConfig,
) -> Result<Tensor<f32>> {
    let ts = [t];
    let empty: Vec<Vec<usize>> = vec![Vec::new()];
    let with_text: Vec<Vec<usize>> = vec![caption.to_vec()];

    let eps_uncond = base.denoise(x_t, &ts, &empty, &AttnCond::Sa)?;
    let (eps_img, eps_img_text) = match refs.len() {
        0 => (
            base.denoise(x_t, &ts, &empty, &AttnCond::Sa)?,
            base.denoise(x_t, &ts, &with_text, &AttnCond::Sa)?,
        ),
        1 => {
            let one = [refs[0].clone()];
            (
                base.denoise(x_t, &ts, &empty, &AttnCond::Rsa(&one))?,
                base.denoise(x_t, &ts, &with_text, &AttnCond::Rsa(&one))?,
            )
        }
        _ => {
            let groups = vec![refs.to_vec()];
            let cond = AttnCond::MultiRef { refs: &groups, pooling: g.pooling };
            (
                base.denoise(x_t, &ts, &empty, &cond)?,
                base.denoise(x_t, &ts, &with_text, &cond)?,
            )
        }
    };
    combine_guidance(&eps_uncond, &eps_img, &eps_img_text, g.eta_img, g.eta_text_img)
}

const DOMAIN_GEN_INIT: u64 = 0x6E_10;
const DOMAIN_GEN_STEP: u64 = 0x6E_57;

fn image_tensor(img: &ImageU8, cfg_channels: usize, size: usize) -> Result<Tensor<f32>> {
    if img.width != size || img.height != size || img.channels != cfg_channels {
        return Err(Error::Config(format!(
            "reference image is {}x{}x{}, model expects {size}x{size}x{cfg_channels}",
            img.width, img.height, img.channels
        )));
    }
    Tensor::from_vec(img.to_chw_f32(), &[1, cfg_channels, size, size])
}

/// Full reverse-diffusion generation for one caption and 0..k references.
///
/// At every sampler step all references are re-noised to the current level
/// with one shared draw from the per-step stream, features are collected
/// through the Reference UNet, and the guided estimate drives one sampler
/// step. Deterministic given `g.seed`.
pub fn generate(
    base: &UNet<f32>,
    ref_unet: &UNet<f32>,
    references: &[ImageU8],
    caption: &[usize],
    g: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<ImageU8> {
    let cfg = &base.config;
    g.validate(sched.timesteps())?;
    let s = cfg.image_size;
    let c = cfg.in_channels;
    let k = references.len();
    let ref_tensors: Vec<Tensor<f32>> = references
        .iter()
        .map(|r| image_tensor(r, c, s))
        .collect::<Result<_>>()?;

    let mut init_rng = rng::derived(g.seed, DOMAIN_GEN_INIT, 0);
    let n = c * s * s;
    let mut x = Tensor::from_vec(rng::randn_vec::<f32>(&mut init_rng, n), &[1, c, s, s])?;

    let eta = g.sampler.effective_eta();
    for (i, (t, t_prev)) in g.sampler.timestep_pairs(sched.timesteps())?.iter().enumerate() {
        let mut step_rng = rng::derived(g.seed, DOMAIN_GEN_STEP, i as u64);
        // One shared noise draw re-noises every reference to level t:
        // duplicated references therefore yield identical features, making
        // the pooled output agree with the single-reference case.
        let eps = Tensor::from_vec(rng::randn_vec::<f32>(&mut step_rng, n), &[1, c, s, s])?;
        let mut refs: Vec<ReferenceFeatureSet<f32>> = Vec::with_capacity(k);
        for rt in &ref_tensors {
            let noised = add_noise(rt, &eps, *t, sched)?;
            let mut sets =
                ref_unet.collect_reference_features(&noised, &[*t], &[caption.to_vec()])?;
            refs.push(sets.remove(0));
        }
        let eps_hat = guided_noise(base, &x, *t, caption, &refs, g)?;
        let step_noise = if eta > 0.0 && *t_prev > 0 {
            Some(Tensor::from_vec(
                rng::randn_vec::<f32>(&mut step_rng, n),
                &[1, c, s, s],
            )?)
        } else {
            None
        };
        x = ddim_step(&x, &eps_hat, *t, *t_prev, sched, eta, step_noise.as_ref())?;
    }
    Ok(ImageU8::from_chw_f32(x.data(), c, s, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::databoot;
    use crate::scheduler::SamplerKind;
    use crate::unet::MiniUNetConfig;

    fn scalar(v: f32) -> Tensor<f32> {
        Tensor::from_vec(vec![v], &[1]).unwrap()
    }

    #[test]
    fn guidance_scalar_oracle() {
        // eps_uncond=0, eps_img=1, eps_img_text=2, scales (5, 7.5) -> 12.5
        let out =
            combine_guidance(&scalar(0.0), &scalar(1.0), &scalar(2.0), 5.0, 7.5).unwrap();
        assert_eq!(out.data()[0], 12.5);
    }

    #[test]
    fn guidance_degenerate_scales_are_exact() {
        let u = scalar(-0.3712);
        let i = scalar(0.9871);
        let t = scalar(0.5551);
        // (1,1) -> eps_img_text bitwise; (0,0) -> eps_uncond bitwise
        let out = combine_guidance(&u, &i, &t, 1.0, 1.0).unwrap();
        assert_eq!(out.data()[0].to_bits(), t.data()[0].to_bits());
        let out = combine_guidance(&u, &i, &t, 0.0, 0.0).unwrap();
        assert_eq!(out.data()[0].to_bits(), u.data()[0].to_bits());
    }

    #[test]
    fn guidance_is_affine_in_each_estimate() {
        // probe with basis perturbations: coefficients (1-a, a-b, b)
        let (a, b) = (5.0, 7.5);
        let base = combine_guidance(&scalar(0.0), &scalar(0.0), &scalar(0.0), a, b).unwrap();
        assert_eq!(base.data()[0], 0.0);
        let cu = combine_guidance(&scalar(1.0), &scalar(0.0), &scalar(0.0), a, b).unwrap();
        let ci = combine_guidance(&scalar(0.0), &scalar(1.0), &scalar(0.0), a, b).unwrap();
        let ct = combine_guidance(&scalar(0.0), &scalar(0.0), &scalar(1.0), a, b).unwrap();
        assert_eq!(cu.data()[0] as f64, 1.0 - a);
        assert_eq!(ci.data()[0] as f64, a - b);
        assert_eq!(ct.data()[0] as f64, b);
    }

    fn tiny_cfg() -> MiniUNetConfig {
        MiniUNetConfig {
            image_size: 16,
            in_channels: 3,
            base_width: 4,
            channel_mults: vec![1, 2],
            attention_resolutions: vec![8],
            vocab_size: 23,
            text_width: 8,
            time_width: 8,
            norm_groups: 2,
            max_caption_len: 6,
        }
    }

    fn tiny_guidance(steps: usize) -> GuidanceConfig {
        GuidanceConfig {
            eta_img: 5.0,
            eta_text_img: 7.5,
            sampler: SamplerConfig { kind: SamplerKind::Ddim, steps, eta: 0.0 },
            pooling: PoolingMode::Softmax,
            seed: 11,
        }
    }

    /// A model whose output actually depends on its conditioning.
    fn tiny_model(seed: u64) -> UNet<f32> {
        let mut m = UNet::<f32>::init(tiny_cfg(), seed).unwrap();
        let mut r = rng::derived(seed, 0xF1, 0);
        let n = m.params.get("final.conv.w").unwrap().numel();
        let w: Vec<f32> = (0..n).map(|_| 0.1 * rng::normal_f64(&mut r) as f32).collect();
        m.params.set_data("final.conv.w", w).unwrap();
        m
    }

    fn tiny_refs(n: usize) -> Vec<ImageU8> {
        (0..n)
            .map(|i| {
                let spec = databoot::sample_scene(databoot::record_seed(4, i as u64));
                databoot::render_triplet(&spec, 16).unwrap().reference
            })
            .collect()
    }

    #[test]
    fn guided_noise_one_one_equals_the_conditioned_branch() {
        let model = tiny_model(2);
        let refm = model.clone_weights();
        let sched = crate::scheduler::make_schedule(100, 1e-4, 0.02).unwrap();
        let mut r = rng::seeded(3);
        let x = Tensor::from_vec(rng::randn_vec::<f32>(&mut r, 3 * 256), &[1, 3, 16, 16])
            .unwrap();
        let refs_img = tiny_refs(1);
        let rt = image_tensor(&refs_img[0], 3, 16).unwrap();
        let noised = add_noise(&rt, &x, 50, &sched).unwrap();
        let caption = vec![1, 9, 15, 20];
        let refs = refm
            .collect_reference_features(&noised, &[50], &[caption.clone()])
            .unwrap();
        let mut g = tiny_guidance(10);
        g.eta_img = 1.0;
        g.eta_text_img = 1.0;
        let out = guided_noise(&model, &x, 50, &caption, &refs, &g).unwrap();
        let one = [refs[0].clone()];
        let direct = model
            .denoise(&x, &[50], &[caption], &AttnCond::Rsa(&one))
            .unwrap();
        for (a, b) in out.data().iter().zip(direct.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn generate_is_bitwise_deterministic() {
        let model = tiny_model(5);
        let refm = model.clone_weights();
        let sched = crate::scheduler::make_schedule(100, 1e-4, 0.02).unwrap();
        let refs = tiny_refs(1);
        let caption = vec![2, 10, 16, 21];
        let g = tiny_guidance(5);
        let a = generate(&model, &refm, &refs, &caption, &g, &sched).unwrap();
        let b = generate(&model, &refm, &refs, &caption, &g, &sched).unwrap();
        assert_eq!(a, b);
        let mut g2 = g.clone();
        g2.seed = 12;
        let c = generate(&model, &refm, &refs, &caption, &g2, &sched).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn duplicated_references_match_the_single_reference_output() {
        let model = tiny_model(6);
        let refm = model.clone_weights();
        let sched = crate::scheduler::make_schedule(100, 1e-4, 0.02).unwrap();
        let refs = tiny_refs(1);
        let caption = vec![3, 11, 17, 22];
        let g = tiny_guidance(5);
        let single = generate(&model, &refm, &refs, &caption, &g, &sched).unwrap();
        let tripled = vec![refs[0].clone(), refs[0].clone(), refs[0].clone()];
        let multi = generate(&model, &refm, &tripled, &caption, &g, &sched).unwrap();
        // identical features pool to the single-reference output; only
        // float summation order can move a pixel, by at most one level
        for (a, b) in single.data.iter().zip(&multi.data) {
            assert!(
                (*a as i16 - *b as i16).abs() <= 1,
                "pixel {a} vs {b} diverged beyond pooling symmetry"
            );
        }
    }

    #[test]
    fn no_references_with_zero_scales_is_unconditional_sampling() {
        let model = tiny_model(7);
        let refm = model.clone_weights();
        let sched = crate::scheduler::make_schedule(100, 1e-4, 0.02).unwrap();
        let caption = vec![4, 12, 18, 20];
        let mut g = tiny_guidance(5);
        g.eta_img = 0.0;
        g.eta_text_img = 0.0;
        let out = generate(&model, &refm, &[], &caption, &g, &sched).unwrap();

        // reference loop: plain unconditional reverse diffusion, same streams
        let n = 3 * 256;
        let mut init = rng::derived(g.seed, DOMAIN_GEN_INIT, 0);
        let mut x = Tensor::from_vec(rng::randn_vec::<f32>(&mut init, n), &[1, 3, 16, 16])
            .unwrap();
        for (t, t_prev) in g.sampler.timestep_pairs(100).unwrap() {
            let eps = model.denoise(&x, &[t], &[vec![]], &AttnCond::Sa).unwrap();
            x = ddim_step(&x, &eps, t, t_prev, &sched, 0.0, None).unwrap();
        }
        let expect = ImageU8::from_chw_f32(x.data(), 3, 16, 16);
        assert_eq!(out, expect);
    }

    #[test]
    fn pooling_modes_differ_on_distinct_references() {
        let model = tiny_model(8);
        let refm = model.clone_weights();
        let sched = crate::scheduler::make_schedule(100, 1e-4, 0.02).unwrap();
        let refs = tiny_refs(3);
        let caption = vec![5, 13, 19, 21];
        let mut g = tiny_guidance(5);
        let softmax = generate(&model, &refm, &refs, &caption, &g, &sched).unwrap();
        g.pooling = PoolingMode::Average;
        let average = generate(&model, &refm, &refs, &caption, &g, &sched).unwrap();
        g.pooling = PoolingMode::Concat;
        let concat = generate(&model, &refm, &refs, &caption, &g, &sched).unwrap();
        assert_ne!(softmax, average);
        assert_ne!(softmax, concat);
    }

    #[test]
    fn negative_scales_and_bad_shapes_are_rejected() {
        let model = tiny_model(9);
        let refm = model.clone_weights();
        let sched = crate::scheduler::make_schedule(100, 1e-4, 0.02).unwrap();
        let mut g = tiny_guidance(5);
        g.eta_img = -1.0;
        assert!(generate(&model, &refm, &[], &[1, 9, 15, 20], &g, &sched).is_err());
        let g = tiny_guidance(5);
        let wrong = ImageU8::new(8, 8, 3, 255); // wrong resolution
        assert!(generate(&model, &refm, &[wrong], &[1, 9, 15, 20], &g, &sched).is_err());
    }

    #[test]
    fn guidance_config_reads_the_run_config() {
        let cfg = RunConfig::desk();
        let g = GuidanceConfig::from_run(&cfg).unwrap();
        assert_eq!(g.eta_img, 5.0);
        assert_eq!(g.eta_text_img, 7.5);
        assert_eq!(g.sampler.steps, 50);
        let mut bad = cfg;
        bad.eta_img = -2.0;
        assert!(GuidanceConfig::from_run(&bad).is_err());
    }

    #[test]
    fn generation_is_invariant_to_reference_ordering() {
        // references share one noise draw per step and the pooling softmax
        // is over an unordered set, so only float summation order remains
        let model = tiny_model(10);
        let refm = model.clone_weights();
        let sched = crate::scheduler::make_schedule(100, 1e-4, 0.02).unwrap();
        let refs = tiny_refs(2);
        let caption = vec![6, 14, 15, 22];
        let g = tiny_guidance(5);
        let ab = generate(&model, &refm, &refs, &caption, &g, &sched).unwrap();
        let swapped = vec![refs[1].clone(), refs[0].clone()];
        let ba = generate(&model, &refm, &swapped, &caption, &g, &sched).unwrap();
        let max_diff = ab
            .data
            .iter()
            .zip(&ba.data)
            .map(|(a, b)| (*a as i16 - *b as i16).abs())
            .max()
            .unwrap();
        assert!(max_diff <= 1, "order sensitivity too large: {max_diff}");
    }
}
