//! Reference self-attention (RSA) and multi-reference pooling, in isolation.
//!
//! RSA reuses a self-attention layer's weights unchanged: queries come from
//! the denoiser's own features, keys and values from the concatenation of
//! those features with reference features. Feeding the layer's own features
//! as the "reference" must therefore reproduce plain self-attention, and an
//! empty reference degenerates to it exactly. Multiple references are merged
//! pixelwise by a softmax over how strongly each one bends the output.
//!
//! Run with: cargo run --example reference_attention

use bootpig::rng;
use bootpig::tensor::Tensor;
use bootpig::unet::attention::{
    multiref_rsa, reference_self_attention, self_attention, softmax_pool,
    AttentionLayerParams, FeatureMap, PoolingMode,
};
use bootpig::Result;

fn random_map(seed: u64, h: usize, w: usize, d: usize) -> Result<FeatureMap<f64>> {
    let mut r = rng::seeded(seed);
    FeatureMap::new(
        Tensor::from_vec(rng::randn_vec(&mut r, h * w * d), &[h * w, d])?,
        h,
        w,
    )
}

fn random_params(seed: u64, d: usize, dp: usize) -> Result<AttentionLayerParams<f64>> {
    let mut r = rng::seeded(seed);
    Ok(AttentionLayerParams {
        wq: Tensor::from_vec(rng::randn_vec(&mut r, d * dp), &[d, dp])?,
        wk: Tensor::from_vec(rng::randn_vec(&mut r, d * dp), &[d, dp])?,
        wv: Tensor::from_vec(rng::randn_vec(&mut r, d * dp), &[d, dp])?,
        wo: Tensor::from_vec(rng::randn_vec(&mut r, dp * d), &[dp, d])?,
    })
}

fn max_abs_diff(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
    a.tokens
        .data()
        .iter()
        .zip(b.tokens.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn main() -> Result<()> {
    let (d, dp) = (8, 8);
    let f = random_map(1, 4, 4, d)?;
    let p = random_params(2, d, dp)?;

    // 1. RSA(f, f) == SA(f): attending to a duplicate of yourself only
    // doubles each softmax mass, which normalization cancels.
    let sa = self_attention(&f, &p)?;
    let rsa_self = reference_self_attention(&f, Some(&f), &p)?;
    println!("max |RSA(f, f) - SA(f)| = {:.3e}", max_abs_diff(&sa, &rsa_self));

    // 2. Empty reference is exactly SA.
    let rsa_empty = reference_self_attention(&f, None, &p)?;
    assert_eq!(sa.tokens.data(), rsa_empty.tokens.data());
    println!("RSA with no reference is bitwise SA");

    // 3. Reference token order is irrelevant: softmax sums over key tokens.
    let r1 = random_map(3, 4, 4, d)?;
    let perm = r1.tokens.data().to_vec();
    let n = r1.n();
    let mut swapped = vec![0.0f64; perm.len()];
    for i in 0..n {
        let j = n - 1 - i;
        swapped[j * d..(j + 1) * d].copy_from_slice(&perm[i * d..(i + 1) * d]);
    }
    let r1_perm = FeatureMap::new(Tensor::from_vec(swapped, &[n, d])?, 4, 4)?;
    let a = reference_self_attention(&f, Some(&r1), &p)?;
    let b = reference_self_attention(&f, Some(&r1_perm), &p)?;
    println!("max output change under reference permutation = {:.3e}", max_abs_diff(&a, &b));

    // 4. Multi-reference softmax pooling, and its worked scalar case:
    // o = 0, o_1 = 1, o_2 = 3 -> norms (1, 3), p ~ (0.1192, 0.8808),
    // blended output ~ 2.7615.
    let mk = |v: f64| FeatureMap::new(Tensor::from_vec(vec![v], &[1, 1]).unwrap(), 1, 1).unwrap();
    let (blend, w) = softmax_pool(&mk(0.0), &[mk(1.0), mk(3.0)])?;
    println!(
        "scalar pool: weights {:?} -> {:.4}",
        w.weights.data(),
        blend.tokens.data()[0]
    );

    let r2 = random_map(4, 4, 4, d)?;
    for mode in [PoolingMode::Softmax, PoolingMode::Concat, PoolingMode::Average] {
        let (out, _) = multiref_rsa(&f, &[r1.clone(), r2.clone()], &p, mode)?;
        println!("{mode:?} pooling, first output element: {:+.6}", out.tokens.data()[0]);
    }
    Ok(())
}
