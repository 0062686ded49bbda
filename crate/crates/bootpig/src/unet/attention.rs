//! Single-head attention primitives: self-attention (SA), reference
//! self-attention (RSA), text cross-attention, and the multi-reference
//! pixelwise-softmax pooling used at inference.

use crate::error::{Error, Result};
use crate::tensor::{ops, Element, Tensor};

/// Flattened spatial feature grid: `tokens` is [n, d] with n = height * width.
#[derive(Debug, Clone)]
pub struct FeatureMap<E: Element = f32> {
    pub tokens: Tensor<E>,
    pub height: usize,
    pub width: usize,
}

impl<E: Element> FeatureMap<E> {
    pub fn new(tokens: Tensor<E>, height: usize, width: usize) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] != height * width {
            return Err(Error::shape(
                "feature_map",
                format!(
                    "tokens shape {:?} does not match {height}x{width} grid",
                    tokens.shape()
                ),
            ));
        }
        Ok(FeatureMap {
            tokens,
            height,
            width,
        })
    }

    pub fn n(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Projection weights of one attention layer: W_q, W_k, W_v are [d, d'],
/// W_o is [d', d]. RSA reuses these unchanged.
#[derive(Debug, Clone)]
pub struct AttentionLayerParams<E: Element = f32> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
}

impl<E: Element> AttentionLayerParams<E> {
    pub fn d(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn d_prime(&self) -> usize {
        self.wq.shape()[1]
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        let (d, dp) = (self.d(), self.d_prime());
        for (name, t, want) in [
            ("wq", &self.wq, [d, dp]),
            ("wk", &self.wk, [d, dp]),
            ("wv", &self.wv, [d, dp]),
            ("wo", &self.wo, [dp, d]),
        ] {
            if t.shape() != want {
                return Err(Error::shape(
                    op,
                    format!("{name} shape {:?}, expected {:?}", t.shape(), want),
                ));
            }
        }
        Ok(())
    }
}

fn check_width<E: Element>(op: &'static str, f: &FeatureMap<E>, p: &AttentionLayerParams<E>) -> Result<()> {
    p.validate(op)?;
    if f.d() != p.d() {
        return Err(Error::shape(
            op,
            format!("feature width {} does not match layer width {}", f.d(), p.d()),
        ));
    }
    Ok(())
}

/// Queries from `f`, keys/values from `kv`, logits scaled by 1 / sqrt(d').
fn attend<E: Element>(
    f: &Tensor<E>,
    kv: &Tensor<E>,
    p: &AttentionLayerParams<E>,
) -> Result<Tensor<E>> {
    let q = ops::matmul(f, &p.wq)?;
    let k = ops::matmul(kv, &p.wk)?;
    let v = ops::matmul(kv, &p.wv)?;
    let scale = E::from_f64(1.0 / (p.d_prime() as f64).sqrt());
    let logits = ops::scale(&ops::matmul(&q, &ops::permute(&k, &[1, 0])?)?, scale)?;
    let weights = ops::softmax(&logits, 1)?;
    ops::matmul(&ops::matmul(&weights, &v)?, &p.wo)
}

/// SA(f) = W_o(softmax(q(f) k(f)^T / sqrt(d')) v(f)).
pub fn self_attention<E: Element>(
    f: &FeatureMap<E>,
    p: &AttentionLayerParams<E>,
) -> Result<FeatureMap<E>> {
    check_width("self_attention", f, p)?;
    FeatureMap::new(attend(&f.tokens, &f.tokens, p)?, f.height, f.width)
}

/// RSA(f, f_ref): keys and values are the concatenation of self and reference
/// projections along the token axis; no parameters beyond `p`. `None`
/// reference (the empty n_ref = 0 case) degenerates to plain SA.
pub fn reference_self_attention<E: Element>(
    f: &FeatureMap<E>,
    f_ref: Option<&FeatureMap<E>>,
    p: &AttentionLayerParams<E>,
) -> Result<FeatureMap<E>> {
    check_width("reference_self_attention", f, p)?;
    let Some(r) = f_ref else {
        return self_attention(f, p);
    };
    if r.d() != f.d() {
        return Err(Error::shape(
            "reference_self_attention",
            format!("reference width {} does not match feature width {}", r.d(), f.d()),
        ));
    }
    let kv = ops::concat(&[&f.tokens, &r.tokens], 0)?;
    FeatureMap::new(attend(&f.tokens, &kv, p)?, f.height, f.width)
}

/// Text cross-attention: queries from spatial tokens [n, d], keys/values from
/// text tokens [m, d_txt]. W_q is [d, d'], W_k/W_v are [d_txt, d'], W_o [d', d].
pub fn cross_attention<E: Element>(
    f: &Tensor<E>,
    text: &Tensor<E>,
    wq: &Tensor<E>,
    wk: &Tensor<E>,
    wv: &Tensor<E>,
    wo: &Tensor<E>,
) -> Result<Tensor<E>> {
    let dp = wq.shape()[1];
    let q = ops::matmul(f, wq)?;
    let k = ops::matmul(text, wk)?;
    let v = ops::matmul(text, wv)?;
    let scale = E::from_f64(1.0 / (dp as f64).sqrt());
    let logits = ops::scale(&ops::matmul(&q, &ops::permute(&k, &[1, 0])?)?, scale)?;
    let weights = ops::softmax(&logits, 1)?;
    ops::matmul(&ops::matmul(&weights, &v)?, wo)
}

/// How multiple references are merged at an RSA site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingMode {
    /// Pixelwise softmax over per-reference displacement norms (the method's
    /// default).
    Softmax,
    /// Concatenate all reference tokens into one RSA call.
    Concat,
    /// Unweighted mean of per-reference RSA outputs.
    Average,
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(PoolingMode::Softmax),
            "concat" => Ok(PoolingMode::Concat),
            "average" => Ok(PoolingMode::Average),
            other => Err(Error::Config(format!("unknown pooling mode '{other}'"))),
        }
    }
}

/// Per-pixel pooling diagnostics: `norms[i]` and `weights[i]` are the n_i and
/// p_i rows (k x n each); every weight column sums to 1.
#[derive(Debug, Clone)]
pub struct PoolingWeights<E: Element = f32> {
    pub norms: Tensor<E>,
    pub weights: Tensor<E>,
}

/// Multi-reference RSA: o = SA(f), o_i = RSA(f, f_ref_i), n_i = per-token
/// channel L2 of (o_i - o), p = pixelwise softmax over i, output
/// o + sum_i p_i (o_i - o). Inference-only (the blend is computed off-tape).
pub fn multiref_rsa<E: Element>(
    f: &FeatureMap<E>,
    refs: &[FeatureMap<E>],
    p: &AttentionLayerParams<E>,
    mode: PoolingMode,
) -> Result<(FeatureMap<E>, Option<PoolingWeights<E>>)> {
    check_width("multiref_rsa", f, p)?;
    if refs.is_empty() {
        return Err(Error::Config("multiref_rsa requires at least one reference".into()));
    }
    if f.tokens.requires_grad() || refs.iter().any(|r| r.tokens.requires_grad()) {
        return Err(Error::Config(
            "multi-reference pooling is inference-only; inputs must not require grad".into(),
        ));
    }

    match mode {
        PoolingMode::Concat => {
            let parts: Vec<&Tensor<E>> = refs.iter().map(|r| &r.tokens).collect();
            let all = FeatureMap::new(ops::concat(&parts, 0)?, refs[0].height, refs[0].width * refs.len())?;
            // height/width provenance of the concatenated pseudo-reference is
            // synthetic; only the token axis matters to RSA.
            let out = reference_self_attention(f, Some(&all), p)?;
            return Ok((out, None));
        }
        PoolingMode::Average => {
            let mut acc: Option<Tensor<E>> = None;
            for r in refs {
                let oi = reference_self_attention(f, Some(r), p)?.tokens;
                acc = Some(match acc {
                    None => oi,
                    Some(a) => ops::add(&a, &oi)?,
                });
            }
            let out = ops::scale(&acc.unwrap(), E::from_f64(1.0 / refs.len() as f64))?;
            return Ok((FeatureMap::new(out, f.height, f.width)?, None));
        }
        PoolingMode::Softmax => {}
    }

    let o = self_attention(f, p)?;
    let outs: Vec<FeatureMap<E>> = refs
        .iter()
        .map(|r| reference_self_attention(f, Some(r), p))
        .collect::<Result<_>>()?;
    let (pooled, weights) = softmax_pool(&o, &outs)?;
    Ok((pooled, Some(weights)))
}

/// The pixelwise softmax blend itself: given the reference-less output `o`
/// and per-reference outputs `outs`, compute n_i = per-token channel L2 of
/// (o_i - o), p = softmax over i, and o + sum_i p_i (o_i - o). A single
/// reference returns o_1 exactly (softmax over one item is 1).
pub fn softmax_pool<E: Element>(
    o: &FeatureMap<E>,
    outs: &[FeatureMap<E>],
) -> Result<(FeatureMap<E>, PoolingWeights<E>)> {
    if outs.is_empty() {
        return Err(Error::Config("softmax_pool requires at least one output".into()));
    }
    let (n, d) = (o.n(), o.d());
    let k = outs.len();
    for oi in outs {
        if oi.n() != n || oi.d() != d {
            return Err(Error::shape(
                "softmax_pool",
                format!(
                    "output shape [{}, {}] does not match [{n}, {d}]",
                    oi.n(),
                    oi.d()
                ),
            ));
        }
    }

    let od = o.tokens.data();
    let mut norms = vec![E::zero(); k * n];
    for (i, oi) in outs.iter().enumerate() {
        let oid = oi.tokens.data();
        for t in 0..n {
            let mut s = E::zero();
            for c in 0..d {
                let diff = oid[t * d + c] - od[t * d + c];
                s += diff * diff;
            }
            norms[i * n + t] = s.sqrt();
        }
    }
    let norms_t = Tensor::from_vec(norms, &[k, n])?;
    let weights_t = ops::softmax(&norms_t.detach(), 0)?;

    if k == 1 {
        return Ok((
            outs[0].clone(),
            PoolingWeights { norms: norms_t, weights: weights_t },
        ));
    }

    let wd = weights_t.data();
    let mut out = od.to_vec();
    for (i, oi) in outs.iter().enumerate() {
        let oid = oi.tokens.data();
        for t in 0..n {
            let w = wd[i * n + t];
            for c in 0..d {
                out[t * d + c] += w * (oid[t * d + c] - od[t * d + c]);
            }
        }
    }
    let pooled = FeatureMap::new(Tensor::from_vec(out, &[n, d])?, o.height, o.width)?;
    Ok((
        pooled,
        PoolingWeights { norms: norms_t, weights: weights_t },
    ))
}
