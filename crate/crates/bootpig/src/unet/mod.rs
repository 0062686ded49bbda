//! Mini text- and time-conditioned diffusion UNet with SA/RSA transformer
//! blocks.
//!
//! The same architecture serves as Base UNet (the denoiser whose attention
//! sites can run in RSA mode) and Reference UNet (an identical clone whose
//! forward pass yields the per-site pre-attention features). Attention sites
//! are derived from the config, ordered as encountered in the forward pass:
//! down path, mid block, up path.

pub mod attention;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ops, Element, Tensor};

use attention::{
    cross_attention, multiref_rsa, reference_self_attention, self_attention,
    AttentionLayerParams, FeatureMap, PoolingMode,
};

/// Token id 0 is reserved as BOS and is prepended to every caption; an empty
/// caption therefore still yields one text token.
pub const BOS_TOKEN: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniUNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    /// Spatial resolutions whose down/up levels get an attention site; the
    /// mid block always has one, so L >= 1 by construction.
    pub attention_resolutions: Vec<usize>,
    pub vocab_size: usize,
    pub text_width: usize,
    pub time_width: usize,
    pub norm_groups: usize,
    /// Maximum text tokens including the implicit BOS.
    pub max_caption_len: usize,
}

impl MiniUNetConfig {
    pub fn desk() -> Self {
        MiniUNetConfig {
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
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::Config("channel_mults must be non-empty".into()));
        }
        let levels = self.channel_mults.len();
        if self.image_size == 0 || self.image_size % (1 << levels) != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^{levels}",
                self.image_size
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for (i, w) in self.widths().into_iter().enumerate() {
            if self.norm_groups == 0 || w % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "level {i} width {w} not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
            if w % 2 != 0 {
                return Err(Error::Config(format!(
                    "level {i} width {w} must be even (attention width is d/2)"
                )));
            }
        }
        if self.time_width < 4 || self.time_width % 2 != 0 {
            return Err(Error::Config(format!(
                "time_width {} must be even and >= 4",
                self.time_width
            )));
        }
        if self.text_width == 0 || self.vocab_size < 2 || self.max_caption_len == 0 {
            return Err(Error::Config("invalid text conditioning dimensions".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_width).collect()
    }

    fn level_resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    fn level_attends(&self, level: usize) -> bool {
        self.attention_resolutions.contains(&self.level_resolution(level))
    }

    /// Attention sites in forward order: (param prefix, layer width).
    pub fn attention_sites(&self) -> Vec<(String, usize)> {
        let widths = self.widths();
        let levels = widths.len();
        let mut sites = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            if self.level_attends(i) {
                sites.push((format!("down{i}.attn"), w));
            }
        }
        sites.push(("mid.attn".to_string(), widths[levels - 1]));
        for i in (0..levels).rev() {
            if self.level_attends(i) {
                sites.push((format!("up{i}.attn"), widths[i]));
            }
        }
        sites
    }

    /// L, the number of attention sites.
    pub fn num_attention_sites(&self) -> usize {
        self.attention_sites().len()
    }

    /// Every (name, shape) parameter of the model, in deterministic order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let widths = self.widths();
        let levels = widths.len();
        let (tw, xw) = (self.time_width, self.text_width);
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        specs.push(("time.mlp1.w".into(), vec![tw, tw]));
        specs.push(("time.mlp1.b".into(), vec![tw]));
        specs.push(("time.mlp2.w".into(), vec![tw, tw]));
        specs.push(("time.mlp2.b".into(), vec![tw]));
        specs.push(("text.tok".into(), vec![self.vocab_size, xw]));
        specs.push(("text.pos".into(), vec![self.max_caption_len, xw]));

        let res_specs = |prefix: &str, cin: usize, cout: usize, specs: &mut Vec<(String, Vec<usize>)>| {
            specs.push((format!("{prefix}.gn.g"), vec![cin]));
            specs.push((format!("{prefix}.gn.b"), vec![cin]));
            specs.push((format!("{prefix}.conv.w"), vec![cout, cin, 3, 3]));
            specs.push((format!("{prefix}.conv.b"), vec![cout]));
            specs.push((format!("{prefix}.time.w"), vec![tw, cout]));
            specs.push((format!("{prefix}.time.b"), vec![cout]));
            if cin != cout {
                specs.push((format!("{prefix}.skip.w"), vec![cout, cin, 1, 1]));
            }
        };
        let attn_specs = |prefix: &str, d: usize, specs: &mut Vec<(String, Vec<usize>)>| {
            let dp = d / 2;
            specs.push((format!("{prefix}.norm1.g"), vec![d]));
            specs.push((format!("{prefix}.norm1.b"), vec![d]));
            specs.push((format!("{prefix}.sa.wq"), vec![d, dp]));
            specs.push((format!("{prefix}.sa.wk"), vec![d, dp]));
            specs.push((format!("{prefix}.sa.wv"), vec![d, dp]));
            specs.push((format!("{prefix}.sa.wo"), vec![dp, d]));
            specs.push((format!("{prefix}.norm2.g"), vec![d]));
            specs.push((format!("{prefix}.norm2.b"), vec![d]));
            specs.push((format!("{prefix}.cross.wq"), vec![d, dp]));
            specs.push((format!("{prefix}.cross.wk"), vec![xw, dp]));
            specs.push((format!("{prefix}.cross.wv"), vec![xw, dp]));
            specs.push((format!("{prefix}.cross.wo"), vec![dp, d]));
        };

        specs.push(("stem.w".into(), vec![widths[0], self.in_channels, 3, 3]));
        specs.push(("stem.b".into(), vec![widths[0]]));
        for i in 0..levels {
            let cin = if i == 0 { widths[0] } else { widths[i - 1] };
            res_specs(&format!("down{i}.res"), cin, widths[i], &mut specs);
            if self.level_attends(i) {
                attn_specs(&format!("down{i}.attn"), widths[i], &mut specs);
            }
            specs.push((format!("down{i}.down.w"), vec![widths[i], widths[i], 3, 3]));
            specs.push((format!("down{i}.down.b"), vec![widths[i]]));
        }
        let wl = widths[levels - 1];
        res_specs("mid.res1", wl, wl, &mut specs);
        attn_specs("mid.attn", wl, &mut specs);
        res_specs("mid.res2", wl, wl, &mut specs);
        for i in (0..levels).rev() {
            let incoming = if i == levels - 1 { wl } else { widths[i + 1] };
            specs.push((format!("up{i}.reduce.w"), vec![widths[i], incoming + widths[i], 1, 1]));
            specs.push((format!("up{i}.reduce.b"), vec![widths[i]]));
            res_specs(&format!("up{i}.res"), widths[i], widths[i], &mut specs);
            if self.level_attends(i) {
                attn_specs(&format!("up{i}.attn"), widths[i], &mut specs);
            }
        }
        specs.push(("final.gn.g".into(), vec![widths[0]]));
        specs.push(("final.gn.b".into(), vec![widths[0]]));
        specs.push(("final.conv.w".into(), vec![self.in_channels, widths[0], 3, 3]));
        specs.push(("final.conv.b".into(), vec![self.in_channels]));
        specs
    }
}

/// One named parameter: immutable data behind an Arc; updates swap the Arc.
#[derive(Debug, Clone)]
pub struct Param<E: Element = f32> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<E>>,
}

impl<E: Element> Param<E> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Named parameter collection; iteration order is the name order, which makes
/// serialization and the global gradient norm deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<E: Element = f32> {
    map: BTreeMap<String, Param<E>>,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<E>) -> Result<()> {
        let name = name.into();
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(
                "param_set",
                format!("{name}: data length {} vs shape {:?}", data.len(), shape),
            ));
        }
        self.map.insert(name, Param { shape, data: Arc::new(data) });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<E>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: Vec<E>) -> Result<()> {
        let p = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        if data.len() != p.data.len() {
            return Err(Error::shape(
                "param_set",
                format!("{name}: replacement length {} vs {}", data.len(), p.data.len()),
            ));
        }
        p.data = Arc::new(data);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<E>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.numel()).sum()
    }
}

/// Binds every parameter to a tensor leaf for one forward/backward pass.
/// Leaves for which `trainable` returned true participate in the tape and
/// expose gradients after backward.
pub struct ForwardCtx<E: Element = f32> {
    leaves: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> ForwardCtx<E> {
    pub fn bind(params: &ParamSet<E>, trainable: &dyn Fn(&str) -> bool) -> Result<Self> {
        let mut leaves = BTreeMap::new();
        for (name, p) in params.iter() {
            let t = Tensor::from_shared(p.data.clone(), &p.shape, trainable(name))?;
            leaves.insert(name.clone(), t);
        }
        Ok(ForwardCtx { leaves })
    }

    pub fn frozen(params: &ParamSet<E>) -> Result<Self> {
        Self::bind(params, &|_| false)
    }

    pub fn leaf(&self, name: &str) -> Result<&Tensor<E>> {
        self.leaves
            .get(name)
            .ok_or_else(|| Error::Config(format!("unbound parameter '{name}'")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.leaves.contains_key(name)
    }

    /// (name, grad) for every trainable leaf backward has reached.
    pub fn grads(&self) -> Vec<(&str, Vec<E>)> {
        self.leaves
            .iter()
            .filter_map(|(n, t)| t.grad().map(|g| (n.as_str(), g)))
            .collect()
    }
}

/// Per-site pre-attention feature maps from one Reference UNet forward pass
/// of a single batch element, plus the timestep they were extracted at.
#[derive(Debug, Clone)]
pub struct ReferenceFeatureSet<E: Element = f32> {
    pub per_layer: Vec<FeatureMap<E>>,
    pub timestep: usize,
}

/// Attention conditioning for one denoise call. Slices are indexed by batch
/// element.
pub enum AttnCond<'a, E: Element = f32> {
    /// Plain self-attention; references ignored entirely.
    Sa,
    /// Reference self-attention with one feature set per batch element.
    Rsa(&'a [ReferenceFeatureSet<E>]),
    /// Per-element optional reference; `None` elements run plain SA. This is
    /// the conditioning-dropout regime during training.
    Mixed(&'a [Option<ReferenceFeatureSet<E>>]),
    /// k >= 1 feature sets per batch element, pooled at every site.
    MultiRef {
        refs: &'a [Vec<ReferenceFeatureSet<E>>],
        pooling: PoolingMode,
    },
}

/// Sinusoidal timestep embedding, one row per batch element.
pub fn sinusoidal_time_embedding<E: Element>(ts: &[usize], dim: usize) -> Result<Tensor<E>> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
            out.push(E::from_f64((t as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
            out.push(E::from_f64((t as f64 * freq).cos()));
        }
    }
    Tensor::from_vec(out, &[ts.len(), dim])
}

fn res_block<E: Element>(
    ctx: &ForwardCtx<E>,
    prefix: &str,
    x: &Tensor<E>,
    temb: &Tensor<E>,
    groups: usize,
) -> Result<Tensor<E>> {
    let y = ops::group_norm(
        x,
        groups,
        ctx.leaf(&format!("{prefix}.gn.g"))?,
        ctx.leaf(&format!("{prefix}.gn.b"))?,
        1e-5,
    )?;
    let y = ops::silu(&y)?;
    let y = ops::conv2d(
        &y,
        ctx.leaf(&format!("{prefix}.conv.w"))?,
        Some(ctx.leaf(&format!("{prefix}.conv.b"))?),
        1,
        1,
    )?;
    let tb = ops::add_rowvec(
        &ops::matmul(temb, ctx.leaf(&format!("{prefix}.time.w"))?)?,
        ctx.leaf(&format!("{prefix}.time.b"))?,
    )?;
    let y = ops::add_batch_chan(&y, &tb)?;
    let skip_name = format!("{prefix}.skip.w");
    let skip = if ctx.has(&skip_name) {
        ops::conv2d(x, ctx.leaf(&skip_name)?, None, 1, 0)?
    } else {
        x.clone()
    };
    ops::add(&y, &skip)
}

fn site_params<E: Element>(ctx: &ForwardCtx<E>, prefix: &str) -> Result<AttentionLayerParams<E>> {
    Ok(AttentionLayerParams {
        wq: ctx.leaf(&format!("{prefix}.sa.wq"))?.clone(),
        wk: ctx.leaf(&format!("{prefix}.sa.wk"))?.clone(),
        wv: ctx.leaf(&format!("{prefix}.sa.wv"))?.clone(),
        wo: ctx.leaf(&format!("{prefix}.sa.wo"))?.clone(),
    })
}

fn to_tokens<E: Element>(x4: &Tensor<E>, c: usize, h: usize, w: usize) -> Result<Tensor<E>> {
    // [1,C,H,W] -> [HW, C]
    ops::permute(&ops::reshape(x4, &[c, h * w])?, &[1, 0])
}

fn from_tokens<E: Element>(tok: &Tensor<E>, c: usize, h: usize, w: usize) -> Result<Tensor<E>> {
    // [HW, C] -> [1,C,H,W]
    ops::reshape(&ops::permute(tok, &[1, 0])?, &[1, c, h, w])
}

#[allow(clippy::too_many_arguments)]
fn attn_site<E: Element>(
    ctx: &ForwardCtx<E>,
    prefix: &str,
    x: &Tensor<E>,
    texts: &[Tensor<E>],
    cond: &AttnCond<E>,
    site: usize,
    groups: usize,
    collector: Option<&mut Vec<Vec<FeatureMap<E>>>>,
) -> Result<Tensor<E>> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let p = site_params(ctx, prefix)?;
    let n1g = ctx.leaf(&format!("{prefix}.norm1.g"))?;
    let n1b = ctx.leaf(&format!("{prefix}.norm1.b"))?;
    let n2g = ctx.leaf(&format!("{prefix}.norm2.g"))?;
    let n2b = ctx.leaf(&format!("{prefix}.norm2.b"))?;
    let cq = ctx.leaf(&format!("{prefix}.cross.wq"))?;
    let ck = ctx.leaf(&format!("{prefix}.cross.wk"))?;
    let cv = ctx.leaf(&format!("{prefix}.cross.wv"))?;
    let co = ctx.leaf(&format!("{prefix}.cross.wo"))?;

    let mut collector = collector;
    let mut outs: Vec<Tensor<E>> = Vec::with_capacity(b);
    for bi in 0..b {
        let xb = ops::reshape(&ops::select0(x, bi)?, &[1, c, h, w])?;
        // Pre-attention features are the post-norm tokens: this is what RSA
        // keys/values concatenate, so RSA(f, own f) == SA(f) holds exactly.
        let fnorm = ops::group_norm(&xb, groups, n1g, n1b, 1e-5)?;
        let f = FeatureMap::new(to_tokens(&fnorm, c, h, w)?, h, w)?;
        // Collected features keep their tape connection: when the reference
        // binding is trainable, the base model's loss backpropagates through
        // them into the Reference UNet.
        if let Some(coll) = collector.as_deref_mut() {
            coll[site].push(f.clone());
        }
        let attn_out = match cond {
            AttnCond::Sa => self_attention(&f, &p)?,
            AttnCond::Rsa(refs) => {
                reference_self_attention(&f, Some(&refs[bi].per_layer[site]), &p)?
            }
            AttnCond::Mixed(refs) => reference_self_attention(
                &f,
                refs[bi].as_ref().map(|r| &r.per_layer[site]),
                &p,
            )?,
            AttnCond::MultiRef { refs, pooling } => {
                let site_refs: Vec<FeatureMap<E>> =
                    refs[bi].iter().map(|s| s.per_layer[site].clone()).collect();
                multiref_rsa(&f, &site_refs, &p, *pooling)?.0
            }
        };
        let t1 = ops::add(&to_tokens(&xb, c, h, w)?, &attn_out.tokens)?;
        let t1_4 = from_tokens(&t1, c, h, w)?;
        let f2 = to_tokens(&ops::group_norm(&t1_4, groups, n2g, n2b, 1e-5)?, c, h, w)?;
        let cross = cross_attention(&f2, &texts[bi], cq, ck, cv, co)?;
        let t2 = ops::add(&t1, &cross)?;
        outs.push(from_tokens(&t2, c, h, w)?);
    }
    let refs: Vec<&Tensor<E>> = outs.iter().collect();
    ops::concat(&refs, 0)
}

/// Full denoiser forward pass over an explicit parameter binding.
///
/// `ts` and `captions` hold one entry per batch element; captions are raw
/// token ids (BOS is prepended internally). When `collector` is given it
/// receives the per-site pre-attention feature maps, indexed [site][batch].
#[allow(clippy::too_many_arguments)]
pub fn denoise_with_ctx<E: Element>(
    cfg: &MiniUNetConfig,
    ctx: &ForwardCtx<E>,
    x_t: &Tensor<E>,
    ts: &[usize],
    captions: &[Vec<usize>],
    cond: &AttnCond<E>,
    mut collector: Option<&mut Vec<Vec<FeatureMap<E>>>>,
) -> Result<Tensor<E>> {
    cfg.validate()?;
    let s = cfg.image_size;
    if x_t.shape() != [ts.len(), cfg.in_channels, s, s] {
        return Err(Error::shape(
            "denoise",
            format!(
                "input shape {:?}, expected [{}, {}, {s}, {s}]",
                x_t.shape(),
                ts.len(),
                cfg.in_channels
            ),
        ));
    }
    let b = ts.len();
    if captions.len() != b {
        return Err(Error::Config(format!(
            "{} captions for {b} batch elements",
            captions.len()
        )));
    }
    let l = cfg.num_attention_sites();
    match cond {
        AttnCond::Sa => {}
        AttnCond::Rsa(refs) => {
            if refs.len() != b {
                return Err(Error::Config(format!(
                    "rsa mode: {} reference feature sets for {b} batch elements",
                    refs.len()
                )));
            }
            if let Some(bad) = refs.iter().find(|r| r.per_layer.len() != l) {
                return Err(Error::Config(format!(
                    "reference feature set has {} layers, model has {l} attention sites",
                    bad.per_layer.len()
                )));
            }
        }
        AttnCond::Mixed(refs) => {
            if refs.len() != b {
                return Err(Error::Config(format!(
                    "mixed mode: {} reference slots for {b} batch elements",
                    refs.len()
                )));
            }
            if let Some(bad) = refs.iter().flatten().find(|r| r.per_layer.len() != l) {
                return Err(Error::Config(format!(
                    "reference feature set has {} layers, model has {l} attention sites",
                    bad.per_layer.len()
                )));
            }
        }
        AttnCond::MultiRef { refs, .. } => {
            if refs.len() != b {
                return Err(Error::Config(format!(
                    "multiref mode: {} reference groups for {b} batch elements",
                    refs.len()
                )));
            }
            for group in refs.iter() {
                if group.is_empty() {
                    return Err(Error::Config("multiref mode requires k >= 1 references".into()));
                }
                if let Some(bad) = group.iter().find(|r| r.per_layer.len() != l) {
                    return Err(Error::Config(format!(
                        "reference feature set has {} layers, model has {l} attention sites",
                        bad.per_layer.len()
                    )));
                }
            }
        }
    }
    if let Some(coll) = collector.as_deref_mut() {
        coll.clear();
        coll.resize_with(l, Vec::new);
    }

    // Timestep embedding -> 2-layer MLP.
    let temb = sinusoidal_time_embedding::<E>(ts, cfg.time_width)?;
    let temb = ops::silu(&ops::add_rowvec(
        &ops::matmul(&temb, ctx.leaf("time.mlp1.w")?)?,
        ctx.leaf("time.mlp1.b")?,
    )?)?;
    let temb = ops::add_rowvec(
        &ops::matmul(&temb, ctx.leaf("time.mlp2.w")?)?,
        ctx.leaf("time.mlp2.b")?,
    )?;

    // Per-element text encodings: learned token + position embeddings.
    let tok_table = ctx.leaf("text.tok")?;
    let pos_table = ctx.leaf("text.pos")?;
    let mut texts = Vec::with_capacity(b);
    for caption in captions {
        let mut ids = Vec::with_capacity(caption.len() + 1);
        ids.push(BOS_TOKEN);
        ids.extend_from_slice(caption);
        if ids.len() > cfg.max_caption_len {
            return Err(Error::Config(format!(
                "caption of {} tokens exceeds max_caption_len {}",
                ids.len(),
                cfg.max_caption_len
            )));
        }
        let e = ops::embedding(tok_table, &ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pe = ops::embedding(pos_table, &positions)?;
        texts.push(ops::add(&e, &pe)?);
    }

    let levels = cfg.channel_mults.len();
    let groups = cfg.norm_groups;
    let mut site = 0usize;

    let mut h = ops::conv2d(x_t, ctx.leaf("stem.w")?, Some(ctx.leaf("stem.b")?), 1, 1)?;
    let mut skips: Vec<Tensor<E>> = Vec::with_capacity(levels);
    for i in 0..levels {
        h = res_block(ctx, &format!("down{i}.res"), &h, &temb, groups)?;
        if cfg.level_attends(i) {
            h = attn_site(
                ctx,
                &format!("down{i}.attn"),
                &h,
                &texts,
                cond,
                site,
                groups,
                collector.as_deref_mut(),
            )?;
            site += 1;
        }
        skips.push(h.clone());
        h = ops::conv2d(
            &h,
            ctx.leaf(&format!("down{i}.down.w"))?,
            Some(ctx.leaf(&format!("down{i}.down.b"))?),
            2,
            1,
        )?;
    }

    h = res_block(ctx, "mid.res1", &h, &temb, groups)?;
    h = attn_site(ctx, "mid.attn", &h, &texts, cond, site, groups, collector.as_deref_mut())?;
    site += 1;
    h = res_block(ctx, "mid.res2", &h, &temb, groups)?;

    for i in (0..levels).rev() {
        h = ops::upsample2x(&h)?;
        h = ops::concat(&[&h, &skips[i]], 1)?;
        h = ops::conv2d(
            &h,
            ctx.leaf(&format!("up{i}.reduce.w"))?,
            Some(ctx.leaf(&format!("up{i}.reduce.b"))?),
            1,
            0,
        )?;
        h = res_block(ctx, &format!("up{i}.res"), &h, &temb, groups)?;
        if cfg.level_attends(i) {
            h = attn_site(
                ctx,
                &format!("up{i}.attn"),
                &h,
                &texts,
                cond,
                site,
                groups,
                collector.as_deref_mut(),
            )?;
            site += 1;
        }
    }
    debug_assert_eq!(site, l);

    let h = ops::group_norm(&h, groups, ctx.leaf("final.gn.g")?, ctx.leaf("final.gn.b")?, 1e-5)?;
    let h = ops::silu(&h)?;
    ops::conv2d(&h, ctx.leaf("final.conv.w")?, Some(ctx.leaf("final.conv.b")?), 1, 1)
}

/// A mini UNet: config plus named parameters.
#[derive(Debug, Clone)]
pub struct UNet<E: Element = f32> {
    pub config: MiniUNetConfig,
    pub params: ParamSet<E>,
}

impl<E: Element> UNet<E> {
    /// Seeded initialization. Convolutions use He-style scaling, projections
    /// 1/sqrt(fan_in), embeddings 0.02; norms are identity and the final
    /// conv is zeroed so the untrained model predicts zero noise.
    pub fn init(config: MiniUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::derived(seed, 0xB001, 0);
        let mut params = ParamSet::new();
        for (name, shape) in config.param_specs() {
            let n: usize = shape.iter().product();
            let data: Vec<E> = if name.ends_with(".gn.g")
                || name.ends_with(".norm1.g")
                || name.ends_with(".norm2.g")
            {
                vec![E::one(); n]
            } else if name == "final.conv.w" || name.ends_with(".b") || name.ends_with(".gn.b") {
                vec![E::zero(); n]
            } else if name == "text.tok" || name == "text.pos" {
                rng::randn_vec::<E>(&mut rng, n)
                    .into_iter()
                    .map(|v| v * E::from_f64(0.02))
                    .collect()
            } else if shape.len() == 4 {
                let fan_in = shape[1] * shape[2] * shape[3];
                let std = E::from_f64((2.0 / fan_in as f64).sqrt());
                rng::randn_vec::<E>(&mut rng, n).into_iter().map(|v| v * std).collect()
            } else {
                let std = E::from_f64(1.0 / (shape[0] as f64).sqrt());
                rng::randn_vec::<E>(&mut rng, n).into_iter().map(|v| v * std).collect()
            };
            params.insert(name, shape, data)?;
        }
        Ok(UNet { config, params })
    }

    /// Deep copy with independent update semantics (phi = theta). Parameter
    /// data is immutable behind Arcs and updates swap whole buffers, so the
    /// clone and the original can never observe each other's changes.
    pub fn clone_weights(&self) -> Self {
        self.clone()
    }

    /// Forward pass with frozen weights (no gradients).
    pub fn denoise(
        &self,
        x_t: &Tensor<E>,
        ts: &[usize],
        captions: &[Vec<usize>],
        cond: &AttnCond<E>,
    ) -> Result<Tensor<E>> {
        let ctx = ForwardCtx::frozen(&self.params)?;
        denoise_with_ctx(&self.config, &ctx, x_t, ts, captions, cond, None)
    }

    /// One full SA-mode forward pass over the noised reference batch,
    /// returning the L pre-attention feature maps per batch element.
    pub fn collect_reference_features(
        &self,
        x_ref_noised: &Tensor<E>,
        ts: &[usize],
        captions: &[Vec<usize>],
    ) -> Result<Vec<ReferenceFeatureSet<E>>> {
        let ctx = ForwardCtx::frozen(&self.params)?;
        collect_reference_features_with_ctx(&self.config, &ctx, x_ref_noised, ts, captions)
    }
}

/// Feature collection over an explicit binding (lets the trainer collect
/// through a trainable Reference UNet so gradients flow into phi).
pub fn collect_reference_features_with_ctx<E: Element>(
    cfg: &MiniUNetConfig,
    ctx: &ForwardCtx<E>,
    x_ref_noised: &Tensor<E>,
    ts: &[usize],
    captions: &[Vec<usize>],
) -> Result<Vec<ReferenceFeatureSet<E>>> {
    let mut collector: Vec<Vec<FeatureMap<E>>> = Vec::new();
    denoise_with_ctx(cfg, ctx, x_ref_noised, ts, captions, &AttnCond::Sa, Some(&mut collector))?;
    let b = ts.len();
    let mut sets = Vec::with_capacity(b);
    for (bi, &t) in ts.iter().enumerate().take(b) {
        let per_layer = collector.iter().map(|site| site[bi].clone()).collect();
        sets.push(ReferenceFeatureSet { per_layer, timestep: t });
    }
    Ok(sets)
}
