//! Closed-world evaluation proxies.
//!
//! The corpus palette and shape vocabulary are finite, so caption attributes
//! are recoverable from pixels by deterministic extractors: palette
//! segmentation for color, rasterized-template correlation for shape, a
//! centroid bucket for the spatial relation, and exact re-rendering for the
//! background. Subject fidelity compares the generated foreground against the
//! reference foreground; prompt fidelity scores each caption attribute 0/1.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::checkpoint;
use crate::databoot::{
    self, inside, relation_of, AugmentationPolicy, BackgroundKind, CaptionAttrs, ImageU8,
    ShapeKind, Triplet, BACKGROUND_COLORS, BACKGROUND_KINDS, BACKGROUND_SECONDARY,
    SHAPE_KINDS, SUBJECT_COLORS, WHITE,
};
use crate::error::{Error, Result};
use crate::inference::{generate, GuidanceConfig};
use crate::rng;
use crate::scheduler::NoiseSchedule;
use crate::threads;
use crate::unet::UNet;

/// Scene seeds for held-out evaluation records; disjoint by domain from the
/// training corpus record seeds.
const DOMAIN_EVAL_SCENE: u64 = 0xE7_A1;
/// Per-record generation seed stream.
const DOMAIN_EVAL_GEN: u64 = 0xE7_A2;
/// Per-record, per-slot reference augmentation seeds.
const DOMAIN_EVAL_AUG: u64 = 0xE7_A3;

// ---------------------------------------------------------------------------
// Foreground segmentation
// ---------------------------------------------------------------------------

/// Boolean foreground raster with its pixel count.
#[derive(Debug, Clone)]
pub struct Foreground {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub count: usize,
}

impl Foreground {
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    /// Centroid in normalized coordinates (pixel centers at +0.5), or `None`
    /// when empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        if self.count == 0 {
            return None;
        }
        let (mut mx, mut my) = (0.0f64, 0.0f64);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(x, y) {
                    mx += x as f64 + 0.5;
                    my += y as f64 + 0.5;
                }
            }
        }
        let n = self.count as f64;
        Some((mx / n / self.width as f64, my / n / self.height as f64))
    }
}

fn color_distance(a: (u8, u8, u8), b: (u8, u8, u8)) -> f64 {
    let d = |x: u8, y: u8| (x as f64 - y as f64) / 255.0;
    let (dr, dg, db) = (d(a.0, b.0), d(a.1, b.1), d(a.2, b.2));
    (dr * dr + dg * dg + db * db).sqrt()
}

fn pixel(img: &ImageU8, x: usize, y: usize) -> (u8, u8, u8) {
    (img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2))
}

/// Full closed-world palette: subject colors first, then everything a
/// background can produce.
fn full_palette() -> Vec<((u8, u8, u8), bool)> {
    let mut p: Vec<((u8, u8, u8), bool)> =
        SUBJECT_COLORS.iter().map(|c| (*c, true)).collect();
    for c in BACKGROUND_COLORS {
        p.push((c, false));
    }
    p.push((BACKGROUND_SECONDARY, false));
    p.push((WHITE, false));
    p
}

/// A pixel is foreground when its nearest palette color is a subject color
/// and the distance is below 0.25 in normalized RGB.
pub fn segment_foreground(img: &ImageU8) -> Result<Foreground> {
    if img.channels != 3 {
        return Err(Error::Config(format!(
            "foreground segmentation needs 3 channels, got {}",
            img.channels
        )));
    }
    let palette = full_palette();
    let mut mask = vec![false; img.width * img.height];
    let mut count = 0usize;
    for y in 0..img.height {
        for x in 0..img.width {
            let p = pixel(img, x, y);
            let mut best = (f64::INFINITY, false);
            for (c, is_subject) in &palette {
                let d = color_distance(p, *c);
                if d < best.0 {
                    best = (d, *is_subject);
                }
            }
            if best.1 && best.0 < 0.25 {
                mask[y * img.width + x] = true;
                count += 1;
            }
        }
    }
    Ok(Foreground { width: img.width, height: img.height, mask, count })
}

/// Foreground view of a stored 1-channel mask image (value > 0).
pub fn mask_foreground(mask: &ImageU8) -> Result<Foreground> {
    if mask.channels != 1 {
        return Err(Error::Config(format!(
            "expected a 1-channel mask, got {} channels",
            mask.channels
        )));
    }
    let mut m = vec![false; mask.width * mask.height];
    let mut count = 0usize;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y, 0) > 0 {
                m[y * mask.width + x] = true;
                count += 1;
            }
        }
    }
    Ok(Foreground { width: mask.width, height: mask.height, mask: m, count })
}

// ---------------------------------------------------------------------------
// Color histogram
// ---------------------------------------------------------------------------

/// Normalized histogram of foreground pixels over the subject palette.
pub fn palette_histogram(img: &ImageU8, fg: &Foreground) -> [f64; SUBJECT_COLORS.len()] {
    let mut h = [0.0f64; SUBJECT_COLORS.len()];
    if fg.count == 0 {
        return h;
    }
    for y in 0..img.height {
        for x in 0..img.width {
            if !fg.at(x, y) {
                continue;
            }
            let p = pixel(img, x, y);
            let mut best = (f64::INFINITY, 0usize);
            for (i, c) in SUBJECT_COLORS.iter().enumerate() {
                let d = color_distance(p, *c);
                if d < best.0 {
                    best = (d, i);
                }
            }
            h[best.1] += 1.0;
        }
    }
    let n = fg.count as f64;
    for v in &mut h {
        *v /= n;
    }
    h
}

/// Total-variation distance between two normalized histograms, in [0, 1].
pub fn histogram_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Shape templates
// ---------------------------------------------------------------------------

/// Area of a shape at radius r is approximately `area_coeff * r^2`.
fn area_coeff(kind: ShapeKind) -> f64 {
    match kind {
        ShapeKind::Circle => std::f64::consts::PI,
        ShapeKind::Square => 3.24,
        ShapeKind::Triangle => 2.2,
        ShapeKind::Diamond => 2.88,
        ShapeKind::Ring => 0.75 * std::f64::consts::PI,
        ShapeKind::Cross => 2.31,
    }
}

/// Best intersection-over-union between the foreground and a rasterized
/// template of `kind`, searched over a small grid of radii and centers.
pub fn shape_match(fg: &Foreground, kind: ShapeKind) -> f64 {
    if fg.count == 0 {
        return 0.0;
    }
    let (cxn, cyn) = fg.centroid().expect("non-empty foreground");
    // foreground centroid in pixel-index coordinates
    let fx = cxn * fg.width as f64 - 0.5;
    let fy = cyn * fg.height as f64 - 0.5;
    let r0 = (fg.count as f64 / area_coeff(kind)).sqrt();
    let mut best = 0.0f64;
    for ri in 0..16 {
        let r = r0 * (0.80 + 0.03 * ri as f64);
        let ext = (1.25 * r).ceil() as i64 + 1;
        let mut offsets: Vec<(i64, i64)> = Vec::new();
        let (mut tx, mut ty) = (0.0f64, 0.0f64);
        for dy in -ext..=ext {
            for dx in -ext..=ext {
                if inside(kind, dx, dy, r) {
                    offsets.push((dx, dy));
                    tx += dx as f64;
                    ty += dy as f64;
                }
            }
        }
        if offsets.is_empty() {
            continue;
        }
        // align the template's own raster centroid with the foreground
        // centroid (asymmetric shapes carry their mass off-center)
        let n = offsets.len() as f64;
        let cx0 = (fx - tx / n).round() as i64;
        let cy0 = (fy - ty / n).round() as i64;
        for oy in -1..=1i64 {
            for ox in -1..=1i64 {
                let (cx, cy) = (cx0 + ox, cy0 + oy);
                let mut inter = 0usize;
                for (dx, dy) in &offsets {
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0
                        && y >= 0
                        && (x as usize) < fg.width
                        && (y as usize) < fg.height
                        && fg.at(x as usize, y as usize)
                    {
                        inter += 1;
                    }
                }
                let union = offsets.len() + fg.count - inter;
                if union > 0 {
                    best = best.max(inter as f64 / union as f64);
                }
            }
        }
    }
    best
}

/// Shape kind whose template correlates best with the foreground, with its
/// score; `None` for an empty foreground.
pub fn classify_shape(fg: &Foreground) -> Option<(ShapeKind, f64)> {
    if fg.count == 0 {
        return None;
    }
    let mut best: Option<(ShapeKind, f64)> = None;
    for kind in SHAPE_KINDS {
        let s = shape_match(fg, kind);
        if best.map(|(_, b)| s > b).unwrap_or(true) {
            best = Some((kind, s));
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Subject fidelity
// ---------------------------------------------------------------------------

/// Breakdown of one subject-fidelity measurement.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SubjectScore {
    pub score: f64,
    pub color_score: f64,
    pub shape_score: f64,
    /// The generated image had no detectable foreground; score is 0.
    pub no_foreground: bool,
}

/// How faithfully the generated image reproduces the reference subject:
/// `0.5 * (1 - histogram distance) + 0.5 * (template correlation with the
/// reference's shape kind)`. Uses only detected-foreground pixels, so the
/// generated background is irrelevant.
pub fn subject_fidelity(
    generated: &ImageU8,
    reference: &ImageU8,
    ref_mask: &ImageU8,
) -> Result<SubjectScore> {
    if generated.width != reference.width || generated.height != reference.height {
        return Err(Error::Config(format!(
            "generated {}x{} vs reference {}x{}: dimensions must match",
            generated.width, generated.height, reference.width, reference.height
        )));
    }
    if ref_mask.width != reference.width || ref_mask.height != reference.height {
        return Err(Error::Config("mask dimensions must match the reference".into()));
    }
    let fg_gen = segment_foreground(generated)?;
    if fg_gen.count == 0 {
        return Ok(SubjectScore {
            score: 0.0,
            color_score: 0.0,
            shape_score: 0.0,
            no_foreground: true,
        });
    }
    let fg_ref = segment_foreground(reference)?;
    if fg_ref.count == 0 {
        return Err(Error::Config("reference has no detectable foreground".into()));
    }
    let h_gen = palette_histogram(generated, &fg_gen);
    let h_ref = palette_histogram(reference, &fg_ref);
    let color_score = 1.0 - histogram_distance(&h_gen, &h_ref);
    // The stored mask is the exact subject raster; classify it to get the
    // reference shape kind, then correlate the generated foreground with
    // that kind's template.
    let fg_mask = mask_foreground(ref_mask)?;
    let kind = match classify_shape(&fg_mask) {
        Some((k, _)) => k,
        None => return Err(Error::Config("reference mask is empty".into())),
    };
    let shape_score = shape_match(&fg_gen, kind);
    Ok(SubjectScore {
        score: 0.5 * color_score + 0.5 * shape_score,
        color_score,
        shape_score,
        no_foreground: false,
    })
}

// ---------------------------------------------------------------------------
// Prompt fidelity
// ---------------------------------------------------------------------------

/// Breakdown of one prompt-fidelity measurement; each attribute scores 0/1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PromptScore {
    pub score: f64,
    pub color: f64,
    pub shape: f64,
    pub relation: f64,
    pub background: f64,
    pub no_foreground: bool,
}

/// Classify the non-foreground pixels by exact re-rendering of every
/// (background kind, base color) combination.
fn classify_background(img: &ImageU8, fg: &Foreground) -> Option<BackgroundKind> {
    let s = img.width;
    let mut best: Option<(f64, BackgroundKind)> = None;
    for kind in BACKGROUND_KINDS {
        for bg_color in 0..BACKGROUND_COLORS.len() {
            let mut sse = 0.0f64;
            let mut n = 0usize;
            for y in 0..img.height {
                for x in 0..img.width {
                    if fg.at(x, y) {
                        continue;
                    }
                    let d = color_distance(
                        pixel(img, x, y),
                        databoot::background_pixel(kind, bg_color, x, y, s),
                    );
                    sse += d * d;
                    n += 1;
                }
            }
            if n == 0 {
                return None;
            }
            let mse = sse / n as f64;
            if best.map(|(b, _)| mse < b).unwrap_or(true) {
                best = Some((mse, kind));
            }
        }
    }
    best.map(|(_, k)| k)
}

/// How well the image matches its caption: the mean of four 0/1 attribute
/// scores (dominant palette color, best shape template, centroid relation
/// bucket, re-rendered background kind).
pub fn prompt_fidelity(generated: &ImageU8, caption: &[usize]) -> Result<PromptScore> {
    let attrs = CaptionAttrs::decode(caption)?;
    let fg = segment_foreground(generated)?;
    let (color, shape, relation) = if fg.count == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let h = palette_histogram(generated, &fg);
        let dominant = h
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite histogram"))
            .map(|(i, _)| i)
            .expect("non-empty histogram");
        let color = if dominant == attrs.color { 1.0 } else { 0.0 };
        let shape = match classify_shape(&fg) {
            Some((k, _)) if k == attrs.shape => 1.0,
            _ => 0.0,
        };
        let (cx, cy) = fg.centroid().expect("non-empty foreground");
        let relation = if relation_of(cx, cy) == attrs.relation { 1.0 } else { 0.0 };
        (color, shape, relation)
    };
    let background = match classify_background(generated, &fg) {
        Some(k) if k == attrs.background => 1.0,
        _ => 0.0,
    };
    Ok(PromptScore {
        score: 0.25 * (color + shape + relation + background),
        color,
        shape,
        relation,
        background,
        no_foreground: fg.count == 0,
    })
}

// ---------------------------------------------------------------------------
// Held-out evaluation corpus
// ---------------------------------------------------------------------------

/// Render `n` held-out scenes. Their scene seeds come from a dedicated
/// domain, so they are disjoint from every training-corpus record seed
/// derived from the same base seed.
pub fn heldout_scenes(n: usize, seed: u64, size: usize) -> Result<Vec<Triplet>> {
    threads::par_map(n, |i| {
        let spec = databoot::sample_scene(rng::mix(seed, DOMAIN_EVAL_SCENE, i as u64));
        databoot::render_triplet(&spec, size)
    })
    .into_iter()
    .collect()
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordEval {
    pub id: String,
    pub caption: Vec<usize>,
    pub subject: SubjectScore,
    pub prompt: PromptScore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub subject_fidelity: f64,
    pub prompt_fidelity: f64,
    pub fingerprint: String,
    pub records: Vec<RecordEval>,
}

impl EvalReport {
    fn aggregate(records: Vec<RecordEval>, fingerprint: String) -> Self {
        let n = records.len().max(1) as f64;
        let subject = records.iter().map(|r| r.subject.score).sum::<f64>() / n;
        let prompt = records.iter().map(|r| r.prompt.score).sum::<f64>() / n;
        EvalReport {
            subject_fidelity: subject,
            prompt_fidelity: prompt,
            fingerprint,
            records,
        }
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("evaluation {} ({} records)\n", self.fingerprint, self.records.len()));
        out.push_str(&format!(
            "{:<20} {:>8} {:>8} {:>6} {:>6} {:>4} {:>4} {:>4} {:>4}\n",
            "record", "subject", "prompt", "color", "shape", "col", "shp", "rel", "bg"
        ));
        for r in &self.records {
            out.push_str(&format!(
                "{:<20} {:>8.4} {:>8.4} {:>6.3} {:>6.3} {:>4.0} {:>4.0} {:>4.0} {:>4.0}\n",
                r.id,
                r.subject.score,
                r.prompt.score,
                r.subject.color_score,
                r.subject.shape_score,
                r.prompt.color,
                r.prompt.shape,
                r.prompt.relation,
                r.prompt.background,
            ));
        }
        out.push_str(&format!(
            "mean subject_fidelity {:.4}  mean prompt_fidelity {:.4}\n",
            self.subject_fidelity, self.prompt_fidelity
        ));
        out
    }

    /// Line-delimited serialization: one summary line, then one record line
    /// per evaluated scene.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "subject_fidelity": self.subject_fidelity,
            "prompt_fidelity": self.prompt_fidelity,
            "fingerprint": self.fingerprint,
            "records": self.records.len(),
        });
        let mut out = serde_json::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?);
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(f).lines();
        let header: serde_json::Value = match lines.next() {
            Some(l) => serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)
                .map_err(|e| Error::Config(format!("bad report header: {e}")))?,
            None => return Err(Error::Config("empty report file".into())),
        };
        let mut records = Vec::new();
        for l in lines {
            let l = l.map_err(|e| Error::io(path, e))?;
            if l.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&l)
                    .map_err(|e| Error::Config(format!("bad report record: {e}")))?,
            );
        }
        let fingerprint = header["fingerprint"].as_str().unwrap_or_default().to_string();
        Ok(EvalReport::aggregate(records, fingerprint))
    }
}

fn fingerprint(
    base: &UNet<f32>,
    ref_unet: &UNet<f32>,
    num_refs: usize,
    g: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(checkpoint::params_digest(&base.params)?.as_bytes());
    h.update(checkpoint::params_digest(&ref_unet.params)?.as_bytes());
    h.update(
        format!(
            "refs={num_refs} eta_img={:e} eta_text_img={:e} sampler={:?} steps={} eta={:e} \
             pooling={:?} seed={} timesteps={}",
            g.eta_img,
            g.eta_text_img,
            g.sampler.kind,
            g.sampler.steps,
            g.sampler.eta,
            g.pooling,
            g.seed,
            sched.timesteps(),
        )
        .as_bytes(),
    );
    let d = h.finalize();
    Ok(d.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Generate one image per held-out scene with `num_refs` references
/// (0 = unconditional baseline, 1 = the raw reference, k > 1 adds augmented
/// copies) and aggregate both fidelity proxies. Deterministic given `g.seed`.
pub fn evaluate(
    base: &UNet<f32>,
    ref_unet: &UNet<f32>,
    corpus: &[Triplet],
    num_refs: usize,
    g: &GuidanceConfig,
    sched: &NoiseSchedule,
    aug: &AugmentationPolicy,
) -> Result<EvalReport> {
    aug.validate()?;
    let fp = fingerprint(base, ref_unet, num_refs, g, sched)?;
    let records: Vec<RecordEval> = threads::par_map(corpus.len(), |i| {
        let t = &corpus[i];
        let gen_seed = rng::mix(g.seed, DOMAIN_EVAL_GEN, i as u64);
        let mut refs: Vec<ImageU8> = Vec::with_capacity(num_refs);
        for j in 0..num_refs {
            if j == 0 {
                refs.push(t.reference.clone());
            } else {
                refs.push(databoot::augment_reference(
                    &t.reference,
                    aug,
                    rng::mix(gen_seed, DOMAIN_EVAL_AUG, j as u64),
                )?);
            }
        }
        let gi = GuidanceConfig { seed: gen_seed, ..g.clone() };
        let img = generate(base, ref_unet, &refs, &t.caption, &gi, sched)?;
        Ok(RecordEval {
            id: t.id.clone(),
            caption: t.caption.clone(),
            subject: subject_fidelity(&img, &t.reference, &t.mask)?,
            prompt: prompt_fidelity(&img, &t.caption)?,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(EvalReport::aggregate(records, fp))
}

#[cfg(test)]
mod tests;
