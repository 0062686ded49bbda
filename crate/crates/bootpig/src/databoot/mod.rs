//! Procedural triplet generator: (reference image, target image, caption)
//! records with exact foreground masks, in a closed world of palette colors
//! and shape kinds so every caption attribute is recoverable from pixels.
//!
//! Rendering is integer-pixel: the subject raster depends only on offsets
//! from its center, so the reference (subject centered on white) equals the
//! target foreground under an integer shift, exactly.

pub mod ppm;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::threads;

pub use ppm::ImageU8;

// ---------------------------------------------------------------------------
// Closed-world palette and vocabulary
// ---------------------------------------------------------------------------

/// Saturated subject fill colors.
pub const SUBJECT_COLORS: [(u8, u8, u8); 8] = [
    (230, 30, 30),   // red
    (30, 200, 30),   // green
    (40, 60, 230),   // blue
    (235, 220, 40),  // yellow
    (225, 45, 225),  // magenta
    (45, 215, 215),  // cyan
    (240, 140, 30),  // orange
    (140, 50, 220),  // purple
];

pub const SUBJECT_COLOR_NAMES: [&str; 8] = [
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple",
];

/// Muted background base colors, chosen to stay far from every subject color.
pub const BACKGROUND_COLORS: [(u8, u8, u8); 5] = [
    (105, 105, 105), // gray
    (150, 130, 110), // tan
    (110, 140, 150), // slate
    (135, 150, 120), // sage
    (160, 150, 160), // mauve
];

/// Secondary tone for gradients and checkerboards.
pub const BACKGROUND_SECONDARY: (u8, u8, u8) = (200, 200, 200);

pub const WHITE: (u8, u8, u8) = (255, 255, 255);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

pub const SHAPE_KINDS: [ShapeKind; 6] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Diamond,
    ShapeKind::Ring,
    ShapeKind::Cross,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Center,
    Left,
    Right,
    Top,
    Bottom,
}

pub const RELATIONS: [Relation; 5] = [
    Relation::Center,
    Relation::Left,
    Relation::Right,
    Relation::Top,
    Relation::Bottom,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Checker,
}

pub const BACKGROUND_KINDS: [BackgroundKind; 3] = [
    BackgroundKind::Flat,
    BackgroundKind::Gradient,
    BackgroundKind::Checker,
];

/// Token layout: 0 = BOS (reserved by the model), then colors, shapes,
/// relations, background kinds. A caption is exactly four attribute tokens.
pub mod vocab {
    use super::*;

    pub const COLOR_BASE: usize = 1;
    pub const SHAPE_BASE: usize = COLOR_BASE + SUBJECT_COLORS.len(); // 9
    pub const REL_BASE: usize = SHAPE_BASE + SHAPE_KINDS.len(); // 15
    pub const BG_BASE: usize = REL_BASE + RELATIONS.len(); // 20
    pub const SIZE: usize = BG_BASE + BACKGROUND_KINDS.len(); // 23

    pub fn color_token(color: usize) -> usize {
        COLOR_BASE + color
    }

    pub fn shape_token(kind: ShapeKind) -> usize {
        SHAPE_BASE + SHAPE_KINDS.iter().position(|&k| k == kind).unwrap()
    }

    pub fn relation_token(rel: Relation) -> usize {
        REL_BASE + RELATIONS.iter().position(|&r| r == rel).unwrap()
    }

    pub fn background_token(kind: BackgroundKind) -> usize {
        BG_BASE + BACKGROUND_KINDS.iter().position(|&k| k == kind).unwrap()
    }
}

/// The four attributes a caption encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionAttrs {
    pub color: usize,
    pub shape: ShapeKind,
    pub relation: Relation,
    pub background: BackgroundKind,
}

impl CaptionAttrs {
    pub fn encode(&self) -> Vec<usize> {
        vec![
            vocab::color_token(self.color),
            vocab::shape_token(self.shape),
            vocab::relation_token(self.relation),
            vocab::background_token(self.background),
        ]
    }

    pub fn decode(tokens: &[usize]) -> Result<Self> {
        if tokens.len() != 4 {
            return Err(Error::Config(format!(
                "caption must be 4 attribute tokens, got {}",
                tokens.len()
            )));
        }
        let color = tokens[0]
            .checked_sub(vocab::COLOR_BASE)
            .filter(|&i| i < SUBJECT_COLORS.len())
            .ok_or_else(|| Error::Config(format!("token {} is not a color", tokens[0])))?;
        let shape = tokens[1]
            .checked_sub(vocab::SHAPE_BASE)
            .filter(|&i| i < SHAPE_KINDS.len())
            .map(|i| SHAPE_KINDS[i])
            .ok_or_else(|| Error::Config(format!("token {} is not a shape", tokens[1])))?;
        let relation = tokens[2]
            .checked_sub(vocab::REL_BASE)
            .filter(|&i| i < RELATIONS.len())
            .map(|i| RELATIONS[i])
            .ok_or_else(|| Error::Config(format!("token {} is not a relation", tokens[2])))?;
        let background = tokens[3]
            .checked_sub(vocab::BG_BASE)
            .filter(|&i| i < BACKGROUND_KINDS.len())
            .map(|i| BACKGROUND_KINDS[i])
            .ok_or_else(|| Error::Config(format!("token {} is not a background", tokens[3])))?;
        Ok(CaptionAttrs { color, shape, relation, background })
    }

    /// Parse four whitespace-separated attribute words, e.g.
    /// "red circle left flat"; the inverse of the vocabulary names.
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() != 4 {
            return Err(Error::Config(format!(
                "caption needs 4 words (color shape relation background), got {}",
                words.len()
            )));
        }
        let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
        let color = SUBJECT_COLOR_NAMES
            .iter()
            .position(|n| *n == lower[0])
            .ok_or_else(|| Error::Config(format!("unknown color '{}'", words[0])))?;
        let shape = SHAPE_KINDS
            .iter()
            .copied()
            .find(|k| format!("{k:?}").to_lowercase() == lower[1])
            .ok_or_else(|| Error::Config(format!("unknown shape '{}'", words[1])))?;
        let relation = RELATIONS
            .iter()
            .copied()
            .find(|r| format!("{r:?}").to_lowercase() == lower[2])
            .ok_or_else(|| Error::Config(format!("unknown relation '{}'", words[2])))?;
        let background = BACKGROUND_KINDS
            .iter()
            .copied()
            .find(|b| format!("{b:?}").to_lowercase() == lower[3])
            .ok_or_else(|| Error::Config(format!("unknown background '{}'", words[3])))?;
        Ok(CaptionAttrs { color, shape, relation, background })
    }

    /// "a <color> <shape> <relation> <background>"
    pub fn describe(&self) -> String {
        let shape = format!("{:?}", self.shape).to_lowercase();
        let rel = match self.relation {
            Relation::Center => "in the center",
            Relation::Left => "on the left",
            Relation::Right => "on the right",
            Relation::Top => "at the top",
            Relation::Bottom => "at the bottom",
        };
        let bg = match self.background {
            BackgroundKind::Flat => "on a flat background",
            BackgroundKind::Gradient => "on a gradient background",
            BackgroundKind::Checker => "on a checker background",
        };
        format!("a {} {} {} {}", SUBJECT_COLOR_NAMES[self.color], shape, rel, bg)
    }
}

// ---------------------------------------------------------------------------
// Scene sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub color: usize,
    pub textured: bool,
    /// Subject center in [0,1]^2; quantized to a pixel center at render time.
    pub cx: f64,
    pub cy: f64,
    /// Subject scale in [0.2, 0.6]; maps to a pixel radius.
    pub scale: f64,
    pub background: BackgroundKind,
    pub bg_color: usize,
    pub seed: u64,
}

const SCALE_LO: f64 = 0.2;
const SCALE_HI: f64 = 0.6;

/// Subject radius in pixels at render size `s`.
fn radius_px(scale: f64, s: usize) -> f64 {
    let t = (scale - SCALE_LO) / (SCALE_HI - SCALE_LO);
    (3.5 + t * (9.5 - 3.5)) * s as f64 / 32.0
}

/// Half-extent of the subject's bounding box, normalized; placements keep the
/// whole box inside the frame.
fn half_extent_norm(scale: f64) -> f64 {
    let r = radius_px(scale, 32);
    (1.25 * r + 1.0) / 32.0
}

const DOMAIN_SCENE: u64 = 0x5ce_e;

/// Deterministic uniform sample over the valid spec space; the placement
/// rejection rule is built in (centers are drawn from the admissible band).
pub fn sample_scene(seed: u64) -> SceneSpec {
    let mut r = rng::derived(seed, DOMAIN_SCENE, 0);
    let shape = SHAPE_KINDS[r.gen_range(0..SHAPE_KINDS.len())];
    let color = r.gen_range(0..SUBJECT_COLORS.len());
    let textured = r.gen::<f64>() < 0.3;
    let scale = SCALE_LO + (SCALE_HI - SCALE_LO) * r.gen::<f64>();
    let m = half_extent_norm(scale);
    let cx = m + (1.0 - 2.0 * m) * r.gen::<f64>();
    let cy = m + (1.0 - 2.0 * m) * r.gen::<f64>();
    let background = BACKGROUND_KINDS[r.gen_range(0..BACKGROUND_KINDS.len())];
    let bg_color = r.gen_range(0..BACKGROUND_COLORS.len());
    SceneSpec { shape, color, textured, cx, cy, scale, background, bg_color, seed }
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

/// Subject membership test, relative to the integer center. Public so the
/// evaluation proxies can rasterize shape templates with the same geometry.
pub fn inside(shape: ShapeKind, dx: i64, dy: i64, r: f64) -> bool {
    let (fx, fy) = (dx as f64, dy as f64);
    match shape {
        ShapeKind::Circle => fx * fx + fy * fy <= r * r,
        ShapeKind::Square => {
            let a = 0.9 * r;
            fx.abs() <= a && fy.abs() <= a
        }
        ShapeKind::Triangle => {
            // upward triangle: apex at -r, base at +r, base half-width 1.1 r
            fy >= -r && fy <= r && fx.abs() <= 1.1 * r * (fy + r) / (2.0 * r)
        }
        ShapeKind::Diamond => fx.abs() + fy.abs() <= 1.2 * r,
        ShapeKind::Ring => {
            let d2 = fx * fx + fy * fy;
            d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
        }
        ShapeKind::Cross => {
            let a = 0.35 * r;
            (fx.abs() <= a && fy.abs() <= r) || (fy.abs() <= a && fx.abs() <= r)
        }
    }
}

/// Subject fill at offset (dx, dy): texture darkens alternating stripes but
/// keeps the pixel nearest to its base palette color.
fn subject_rgb(spec: &SceneSpec, _dx: i64, dy: i64) -> (u8, u8, u8) {
    let (r, g, b) = SUBJECT_COLORS[spec.color];
    if spec.textured && dy.rem_euclid(4) >= 2 {
        // mild darkening: stripes must stay nearest their own palette entry
        let dk = |v: u8| (v as f64 * 0.85) as u8;
        (dk(r), dk(g), dk(b))
    } else {
        (r, g, b)
    }
}

fn background_rgb(spec: &SceneSpec, x: usize, y: usize, s: usize) -> (u8, u8, u8) {
    background_pixel(spec.background, spec.bg_color, x, y, s)
}

/// Background color at `(x, y)` for a kind/base-color combination. Public so
/// the evaluation proxies can classify backgrounds by exact re-rendering.
pub fn background_pixel(
    kind: BackgroundKind,
    bg_color: usize,
    x: usize,
    y: usize,
    s: usize,
) -> (u8, u8, u8) {
    let base = BACKGROUND_COLORS[bg_color];
    let sec = BACKGROUND_SECONDARY;
    match kind {
        BackgroundKind::Flat => base,
        BackgroundKind::Gradient => {
            // vertical blend base -> secondary
            let t = y as f64 / (s - 1) as f64;
            let mix = |a: u8, b: u8| (a as f64 + t * (b as f64 - a as f64)).round() as u8;
            (mix(base.0, sec.0), mix(base.1, sec.1), mix(base.2, sec.2))
        }
        BackgroundKind::Checker => {
            let cell = (s / 4).max(1);
            if ((x / cell) + (y / cell)) % 2 == 0 {
                base
            } else {
                sec
            }
        }
    }
}

/// Relation bucket of a normalized center position.
pub fn relation_of(cx: f64, cy: f64) -> Relation {
    let (dx, dy) = (cx - 0.5, cy - 0.5);
    if dx.abs() <= 0.15 && dy.abs() <= 0.15 {
        Relation::Center
    } else if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            Relation::Left
        } else {
            Relation::Right
        }
    } else if dy < 0.0 {
        Relation::Top
    } else {
        Relation::Bottom
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub reference: ImageU8,
    pub target: ImageU8,
    pub mask: ImageU8,
    pub caption: Vec<usize>,
    pub id: String,
}

fn set_rgb(img: &mut ImageU8, x: usize, y: usize, (r, g, b): (u8, u8, u8)) {
    img.set(x, y, 0, r);
    img.set(x, y, 1, g);
    img.set(x, y, 2, b);
}

/// Render one triplet at `size` x `size` pixels.
pub fn render_triplet(spec: &SceneSpec, size: usize) -> Result<Triplet> {
    if size < 16 {
        return Err(Error::Config(format!("render size {size} too small")));
    }
    let s = size;
    let r = radius_px(spec.scale, s);
    let cx = (spec.cx * s as f64 - 0.5).round() as i64;
    let cy = (spec.cy * s as f64 - 0.5).round() as i64;
    let ref_c = (s / 2) as i64;

    let mut target = ImageU8::new(s, s, 3, 0);
    let mut reference = ImageU8::new(s, s, 3, 255);
    let mut mask = ImageU8::new(s, s, 1, 0);

    for y in 0..s {
        for x in 0..s {
            set_rgb(&mut target, x, y, background_rgb(spec, x, y, s));
        }
    }
    // Paint the identical offset raster at the target placement and at the
    // canonical centered placement, so the two foregrounds agree exactly.
    let ext = (1.25 * r).ceil() as i64 + 1;
    for dy in -ext..=ext {
        for dx in -ext..=ext {
            if !inside(spec.shape, dx, dy, r) {
                continue;
            }
            let rgb = subject_rgb(spec, dx, dy);
            let (tx, ty) = (cx + dx, cy + dy);
            if tx < 0 || ty < 0 || tx >= s as i64 || ty >= s as i64 {
                return Err(Error::Config(format!(
                    "subject leaves the frame at ({tx}, {ty}); invalid spec placement"
                )));
            }
            set_rgb(&mut target, tx as usize, ty as usize, rgb);
            mask.set(tx as usize, ty as usize, 0, 255);
            let (rx, ry) = ((ref_c + dx) as usize, (ref_c + dy) as usize);
            set_rgb(&mut reference, rx, ry, rgb);
        }
    }

    // The relation token describes what the pixels show: bucket the mask
    // centroid, not the nominal center (asymmetric shapes shift the mass).
    let (mut mx, mut my, mut mn) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..s {
        for x in 0..s {
            if mask.get(x, y, 0) > 0 {
                mx += x as f64 + 0.5;
                my += y as f64 + 0.5;
                mn += 1.0;
            }
        }
    }
    let attrs = CaptionAttrs {
        color: spec.color,
        shape: spec.shape,
        relation: relation_of(mx / mn / s as f64, my / mn / s as f64),
        background: spec.background,
    };
    Ok(Triplet {
        reference,
        target,
        mask,
        caption: attrs.encode(),
        id: format!("s{:016x}", spec.seed),
    })
}

// ---------------------------------------------------------------------------
// Reference augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub flip_prob: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Max absolute translation as a fraction of the image size.
    pub jitter: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy { flip_prob: 0.5, scale_lo: 0.7, scale_hi: 1.3, jitter: 0.2 }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy { flip_prob: 0.0, scale_lo: 1.0, scale_hi: 1.0, jitter: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0,1]", self.flip_prob)));
        }
        if !(0.5..=1.5).contains(&self.scale_lo)
            || !(0.5..=1.5).contains(&self.scale_hi)
            || self.scale_lo > self.scale_hi
        {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must lie inside [0.5, 1.5]",
                self.scale_lo, self.scale_hi
            )));
        }
        if !(0.0..=0.5).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter {} outside [0, 0.5]", self.jitter)));
        }
        Ok(())
    }
}

const DOMAIN_AUG: u64 = 0xA06;

/// Flip / rescale / translate the reference foreground and re-composite on
/// white. The foreground is every non-white pixel, which is exact because
/// white is excluded from the subject palette. Deterministic given the seed;
/// if jitter pushes the foreground fully out of frame, new jitter is drawn
/// (bounded retries), then identity.
pub fn augment_reference(
    reference: &ImageU8,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<ImageU8> {
    policy.validate()?;
    if reference.channels != 3 {
        return Err(Error::shape("augment_reference", "reference must be RGB"));
    }
    let s = reference.width;
    let is_fg = |x: usize, y: usize| {
        (reference.get(x, y, 0), reference.get(x, y, 1), reference.get(x, y, 2)) != WHITE
    };
    let mut r = rng::derived(seed, DOMAIN_AUG, 0);
    let flip = r.gen::<f64>() < policy.flip_prob;
    let scale = policy.scale_lo + (policy.scale_hi - policy.scale_lo) * r.gen::<f64>();
    let c = (s as f64 - 1.0) / 2.0;

    // The reference subject is centered, so the centered affine map keeps it
    // near the middle; jitter then shifts it.
    for _attempt in 0..8 {
        let jx = ((2.0 * r.gen::<f64>() - 1.0) * policy.jitter * s as f64).round() as i64;
        let jy = ((2.0 * r.gen::<f64>() - 1.0) * policy.jitter * s as f64).round() as i64;
        let mut out = ImageU8::new(s, s, 3, 255);
        let mut fg = 0usize;
        for y in 0..s {
            for x in 0..s {
                // inverse map: output pixel -> source pixel
                let mut sx = c + ((x as i64 - jx) as f64 - c) / scale;
                let sy = c + ((y as i64 - jy) as f64 - c) / scale;
                if flip {
                    sx = (s as f64 - 1.0) - sx;
                }
                let (sxi, syi) = (sx.round() as i64, sy.round() as i64);
                if sxi < 0 || syi < 0 || sxi >= s as i64 || syi >= s as i64 {
                    continue;
                }
                let (sxi, syi) = (sxi as usize, syi as usize);
                if is_fg(sxi, syi) {
                    for ch in 0..3 {
                        out.set(x, y, ch, reference.get(sxi, syi, ch));
                    }
                    fg += 1;
                }
            }
        }
        if fg > 0 {
            return Ok(out);
        }
    }
    Ok(reference.clone())
}

// ---------------------------------------------------------------------------
// Corpus I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub caption_tokens: Vec<usize>,
    pub r#ref: String,
    pub target: String,
    pub mask: String,
    pub spec_seed: u64,
}

const DOMAIN_CORPUS: u64 = 0xC0_45;

/// Per-record spec seed for corpus `seed`, record `index`.
pub fn record_seed(seed: u64, index: u64) -> u64 {
    rng::mix(seed, DOMAIN_CORPUS, index)
}

/// Render and write `n` triplets plus `manifest.jsonl`. Regeneration with the
/// same arguments is bit-identical; records render in parallel but the
/// manifest order is by index.
pub fn write_corpus(n: usize, out_dir: &Path, seed: u64, size: usize) -> Result<Vec<ManifestRecord>> {
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let records: Vec<Result<ManifestRecord>> = threads::par_map(n, |i| {
        let spec = sample_scene(record_seed(seed, i as u64));
        let t = render_triplet(&spec, size)?;
        let ref_rel = format!("images/{}_ref.ppm", t.id);
        let tgt_rel = format!("images/{}_tgt.ppm", t.id);
        let mask_rel = format!("images/{}_mask.pgm", t.id);
        ppm::write_image(&out_dir.join(&ref_rel), &t.reference)?;
        ppm::write_image(&out_dir.join(&tgt_rel), &t.target)?;
        ppm::write_image(&out_dir.join(&mask_rel), &t.mask)?;
        Ok(ManifestRecord {
            id: t.id,
            caption_tokens: t.caption,
            r#ref: ref_rel,
            target: tgt_rel,
            mask: mask_rel,
            spec_seed: spec.seed,
        })
    });
    let records: Vec<ManifestRecord> = records.into_iter().collect::<Result<_>>()?;

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut f = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for rec in &records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join("manifest.jsonl");
    let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("manifest line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Load the three images of one manifest record.
pub fn read_triplet(dir: &Path, rec: &ManifestRecord) -> Result<Triplet> {
    Ok(Triplet {
        reference: ppm::read_image(&dir.join(&rec.r#ref))?,
        target: ppm::read_image(&dir.join(&rec.target))?,
        mask: ppm::read_image(&dir.join(&rec.mask))?,
        caption: rec.caption_tokens.clone(),
        id: rec.id.clone(),
    })
}

pub fn manifest_paths(dir: &Path, rec: &ManifestRecord) -> [PathBuf; 3] {
    [dir.join(&rec.r#ref), dir.join(&rec.target), dir.join(&rec.mask)]
}

#[cfg(test)]
mod tests;
