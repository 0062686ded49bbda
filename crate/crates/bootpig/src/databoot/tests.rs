use super::*;

fn dist2(a: (u8, u8, u8), b: (u8, u8, u8)) -> f64 {
    let d = |x: u8, y: u8| (x as f64 - y as f64) / 255.0;
    let (dr, dg, db) = (d(a.0, b.0), d(a.1, b.1), d(a.2, b.2));
    (dr * dr + dg * dg + db * db).sqrt()
}

fn pixel(img: &ImageU8, x: usize, y: usize) -> (u8, u8, u8) {
    (img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2))
}

// --- palette geometry -----------------------------------------------------

#[test]
fn background_tones_stay_off_the_subject_palette() {
    // Foreground detection is "nearest palette color within 0.25"; every
    // pixel a background can produce must miss that test for every subject.
    let mut bg_pixels: Vec<(u8, u8, u8)> = BACKGROUND_COLORS.to_vec();
    bg_pixels.push(BACKGROUND_SECONDARY);
    bg_pixels.push(WHITE);
    // gradient blends of base and secondary
    for base in BACKGROUND_COLORS {
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let mix = |a: u8, b: u8| (a as f64 + t * (b as f64 - a as f64)).round() as u8;
            bg_pixels.push((
                mix(base.0, BACKGROUND_SECONDARY.0),
                mix(base.1, BACKGROUND_SECONDARY.1),
                mix(base.2, BACKGROUND_SECONDARY.2),
            ));
        }
    }
    for bg in &bg_pixels {
        for fg in &SUBJECT_COLORS {
            assert!(
                dist2(*bg, *fg) > 0.25,
                "background {bg:?} too close to subject {fg:?}"
            );
        }
    }
}

#[test]
fn textured_fill_stays_near_its_base_color() {
    for color in 0..SUBJECT_COLORS.len() {
        let spec = SceneSpec {
            shape: ShapeKind::Square,
            color,
            textured: true,
            cx: 0.5,
            cy: 0.5,
            scale: 0.4,
            background: BackgroundKind::Flat,
            bg_color: 0,
            seed: 0,
        };
        // stripes hit rows with dy mod 4 in {2, 3}
        let dark = subject_rgb(&spec, 0, 2);
        let base = SUBJECT_COLORS[color];
        assert!(dist2(dark, base) < 0.25, "stripe tone drifts off palette for color {color}");
        // and it is still nearer its own palette entry than any other
        for (other, &oc) in SUBJECT_COLORS.iter().enumerate() {
            if other != color {
                assert!(dist2(dark, oc) > dist2(dark, base));
            }
        }
    }
}

// --- vocabulary -----------------------------------------------------------

#[test]
fn caption_tokens_round_trip_and_cover_the_vocab() {
    assert_eq!(vocab::SIZE, 23);
    let mut seen = vec![false; vocab::SIZE];
    seen[0] = true; // BOS is reserved, never emitted by captions
    for color in 0..SUBJECT_COLORS.len() {
        for &shape in &SHAPE_KINDS {
            for &relation in &RELATIONS {
                for &background in &BACKGROUND_KINDS {
                    let attrs = CaptionAttrs { color, shape, relation, background };
                    let toks = attrs.encode();
                    assert_eq!(toks.len(), 4);
                    for &t in &toks {
                        assert!(t >= 1 && t < vocab::SIZE);
                        seen[t] = true;
                    }
                    assert_eq!(CaptionAttrs::decode(&toks).unwrap(), attrs);
                }
            }
        }
    }
    assert!(seen.iter().all(|&s| s), "some vocab slots are unreachable");
}

#[test]
fn caption_decode_rejects_malformed_token_lists() {
    let good = CaptionAttrs {
        color: 0,
        shape: ShapeKind::Circle,
        relation: Relation::Center,
        background: BackgroundKind::Flat,
    }
    .encode();
    assert!(CaptionAttrs::decode(&good[..3]).is_err());
    let mut swapped = good.clone();
    swapped.swap(0, 1); // shape token in the color slot
    assert!(CaptionAttrs::decode(&swapped).is_err());
    let mut oob = good;
    oob[3] = vocab::SIZE;
    assert!(CaptionAttrs::decode(&oob).is_err());
}

#[test]
fn describe_is_readable() {
    let attrs = CaptionAttrs {
        color: 2,
        shape: ShapeKind::Ring,
        relation: Relation::Left,
        background: BackgroundKind::Checker,
    };
    assert_eq!(attrs.describe(), "a blue ring on the left on a checker background");
}

// --- scene sampling and rendering ----------------------------------------

#[test]
fn sample_scene_is_deterministic() {
    assert_eq!(sample_scene(42), sample_scene(42));
    assert_ne!(sample_scene(42), sample_scene(43));
}

#[test]
fn mask_area_fraction_stays_in_bounds() {
    for i in 0..1000u64 {
        let spec = sample_scene(record_seed(11, i));
        let t = render_triplet(&spec, 32).unwrap();
        let fg = t.mask.data.iter().filter(|&&v| v > 0).count();
        let frac = fg as f64 / (32.0 * 32.0);
        assert!(
            (0.02..=0.40).contains(&frac),
            "mask fraction {frac:.4} out of bounds for spec {spec:?}"
        );
    }
}

#[test]
fn target_foreground_matches_reference_under_shift() {
    for i in 0..50u64 {
        let spec = sample_scene(record_seed(5, i));
        let s = 32usize;
        let t = render_triplet(&spec, s).unwrap();
        let cx = (spec.cx * s as f64 - 0.5).round() as i64;
        let cy = (spec.cy * s as f64 - 0.5).round() as i64;
        let c = (s / 2) as i64;
        let mut fg = 0usize;
        for y in 0..s {
            for x in 0..s {
                if t.mask.get(x, y, 0) > 0 {
                    fg += 1;
                    let rx = (x as i64 - cx + c) as usize;
                    let ry = (y as i64 - cy + c) as usize;
                    assert_eq!(
                        pixel(&t.target, x, y),
                        pixel(&t.reference, rx, ry),
                        "foreground mismatch at ({x},{y}) for spec {i}"
                    );
                }
            }
        }
        assert!(fg > 0);
    }
}

#[test]
fn reference_background_is_white_and_target_background_off_mask_is_background() {
    let spec = sample_scene(record_seed(5, 3));
    let s = 32usize;
    let t = render_triplet(&spec, s).unwrap();
    let cx = (spec.cx * s as f64 - 0.5).round() as i64;
    let cy = (spec.cy * s as f64 - 0.5).round() as i64;
    let c = (s / 2) as i64;
    for y in 0..s {
        for x in 0..s {
            // reference pixel is white iff the shifted mask is off there
            let tx = x as i64 - c + cx;
            let ty = y as i64 - c + cy;
            let on = tx >= 0
                && ty >= 0
                && tx < s as i64
                && ty < s as i64
                && t.mask.get(tx as usize, ty as usize, 0) > 0;
            if !on {
                assert_eq!(pixel(&t.reference, x, y), WHITE);
            }
            if t.mask.get(x, y, 0) == 0 {
                assert_eq!(pixel(&t.target, x, y), background_rgb(&spec, x, y, s));
            }
        }
    }
}

#[test]
fn caption_attributes_are_recoverable_from_pixels() {
    for i in 0..200u64 {
        let spec = sample_scene(record_seed(9, i));
        let s = 32usize;
        let t = render_triplet(&spec, s).unwrap();
        let attrs = CaptionAttrs::decode(&t.caption).unwrap();
        assert_eq!(attrs.color, spec.color);
        assert_eq!(attrs.shape, spec.shape);
        assert_eq!(attrs.background, spec.background);
        // every mask pixel is nearest to the stated subject color, within 0.25
        let stated = SUBJECT_COLORS[attrs.color];
        for y in 0..s {
            for x in 0..s {
                if t.mask.get(x, y, 0) > 0 {
                    let p = pixel(&t.target, x, y);
                    assert!(dist2(p, stated) < 0.25);
                    for &other in &SUBJECT_COLORS {
                        if other != stated {
                            assert!(dist2(p, other) >= dist2(p, stated));
                        }
                    }
                }
            }
        }
        // relation token matches the mask centroid's bucket
        let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0.0f64);
        for y in 0..s {
            for x in 0..s {
                if t.mask.get(x, y, 0) > 0 {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        let centroid_rel = relation_of(sx / n / s as f64, sy / n / s as f64);
        assert_eq!(attrs.relation, centroid_rel, "relation mismatch for spec {i}");
    }
}

#[test]
fn shape_and_color_frequencies_are_near_uniform() {
    let n = 10_000u64;
    let mut shapes = [0usize; SHAPE_KINDS.len()];
    let mut colors = [0usize; SUBJECT_COLORS.len()];
    for i in 0..n {
        let spec = sample_scene(record_seed(77, i));
        shapes[SHAPE_KINDS.iter().position(|&k| k == spec.shape).unwrap()] += 1;
        colors[spec.color] += 1;
    }
    for &c in &shapes {
        let expect = n as f64 / SHAPE_KINDS.len() as f64;
        assert!((c as f64 - expect).abs() < 0.2 * expect, "shape count {c} vs {expect}");
    }
    for &c in &colors {
        let expect = n as f64 / SUBJECT_COLORS.len() as f64;
        assert!((c as f64 - expect).abs() < 0.2 * expect, "color count {c} vs {expect}");
    }
}

#[test]
fn foreground_pixel_count_scales_with_area() {
    let spec = SceneSpec {
        shape: ShapeKind::Circle,
        color: 0,
        textured: false,
        cx: 0.5,
        cy: 0.5,
        scale: 0.4,
        background: BackgroundKind::Flat,
        bg_color: 0,
        seed: 0,
    };
    let count = |size: usize| {
        render_triplet(&spec, size)
            .unwrap()
            .mask
            .data
            .iter()
            .filter(|&&v| v > 0)
            .count() as f64
    };
    let (a32, a64) = (count(32), count(64));
    // doubling the render size quadruples the pixel area
    assert!((a64 / a32 - 4.0).abs() < 0.4, "a64/a32 = {}", a64 / a32);
}

#[test]
fn render_rejects_tiny_sizes() {
    let spec = sample_scene(1);
    assert!(render_triplet(&spec, 8).is_err());
}

#[test]
fn relation_buckets() {
    assert_eq!(relation_of(0.5, 0.5), Relation::Center);
    assert_eq!(relation_of(0.6, 0.55), Relation::Center);
    assert_eq!(relation_of(0.2, 0.5), Relation::Left);
    assert_eq!(relation_of(0.9, 0.45), Relation::Right);
    assert_eq!(relation_of(0.55, 0.1), Relation::Top);
    assert_eq!(relation_of(0.45, 0.9), Relation::Bottom);
}

// --- augmentation ---------------------------------------------------------

#[test]
fn identity_policy_reproduces_the_reference() {
    let spec = sample_scene(record_seed(3, 0));
    let t = render_triplet(&spec, 32).unwrap();
    let out = augment_reference(&t.reference, &AugmentationPolicy::identity(), 123).unwrap();
    assert_eq!(out, t.reference);
}

#[test]
fn flip_only_policy_is_an_involution() {
    let spec = sample_scene(record_seed(3, 1));
    let t = render_triplet(&spec, 32).unwrap();
    let policy = AugmentationPolicy { flip_prob: 1.0, scale_lo: 1.0, scale_hi: 1.0, jitter: 0.0 };
    let once = augment_reference(&t.reference, &policy, 7).unwrap();
    let twice = augment_reference(&once, &policy, 7).unwrap();
    assert_ne!(once, t.reference); // sampled scenes are not mirror-symmetric
    assert_eq!(twice, t.reference);
}

#[test]
fn augmentation_is_deterministic_and_seed_sensitive() {
    let spec = sample_scene(record_seed(3, 2));
    let t = render_triplet(&spec, 32).unwrap();
    let policy = AugmentationPolicy::default();
    let a = augment_reference(&t.reference, &policy, 11).unwrap();
    let b = augment_reference(&t.reference, &policy, 11).unwrap();
    assert_eq!(a, b);
    let seeds_differ =
        (0..16).any(|s| augment_reference(&t.reference, &policy, s).unwrap() != a);
    assert!(seeds_differ);
}

#[test]
fn scaled_reference_foreground_grows_roughly_quadratically() {
    let spec = SceneSpec {
        shape: ShapeKind::Square,
        color: 1,
        textured: false,
        cx: 0.5,
        cy: 0.5,
        scale: 0.35,
        background: BackgroundKind::Flat,
        bg_color: 0,
        seed: 0,
    };
    let t = render_triplet(&spec, 32).unwrap();
    let base = t.mask.data.iter().filter(|&&v| v > 0).count() as f64;
    let policy = AugmentationPolicy { flip_prob: 0.0, scale_lo: 1.3, scale_hi: 1.3, jitter: 0.0 };
    let out = augment_reference(&t.reference, &policy, 1).unwrap();
    let scaled = out
        .data
        .chunks(3)
        .filter(|px| (px[0], px[1], px[2]) != (255, 255, 255))
        .count() as f64;
    let ratio = scaled / base;
    assert!((ratio - 1.3 * 1.3).abs() < 0.17, "area ratio {ratio}");
}

#[test]
fn augmented_foreground_colors_come_from_the_subject() {
    let spec = sample_scene(record_seed(3, 4));
    let t = render_triplet(&spec, 32).unwrap();
    let out = augment_reference(&t.reference, &AugmentationPolicy::default(), 99).unwrap();
    let stated = SUBJECT_COLORS[spec.color];
    let mut fg = 0usize;
    for px in out.data.chunks(3) {
        let p = (px[0], px[1], px[2]);
        if p != WHITE {
            fg += 1;
            assert!(dist2(p, stated) < 0.25);
        }
    }
    assert!(fg > 0);
}

#[test]
fn augmentation_validates_its_policy() {
    let spec = sample_scene(record_seed(3, 5));
    let t = render_triplet(&spec, 32).unwrap();
    let bad = AugmentationPolicy { flip_prob: 1.5, ..AugmentationPolicy::default() };
    assert!(augment_reference(&t.reference, &bad, 0).is_err());
    let bad = AugmentationPolicy { scale_lo: 1.2, scale_hi: 0.8, ..AugmentationPolicy::default() };
    assert!(augment_reference(&t.reference, &bad, 0).is_err());
}

// --- corpus I/O -----------------------------------------------------------

fn file_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn write_corpus_round_trips_and_is_bit_reproducible() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let recs_a = write_corpus(12, dir_a.path(), 21, 32).unwrap();
    let recs_b = write_corpus(12, dir_b.path(), 21, 32).unwrap();
    assert_eq!(recs_a.len(), 12);
    assert_eq!(recs_a, recs_b);
    assert_eq!(
        file_bytes(&dir_a.path().join("manifest.jsonl")),
        file_bytes(&dir_b.path().join("manifest.jsonl"))
    );

    let loaded = read_manifest(dir_a.path()).unwrap();
    assert_eq!(loaded, recs_a);
    for rec in &loaded {
        // images round-trip bit-exactly, and both copies are byte-identical
        let t = read_triplet(dir_a.path(), rec).unwrap();
        assert_eq!(t.caption, rec.caption_tokens);
        let regen = render_triplet(&sample_scene(rec.spec_seed), 32).unwrap();
        assert_eq!(t.reference, regen.reference);
        assert_eq!(t.target, regen.target);
        assert_eq!(t.mask, regen.mask);
        for [pa, pb] in [
            [dir_a.path().join(&rec.r#ref), dir_b.path().join(&rec.r#ref)],
            [dir_a.path().join(&rec.target), dir_b.path().join(&rec.target)],
            [dir_a.path().join(&rec.mask), dir_b.path().join(&rec.mask)],
        ] {
            assert_eq!(file_bytes(&pa), file_bytes(&pb));
        }
    }
}

#[test]
fn different_seeds_give_different_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_corpus(4, dir.path(), 1, 32).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let b = write_corpus(4, dir2.path(), 2, 32).unwrap();
    assert_ne!(a, b);
}

#[test]
fn empty_corpus_writes_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let recs = write_corpus(0, dir.path(), 0, 32).unwrap();
    assert!(recs.is_empty());
    assert_eq!(read_manifest(dir.path()).unwrap(), vec![]);
}

#[test]
fn read_manifest_reports_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.jsonl"), b"not json\n").unwrap();
    assert!(read_manifest(dir.path()).is_err());
}

// --- ppm ------------------------------------------------------------------

#[test]
fn image_write_read_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rgb = ImageU8::new(7, 5, 3, 0);
    let mut gray = ImageU8::new(4, 6, 1, 0);
    for (i, v) in rgb.data.iter_mut().enumerate() {
        *v = (i * 37 % 256) as u8;
    }
    for (i, v) in gray.data.iter_mut().enumerate() {
        *v = (i * 11 % 256) as u8;
    }
    let p1 = dir.path().join("a.ppm");
    let p2 = dir.path().join("b.pgm");
    ppm::write_image(&p1, &rgb).unwrap();
    ppm::write_image(&p2, &gray).unwrap();
    assert_eq!(ppm::read_image(&p1).unwrap(), rgb);
    assert_eq!(ppm::read_image(&p2).unwrap(), gray);
}

#[test]
fn image_read_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ppm");
    std::fs::write(&p, b"P6\n2 2\n255\n\x00\x01").unwrap(); // truncated pixels
    assert!(ppm::read_image(&p).is_err());
    std::fs::write(&p, b"P4\n2 2\n255\n....").unwrap();
    assert!(ppm::read_image(&p).is_err());
    std::fs::write(&p, b"P6\n2 2\n127\n............").unwrap();
    assert!(ppm::read_image(&p).is_err());
}

#[test]
fn unit_mapping_round_trips_and_hits_endpoints() {
    assert_eq!(ppm::u8_to_unit(0), -1.0);
    assert_eq!(ppm::u8_to_unit(255), 1.0);
    assert_eq!(ppm::unit_to_u8(-1.0), 0);
    assert_eq!(ppm::unit_to_u8(1.0), 255);
    assert_eq!(ppm::unit_to_u8(2.0), 255); // clamped
    for v in 0..=255u8 {
        assert_eq!(ppm::unit_to_u8(ppm::u8_to_unit(v)), v);
    }
    let img = ImageU8::new(3, 2, 3, 128);
    let chw = img.to_chw_f32();
    assert_eq!(ImageU8::from_chw_f32(&chw, 3, 2, 3), img);
}
