use super::*;
use crate::scheduler::{make_schedule, SamplerConfig, SamplerKind};
use crate::unet::attention::PoolingMode;
use crate::unet::MiniUNetConfig;

fn scene(seed: u64, size: usize) -> Triplet {
    let spec = databoot::sample_scene(seed);
    databoot::render_triplet(&spec, size).unwrap()
}

// -- segmentation -----------------------------------------------------------

#[test]
fn segmentation_recovers_the_exact_mask_on_clean_targets() {
    for i in 0..50u64 {
        let t = scene(rng::mix(3, 0x5E6, i), 32);
        let fg = segment_foreground(&t.target).unwrap();
        let fm = mask_foreground(&t.mask).unwrap();
        assert_eq!(fg.mask, fm.mask, "segmentation mismatch on scene {i}");
    }
}

#[test]
fn segmentation_ignores_backgrounds_and_white() {
    let t = scene(rng::mix(4, 0x5E6, 0), 32);
    let fg = segment_foreground(&t.reference).unwrap();
    // the reference is the subject on white: foreground = non-white pixels
    for y in 0..32 {
        for x in 0..32 {
            let white = (t.reference.get(x, y, 0), t.reference.get(x, y, 1), t.reference.get(x, y, 2))
                == (255, 255, 255);
            assert_eq!(fg.at(x, y), !white);
        }
    }
}

// -- shape templates --------------------------------------------------------

#[test]
fn shape_classifier_recovers_every_kind_from_masks() {
    let mut seen = std::collections::HashSet::new();
    for i in 0..200u64 {
        let spec = databoot::sample_scene(rng::mix(9, 0x5E7, i));
        let t = databoot::render_triplet(&spec, 32).unwrap();
        let fm = mask_foreground(&t.mask).unwrap();
        let (kind, score) = classify_shape(&fm).unwrap();
        assert_eq!(kind, spec.shape, "scene {i}: classified {kind:?} expected {:?}", spec.shape);
        assert!(score > 0.8, "scene {i}: low self-correlation {score}");
        seen.insert(format!("{:?}", spec.shape));
    }
    assert_eq!(seen.len(), 6, "all shape kinds should appear in 200 draws");
}

#[test]
fn shape_match_is_zero_on_empty_foreground() {
    let fg = Foreground { width: 8, height: 8, mask: vec![false; 64], count: 0 };
    assert_eq!(shape_match(&fg, ShapeKind::Circle), 0.0);
    assert!(classify_shape(&fg).is_none());
}

// -- subject fidelity -------------------------------------------------------

#[test]
fn self_match_scores_near_one() {
    for i in 0..50u64 {
        let t = scene(rng::mix(5, 0x5E6, i), 32);
        let s = subject_fidelity(&t.target, &t.reference, &t.mask).unwrap();
        assert!(s.score >= 0.95, "scene {i}: self-match score {}", s.score);
        assert!(!s.no_foreground);
    }
}

#[test]
fn recolored_foreground_scores_at_most_half() {
    let spec = databoot::sample_scene(rng::mix(6, 0x5E6, 3));
    let t = databoot::render_triplet(&spec, 32).unwrap();
    let other = (spec.color + 4) % SUBJECT_COLORS.len();
    let mut recolored = t.target.clone();
    for y in 0..32 {
        for x in 0..32 {
            if t.mask.get(x, y, 0) > 0 {
                let (r, g, b) = SUBJECT_COLORS[other];
                recolored.set(x, y, 0, r);
                recolored.set(x, y, 1, g);
                recolored.set(x, y, 2, b);
            }
        }
    }
    let s = subject_fidelity(&recolored, &t.reference, &t.mask).unwrap();
    assert!(s.score <= 0.5, "recolored score {}", s.score);
    assert_eq!(s.color_score, 0.0);
    assert!(s.shape_score > 0.9, "shape should still match: {}", s.shape_score);
}

#[test]
fn white_image_scores_zero_with_the_flag() {
    let t = scene(rng::mix(7, 0x5E6, 1), 32);
    let white = ImageU8::new(32, 32, 3, 255);
    let s = subject_fidelity(&white, &t.reference, &t.mask).unwrap();
    assert_eq!(s.score, 0.0);
    assert!(s.no_foreground);
}

#[test]
fn subject_fidelity_ignores_the_generated_background() {
    let t = scene(rng::mix(8, 0x5E6, 2), 32);
    let s0 = subject_fidelity(&t.target, &t.reference, &t.mask).unwrap();
    let fg = segment_foreground(&t.target).unwrap();
    let mut repainted = t.target.clone();
    for y in 0..32 {
        for x in 0..32 {
            if !fg.at(x, y) {
                let (r, g, b) = databoot::background_pixel(BackgroundKind::Checker, 4, x, y, 32);
                repainted.set(x, y, 0, r);
                repainted.set(x, y, 1, g);
                repainted.set(x, y, 2, b);
            }
        }
    }
    let s1 = subject_fidelity(&repainted, &t.reference, &t.mask).unwrap();
    assert_eq!(s0.score, s1.score, "background repaint changed the score");
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let t = scene(rng::mix(9, 0x5E6, 0), 32);
    let small = ImageU8::new(16, 16, 3, 255);
    assert!(subject_fidelity(&small, &t.reference, &t.mask).is_err());
}

// -- prompt fidelity --------------------------------------------------------

#[test]
fn prompt_fidelity_is_a_calibrated_oracle_on_procedural_targets() {
    let n = 1000u64;
    let perfect: usize = (0..n)
        .map(|i| {
            let t = scene(rng::mix(10, 0x5E8, i), 32);
            let p = prompt_fidelity(&t.target, &t.caption).unwrap();
            usize::from(p.score == 1.0)
        })
        .sum();
    assert!(
        perfect as f64 >= 0.99 * n as f64,
        "only {perfect}/{n} targets score 1.0"
    );
}

#[test]
fn altered_color_token_zeroes_the_color_attribute() {
    let t = scene(rng::mix(11, 0x5E6, 0), 32);
    let attrs = CaptionAttrs::decode(&t.caption).unwrap();
    let wrong = CaptionAttrs { color: (attrs.color + 1) % SUBJECT_COLORS.len(), ..attrs };
    let p = prompt_fidelity(&t.target, &wrong.encode()).unwrap();
    assert_eq!(p.color, 0.0);
    assert_eq!(p.shape, 1.0);
}

#[test]
fn all_attribute_mismatch_scores_zero() {
    let t = scene(rng::mix(12, 0x5E6, 0), 32);
    let attrs = CaptionAttrs::decode(&t.caption).unwrap();
    let shape_idx = SHAPE_KINDS.iter().position(|k| *k == attrs.shape).unwrap();
    let rel_idx = databoot::RELATIONS
        .iter()
        .position(|r| *r == attrs.relation)
        .unwrap();
    let bg_idx = BACKGROUND_KINDS
        .iter()
        .position(|b| *b == attrs.background)
        .unwrap();
    let wrong = CaptionAttrs {
        color: (attrs.color + 1) % SUBJECT_COLORS.len(),
        shape: SHAPE_KINDS[(shape_idx + 1) % SHAPE_KINDS.len()],
        relation: databoot::RELATIONS[(rel_idx + 1) % databoot::RELATIONS.len()],
        background: BACKGROUND_KINDS[(bg_idx + 1) % BACKGROUND_KINDS.len()],
    };
    let p = prompt_fidelity(&t.target, &wrong.encode()).unwrap();
    assert_eq!(p.score, 0.0);
}

#[test]
fn undecodable_caption_is_a_config_error() {
    let t = scene(rng::mix(13, 0x5E6, 0), 32);
    let err = prompt_fidelity(&t.target, &[0, 0, 0, 0]).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "got {err:?}");
}

// -- held-out corpus --------------------------------------------------------

#[test]
fn heldout_scene_ids_are_disjoint_from_training_records() {
    let held = heldout_scenes(64, 7, 16).unwrap();
    let train_ids: std::collections::HashSet<String> = (0..5000u64)
        .map(|i| format!("s{:016x}", databoot::record_seed(7, i)))
        .collect();
    for t in &held {
        assert!(!train_ids.contains(&t.id), "held-out id {} collides", t.id);
    }
}

#[test]
fn heldout_scenes_are_reproducible() {
    let a = heldout_scenes(4, 21, 16).unwrap();
    let b = heldout_scenes(4, 21, 16).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x, y);
    }
}

// -- evaluate ---------------------------------------------------------------

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

fn tiny_model(seed: u64) -> UNet<f32> {
    let mut m = UNet::<f32>::init(tiny_cfg(), seed).unwrap();
    let mut r = rng::derived(seed, 0xF1, 0);
    let n = m.params.get("final.conv.w").unwrap().numel();
    let w: Vec<f32> = (0..n).map(|_| 0.1 * rng::normal_f64(&mut r) as f32).collect();
    m.params.set_data("final.conv.w", w).unwrap();
    m
}

fn tiny_guidance() -> GuidanceConfig {
    GuidanceConfig {
        eta_img: 5.0,
        eta_text_img: 7.5,
        sampler: SamplerConfig { kind: SamplerKind::Ddim, steps: 4, eta: 0.0 },
        pooling: PoolingMode::Softmax,
        seed: 11,
    }
}

#[test]
fn empty_corpus_gives_an_empty_report() {
    let m = tiny_model(1);
    let r = m.clone_weights();
    let sched = make_schedule(100, 1e-4, 0.02).unwrap();
    let rep = evaluate(&m, &r, &[], 1, &tiny_guidance(), &sched, &AugmentationPolicy::default())
        .unwrap();
    assert!(rep.records.is_empty());
    assert_eq!(rep.subject_fidelity, 0.0);
    assert_eq!(rep.prompt_fidelity, 0.0);
}

#[test]
fn evaluate_is_deterministic_and_reports_round_trip() {
    let m = tiny_model(2);
    let rm = m.clone_weights();
    let sched = make_schedule(100, 1e-4, 0.02).unwrap();
    let corpus = heldout_scenes(3, 5, 16).unwrap();
    let g = tiny_guidance();
    let aug = AugmentationPolicy::default();
    let a = evaluate(&m, &rm, &corpus, 2, &g, &sched, &aug).unwrap();
    let b = evaluate(&m, &rm, &corpus, 2, &g, &sched, &aug).unwrap();
    assert_eq!(a.subject_fidelity, b.subject_fidelity);
    assert_eq!(a.prompt_fidelity, b.prompt_fidelity);
    assert_eq!(a.fingerprint, b.fingerprint);
    for r in &a.records {
        assert!(r.subject.score >= 0.0 && r.subject.score <= 1.0);
        assert!(r.prompt.score >= 0.0 && r.prompt.score <= 1.0);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.jsonl");
    a.save(&path).unwrap();
    let loaded = EvalReport::load(&path).unwrap();
    assert_eq!(loaded.fingerprint, a.fingerprint);
    assert_eq!(loaded.records.len(), a.records.len());
    assert!((loaded.subject_fidelity - a.subject_fidelity).abs() < 1e-12);
    let table = a.table();
    assert!(table.contains("mean subject_fidelity"));
    assert!(table.lines().count() >= 2 + a.records.len());
}

#[test]
fn fingerprint_tracks_models_and_settings() {
    let m = tiny_model(3);
    let rm = m.clone_weights();
    let sched = make_schedule(100, 1e-4, 0.02).unwrap();
    let corpus = heldout_scenes(1, 6, 16).unwrap();
    let g = tiny_guidance();
    let aug = AugmentationPolicy::default();
    let a = evaluate(&m, &rm, &corpus, 1, &g, &sched, &aug).unwrap();
    let b = evaluate(&m, &rm, &corpus, 2, &g, &sched, &aug).unwrap();
    assert_ne!(a.fingerprint, b.fingerprint, "num_refs must enter the fingerprint");
    let other = tiny_model(4);
    let c = evaluate(&other, &rm, &corpus, 1, &g, &sched, &aug).unwrap();
    assert_ne!(a.fingerprint, c.fingerprint, "weights must enter the fingerprint");
}

#[test]
fn ground_truth_targets_hit_the_oracle_bound() {
    // Score stored targets as if they were generations: both aggregates must
    // clear 0.95, the upper-bound sanity check for the proxies.
    let corpus = heldout_scenes(32, 9, 32).unwrap();
    let mut subj = 0.0;
    let mut prom = 0.0;
    for t in &corpus {
        subj += subject_fidelity(&t.target, &t.reference, &t.mask).unwrap().score;
        prom += prompt_fidelity(&t.target, &t.caption).unwrap().score;
    }
    let n = corpus.len() as f64;
    assert!(subj / n >= 0.95, "subject oracle bound: {}", subj / n);
    assert!(prom / n >= 0.95, "prompt oracle bound: {}", prom / n);
}
