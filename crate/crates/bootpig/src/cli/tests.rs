use super::*;
use std::path::Path;

fn sha(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["bootpig"];
    full.extend_from_slice(args);
    run_from(full)
}

/// Tiny-topology overrides shared by the pipeline tests.
fn tiny_sets(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "model.image_size=16",
        "model.base_width=4",
        "model.channel_mults=1,2",
        "model.attention_resolutions=8",
        "model.text_width=8",
        "model.time_width=8",
        "model.norm_groups=2",
        "model.max_caption_len=6",
        "train.batch=4",
        "train.steps=2",
        "train.checkpoint_every=2",
        "data.num_triplets=8",
        "guidance.steps=4",
    ]
    .iter()
    .flat_map(|kv| ["--set".to_string(), kv.to_string()])
    .collect();
    for kv in extra {
        v.push("--set".to_string());
        v.push(kv.to_string());
    }
    v
}

fn run_tiny(args: &[&str], extra_sets: &[&str]) -> i32 {
    let sets = tiny_sets(extra_sets);
    let mut full: Vec<&str> = args.to_vec();
    for s in &sets {
        full.push(s);
    }
    run(&full)
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(run(&["no-such-command"]), 1);
    assert_eq!(run(&["bootstrap"]), 1); // missing --out
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["bootstrap", "--out", "x", "--set", "nonsense"]), 2);
    assert_eq!(
        run(&["bootstrap", "--out", "x", "--preset", "unknown"]),
        2,
        "unknown preset is a runtime config failure"
    );
}

#[test]
fn bootstrap_writes_a_manifest_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let outs = out.to_str().unwrap();
    assert_eq!(run_tiny(&["bootstrap", "--out", outs, "--n", "5"], &[]), 0);
    let manifest = out.join("manifest.jsonl");
    let lines = std::fs::read_to_string(&manifest).unwrap().lines().count();
    assert_eq!(lines, 5);
    assert!(out.join("run.config").exists(), "resolved config must be logged");

    let first = sha(&manifest);
    assert_eq!(run_tiny(&["bootstrap", "--out", outs, "--n", "5"], &[]), 0);
    assert_eq!(sha(&manifest), first, "rerun must be bit-identical");
}

#[test]
fn unwritable_bootstrap_path_fails_with_the_path_in_the_message() {
    let code = run_tiny(&["bootstrap", "--out", "/proc/nope/data", "--n", "2"], &[]);
    assert_eq!(code, 2);
}

#[test]
fn full_pipeline_pretrain_train_generate_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let datas = data.to_str().unwrap().to_string();
    assert_eq!(run_tiny(&["bootstrap", "--out", &datas, "--n", "8"], &[]), 0);

    // --steps 0 emits just the initialization checkpoint
    let pre0 = dir.path().join("pre0");
    assert_eq!(
        run_tiny(
            &["pretrain", "--data", &datas, "--out", pre0.to_str().unwrap(), "--steps", "0"],
            &[]
        ),
        0
    );
    assert!(pre0.join("pretrain_step000000.bpig").exists());

    // train without --init names the remedy
    let ckpt = dir.path().join("ckpt");
    let ckpts = ckpt.to_str().unwrap().to_string();
    assert_eq!(run_tiny(&["train", "--data", &datas, "--out", &ckpts], &[]), 2);

    let pre = dir.path().join("pre");
    let pres = pre.to_str().unwrap().to_string();
    assert_eq!(run_tiny(&["pretrain", "--data", &datas, "--out", &pres], &[]), 0);
    let pre_ckpt = pre.join("pretrain_step000002.bpig");
    assert!(pre_ckpt.exists());
    assert!(pre.join("pretrain_stats.jsonl").exists());

    assert_eq!(
        run_tiny(
            &[
                "train",
                "--data",
                &datas,
                "--init",
                pre_ckpt.to_str().unwrap(),
                "--out",
                &ckpts,
                "--trainable-base",
                "rsa",
                "--trainable-ref",
                "all",
            ],
            &[]
        ),
        0
    );
    let bp_ckpt = ckpt.join("bootpig_step000002.bpig");
    assert!(bp_ckpt.exists());

    // generate from the trained checkpoint, bitwise reproducible per seed
    let t = databoot::render_triplet(&databoot::sample_scene(99), 16).unwrap();
    let ref_path = dir.path().join("ref.ppm");
    ppm::write_image(&ref_path, &t.reference).unwrap();
    let img_a = dir.path().join("a.ppm");
    let img_b = dir.path().join("b.ppm");
    let img_c = dir.path().join("c.ppm");
    let gen = |out: &Path, seed: &str, pooling: &str| {
        run_tiny(
            &[
                "generate",
                "--checkpoint",
                bp_ckpt.to_str().unwrap(),
                "--reference",
                ref_path.to_str().unwrap(),
                "--caption",
                "red circle left flat",
                "--out",
                out.to_str().unwrap(),
                "--seed",
                seed,
                "--pooling",
                pooling,
            ],
            &[],
        )
    };
    assert_eq!(gen(&img_a, "5", "softmax"), 0);
    assert_eq!(gen(&img_b, "5", "softmax"), 0);
    assert_eq!(sha(&img_a), sha(&img_b), "same seed must be bit-identical");
    assert_eq!(gen(&img_c, "6", "softmax"), 0);
    assert_ne!(sha(&img_a), sha(&img_c), "different seed must differ");

    // zero references is a usage error
    assert_eq!(
        run(&[
            "generate",
            "--checkpoint",
            bp_ckpt.to_str().unwrap(),
            "--caption",
            "red circle left flat",
        ]),
        1
    );

    // eval writes a readable report; a missing checkpoint is a runtime error
    let report = dir.path().join("report.jsonl");
    assert_eq!(
        run_tiny(
            &[
                "eval",
                "--checkpoint",
                bp_ckpt.to_str().unwrap(),
                "--num-scenes",
                "2",
                "--num-refs",
                "1",
                "--out",
                report.to_str().unwrap(),
            ],
            &[]
        ),
        0
    );
    let loaded = metrics::EvalReport::load(&report).unwrap();
    assert_eq!(loaded.records.len(), 2);
    assert_eq!(
        run_tiny(
            &["eval", "--checkpoint", "missing.bpig", "--num-scenes", "1", "--num-refs", "1"],
            &[]
        ),
        2
    );
}

#[test]
fn gradcheck_subcommand_passes() {
    assert_eq!(run(&["gradcheck", "--seed", "3"]), 0);
}

#[test]
fn config_file_and_overrides_resolve_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, "# comment\ntrain.batch=2\nseed=3\n").unwrap();
    let args = ConfigArgs {
        preset: "desk".into(),
        config: Some(cfg_path.clone()),
        set: vec!["train.batch=5".into()],
        seed: Some(11),
    };
    let cfg = args.resolve().unwrap();
    assert_eq!(cfg.batch, 5, "--set wins over the config file");
    assert_eq!(cfg.seed, 11, "--seed wins over everything");

    std::fs::write(&cfg_path, "no.such.key=1\n").unwrap();
    let bad = ConfigArgs {
        preset: "desk".into(),
        config: Some(cfg_path),
        set: vec![],
        seed: None,
    };
    assert!(bad.resolve().is_err(), "unknown keys must be rejected");
}

#[test]
fn paper_preset_is_exposed() {
    let args = ConfigArgs { preset: "paper".into(), config: None, set: vec![], seed: None };
    let cfg = args.resolve().unwrap();
    assert_eq!(cfg.batch, 64);
    assert_eq!(cfg.steps, 10_000);
}
