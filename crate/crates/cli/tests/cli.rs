use std::path::{Path, PathBuf};

use cmafnet_cli::{main_with, RunManifest, EXIT_OK, EXIT_USAGE, MANIFEST_FILE};

const TINY: &str = r#"
steps = 3
batch = 2
train_scenes = 4
eval_scenes = 2

[scene]
image_size = 64
objects = [1, 2]
bucket_fractions = [0.0, 0.5, 0.5]
min_side = 24.0
max_side = 200.0
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn run(args: &[&str], out: &Path) -> i32 {
    let mut v: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    v.push("--out".into());
    v.push(out.to_string_lossy().into_owned());
    main_with(v)
}

/// Every output file except the manifest, byte for byte.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != MANIFEST_FILE)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn manifest(dir: &Path) -> RunManifest {
    RunManifest::load(dir.join(MANIFEST_FILE)).unwrap()
}

fn assert_reproducible(args: &[&str], tmp: &Path, tag: &str) {
    let (a, b) = (tmp.join(format!("{tag}-a")), tmp.join(format!("{tag}-b")));
    assert_eq!(run(args, &a), EXIT_OK, "{args:?}");
    assert_eq!(run(args, &b), EXIT_OK, "{args:?}");
    assert_eq!(outputs(&a), outputs(&b), "{args:?}");
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!((&ma.metrics, &ma.config, &ma.outputs), (&mb.metrics, &mb.config, &mb.outputs));
}

#[test]
fn commands_are_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = tiny_config(t);
    let cfg = cfg.to_str().unwrap();
    assert_reproducible(&["--seed", "3", "build", "--scale", "micro", "--img-size", "64"], t, "build");
    assert_reproducible(&["--seed", "7", "gradcheck", "--module", "srm"], t, "grad");
    assert_reproducible(&["--seed", "5", "synth", "--n", "3"], t, "synth");
    assert_reproducible(&["--seed", "2", "--config", cfg, "train", "--variant", "rgb"], t, "train");
    let gt = t.join("train-a/eval_gt.json");
    let pred = t.join("train-a/predictions.jsonl");
    let (gt, pred) = (gt.to_str().unwrap(), pred.to_str().unwrap());
    assert_reproducible(&["eval", "--gt", gt, "--pred", pred], t, "eval");
    assert_reproducible(&["stats", "--gt", gt], t, "stats");
    assert_reproducible(
        &["--seed", "1", "--config", cfg, "ablate", "--experiment", "modules", "--seeds", "2", "--variants", "full,neither"],
        t,
        "ablate",
    );
}

#[test]
fn threads_do_not_change_ablation_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let args = ["--config", cfg, "ablate", "--experiment", "modality", "--seeds", "2", "--variants", "fused,rgb"];
    let one = tmp.path().join("one");
    let two = tmp.path().join("two");
    assert_eq!(run(&args, &one), EXIT_OK);
    let mut threaded = args.to_vec();
    threaded.extend(["--threads", "2"]);
    assert_eq!(run(&threaded, &two), EXIT_OK);
    assert_eq!(outputs(&one), outputs(&two));
}

#[test]
fn manifest_round_trips_and_replays() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let first = tmp.path().join("first");
    assert_eq!(run(&["--seed", "4", "--config", cfg.to_str().unwrap(), "train"], &first), EXIT_OK);
    let m = manifest(&first);
    assert_eq!(m.command, "train");
    assert_eq!(m.seed, 4);
    assert!(m.outputs.iter().all(|o| first.join(o).is_file()));
    let text = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<RunManifest>(&text).unwrap(), m);

    // the config file is gone; the manifest alone must be enough
    std::fs::remove_file(&cfg).unwrap();
    let replay = tmp.path().join("replay");
    let path = first.join(MANIFEST_FILE);
    assert_eq!(run(&["replay", "--manifest", path.to_str().unwrap()], &replay), EXIT_OK);
    assert_eq!(manifest(&replay.join("rerun")).metrics, m.metrics);
}

#[test]
fn build_reports_topology_counters() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("n");
    assert_eq!(run(&["build", "--scale", "n", "--summary"], &out), EXIT_OK);
    let m = manifest(&out);
    let graph = cmafnet::topology::ModelGraph::build(
        &cmafnet::topology::ModelConfig::for_scale(cmafnet::topology::ScaleConfig::preset("n").unwrap()),
        0,
    )
    .unwrap();
    assert_eq!(m.metrics["params"], graph.count_params());
    assert_eq!(m.metrics["flops"], graph.count_flops(640).unwrap());
    assert_eq!(m.metrics["taps"], serde_json::json!([[64, 80, 80], [128, 40, 40], [256, 20, 20]]));

    let out = tmp.path().join("m");
    assert_eq!(run(&["build", "--scale", "m"], &out), EXIT_OK);
    assert_eq!(manifest(&out).metrics["channels"][4], 512);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    assert_eq!(run(&["build", "--scale", "q"], out), EXIT_USAGE);
    assert_eq!(run(&["gradcheck", "--module", "nope"], out), EXIT_USAGE);
    assert_eq!(run(&["ablate", "--experiment", "modality", "--variants", "neither"], out), EXIT_USAGE);
    assert_eq!(run(&["eval", "--gt", "/nonexistent.json", "--pred", "/nonexistent.jsonl"], out), EXIT_USAGE);
    let bad = out.join("bad.toml");
    std::fs::write(&bad, "steps = 0\n").unwrap();
    assert_eq!(run(&["--config", bad.to_str().unwrap(), "train"], out), EXIT_USAGE);
    assert_eq!(main_with(["frobnicate"]), EXIT_USAGE);
}

#[test]
fn synth_output_is_an_evaluable_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(run(&["synth", "--n", "4"], &data), EXIT_OK);
    let corpus = cmafnet::evalkit::Corpus::load(data.join("annotations.json")).unwrap();
    assert_eq!(corpus.images.len(), 4);
    let stats = tmp.path().join("stats");
    assert_eq!(run(&["stats", "--gt", data.join("annotations.json").to_str().unwrap()], &stats), EXIT_OK);
    assert_eq!(manifest(&stats).metrics["total"], corpus.annotations.len());
}
