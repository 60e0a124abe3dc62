use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use cmafnet::checks::{run_suite, Suite};
use cmafnet::detect::{read_predictions, write_predictions};
use cmafnet::evalkit::{coco_summary, dataset_stats, Corpus, EvalParams, EvalReport, SizeHistogram};
use cmafnet::experiment::{
    predict, run_ablation, scenes_for, train, AblationReport, Experiment, TrainConfig, Variant,
};
use cmafnet::nn::Module;
use cmafnet::synth::{corpus_of, generate, write_samples, NoiseSpec, SceneSpec, ANNOTATION_FILE};
use cmafnet::topology::{ModelConfig, ModelGraph, ScaleConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{Cli, Command, Failure, Outcome, EXIT_CHECK_FAILED, EXIT_OK};

/// Scene and noise settings read by `synth --spec`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub scene: SceneSpec,
    pub noise: NoiseSpec,
}

pub fn dispatch(cli: &Cli, out: &Path, config: Option<Value>) -> Result<Outcome, Failure> {
    match &cli.command {
        Command::Build(a) => build(cli, a, out, config),
        Command::Gradcheck(a) => gradcheck(cli, a, out),
        Command::Synth(a) => synth(cli, a, out, config),
        Command::Train(a) => train_cmd(cli, a, out, config),
        Command::Eval(a) => eval(a, out),
        Command::Stats(a) => stats(a, out),
        Command::Ablate(a) => ablate(cli, a, out, config),
        Command::Replay(a) => replay(a, out),
    }
}

fn from_toml<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn from_value<T: DeserializeOwned>(v: Value) -> Result<T, Failure> {
    serde_json::from_value(v).map_err(|e| Failure::Usage(format!("recorded config: {e}")))
}

fn train_config(cli: &Cli, config: Option<Value>) -> Result<TrainConfig, Failure> {
    let cfg: TrainConfig = match (config, &cli.config) {
        (Some(v), _) => from_value(v)?,
        (None, Some(path)) => from_toml(path)?,
        (None, None) => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

struct Writer<'a> {
    dir: &'a Path,
    outputs: Vec<String>,
}

impl Writer<'_> {
    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        let f = BufWriter::new(File::create(self.dir.join(name))?);
        serde_json::to_writer_pretty(f, value)?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

fn writer(dir: &Path) -> Writer<'_> {
    Writer { dir, outputs: Vec::new() }
}

fn build(cli: &Cli, args: &crate::BuildArgs, out: &Path, config: Option<Value>) -> Result<Outcome, Failure> {
    let model_cfg: ModelConfig = match config {
        Some(v) => from_value(v)?,
        None => {
            let base = match &cli.config {
                Some(path) => from_toml::<TrainConfig>(path)?.model_config(&Variant::full())?,
                None => ModelConfig::default(),
            };
            let scale = match &args.scale {
                Some(name) => ScaleConfig::by_name(name)?,
                None if cli.config.is_some() => base.scale.clone(),
                None => ScaleConfig::by_name("n")?,
            };
            ModelConfig { scale, ..base }
        }
    };
    let graph = ModelGraph::build(&model_cfg, cli.seed)?;
    let side = args.img_size;
    let nodes = graph.node_stats(side, side)?;
    let params = graph.count_params();
    let flops: u64 = nodes.iter().map(|n| n.flops).sum();
    if args.summary {
        println!("{:<24} {:<8} {:>6} {:>6} {:>11} {:>10} {:>14}", "node", "kind", "in", "out", "size", "params", "flops");
        for n in &nodes {
            println!(
                "{:<24} {:<8} {:>6} {:>6} {:>11} {:>10} {:>14}",
                n.name,
                format!("{:?}", n.kind).to_lowercase(),
                n.in_channels,
                n.out_channels,
                format!("{}x{}", n.height, n.width),
                n.params,
                n.flops
            );
        }
    }
    let taps: Vec<[usize; 3]> =
        graph.taps.iter().map(|&t| [nodes[t].out_channels, nodes[t].height, nodes[t].width]).collect();
    println!(
        "total: {params} params ({:.3}M), {:.3} GFLOPs at {side}x{side}; scale {}, P5 width {}",
        params as f64 / 1e6,
        flops as f64 / 1e9,
        model_cfg.scale.name,
        graph.plan.channels[4]
    );
    let metrics = json!({
        "params": params,
        "flops": flops,
        "channels": graph.plan.channels,
        "strides": graph.plan.strides,
        "taps": taps,
    });
    let mut w = writer(out);
    w.json("summary.json", &json!({ "nodes": nodes, "totals": metrics }))?;
    Ok(Outcome { exit_code: EXIT_OK, config: serde_json::to_value(&model_cfg)?, metrics, outputs: w.outputs })
}

fn gradcheck(cli: &Cli, args: &crate::GradcheckArgs, out: &Path) -> Result<Outcome, Failure> {
    let suites = if args.module == "all" { Suite::ALL.to_vec() } else { vec![Suite::from_str(&args.module)?] };
    let mut reports = Vec::new();
    let mut metrics = serde_json::Map::new();
    let mut all_pass = true;
    for suite in suites {
        let r = run_suite(suite, cli.seed)?;
        for g in &r.report.groups {
            println!("  {:<44} {:>5} coords  max rel {:.3e}", g.name, g.checked, g.max_rel_err);
        }
        println!(
            "{}: {} max rel err {:.3e} (tolerance {:.0e})",
            suite.name(),
            if r.passed { "PASS" } else { "FAIL" },
            r.report.max_rel_err(),
            r.tolerance
        );
        all_pass &= r.passed;
        metrics.insert(
            suite.name().to_string(),
            json!({ "max_rel_err": r.report.max_rel_err(), "passed": r.passed }),
        );
        reports.push(r);
    }
    let mut w = writer(out);
    w.json("gradcheck.json", &reports)?;
    Ok(Outcome {
        exit_code: if all_pass { EXIT_OK } else { EXIT_CHECK_FAILED },
        config: json!({ "module": args.module }),
        metrics: Value::Object(metrics),
        outputs: w.outputs,
    })
}

fn histogram_metrics(h: &SizeHistogram) -> Value {
    json!({ "counts": h.counts, "fractions": h.fractions, "mean_area": h.mean_area, "total": h.total })
}

fn synth(cli: &Cli, args: &crate::SynthArgs, out: &Path, config: Option<Value>) -> Result<Outcome, Failure> {
    let spec: SynthSpec = match (config, &args.spec) {
        (Some(v), _) => from_value(v)?,
        (None, Some(path)) => {
            let mut s: SynthSpec = from_toml(path)?;
            s.scene.seed = cli.seed;
            s
        }
        (None, None) => SynthSpec { scene: SceneSpec { seed: cli.seed, ..SceneSpec::default() }, ..SynthSpec::default() },
    };
    if args.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let samples = generate(&spec.scene, &spec.noise, args.n)?;
    let corpus = write_samples(&samples, spec.scene.categories(), out)?;
    let hist = dataset_stats(&corpus, cmafnet::evalkit::REFERENCE_SIZE)?;
    println!(
        "{} scenes, {} objects; small/medium/large {:?}",
        samples.len(),
        corpus.annotations.len(),
        hist.counts
    );
    let mut outputs = vec![ANNOTATION_FILE.to_string()];
    for img in &corpus.images {
        outputs.extend(img.file_name.clone());
        outputs.extend(img.depth_file_name.clone());
    }
    Ok(Outcome {
        exit_code: EXIT_OK,
        config: serde_json::to_value(&spec)?,
        metrics: json!({ "images": samples.len(), "objects": corpus.annotations.len(), "sizes": histogram_metrics(&hist) }),
        outputs,
    })
}

fn variant_by_name(name: &str) -> Result<Variant, Failure> {
    [Experiment::Modality, Experiment::Modules]
        .into_iter()
        .flat_map(|e| e.variants())
        .find(|v| v.name == name)
        .ok_or_else(|| Failure::Usage(format!("unknown variant '{name}'")))
}

fn report_metrics(r: &EvalReport) -> Value {
    json!({
        "precision": r.precision,
        "recall": r.recall,
        "map50": r.map50,
        "map50_95": r.map50_95,
        "ap_small": r.ap_small,
        "ap_medium": r.ap_medium,
        "ap_large": r.ap_large,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

fn print_report(r: &EvalReport) {
    println!("{:<20} {:>6} {:>8} {:>9} {:>8}", "category", "gt", "AP50", "AP50:95", "R50");
    for c in &r.categories {
        let defined: Vec<f64> = c.ap.iter().flatten().copied().collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        println!(
            "{:<20} {:>6} {:>8} {:>9} {:>8}",
            c.name,
            c.num_gt,
            fmt_opt(c.ap.first().copied().flatten()),
            fmt_opt(mean),
            fmt_opt(c.recall50)
        );
    }
    println!(
        "all: P {:.4} R {:.4} mAP50 {:.4} mAP50:95 {:.4} AP_s {} AP_m {} AP_l {}",
        r.precision,
        r.recall,
        r.map50,
        r.map50_95,
        fmt_opt(r.ap_small),
        fmt_opt(r.ap_medium),
        fmt_opt(r.ap_large)
    );
}

fn train_cmd(cli: &Cli, args: &crate::TrainArgs, out: &Path, config: Option<Value>) -> Result<Outcome, Failure> {
    let cfg = train_config(cli, config)?;
    let variant = variant_by_name(&args.variant)?;
    let (train_set, eval_set) = scenes_for(&cfg, cli.seed)?;
    let outcome = train(&cfg.model_config(&variant)?, &cfg, &train_set, cli.seed)?;
    let mut w = writer(out);
    w.json("losses.json", &outcome.losses)?;
    let weights: serde_json::Map<String, Value> =
        outcome.model.parameters().into_iter().map(|(n, p)| (n, json!(p.to_vec()))).collect();
    w.json("weights.json", &weights)?;
    let final_loss = outcome.losses.last().copied();
    if let Some(step) = outcome.diverged_at {
        println!("{}: DIVERGED at step {step}", variant.name);
        return Ok(Outcome {
            exit_code: EXIT_CHECK_FAILED,
            config: serde_json::to_value(&cfg)?,
            metrics: json!({ "diverged_at": step, "final_loss": final_loss }),
            outputs: w.outputs,
        });
    }
    let preds = predict(&outcome.model, &cfg, &eval_set)?;
    let corpus = corpus_of(&eval_set, cfg.scene.categories());
    let report = coco_summary(&corpus, &preds, &EvalParams::default())?;
    write_predictions(BufWriter::new(File::create(out.join("predictions.jsonl"))?), &preds)?;
    w.outputs.push("predictions.jsonl".into());
    w.json("eval_gt.json", &corpus)?;
    w.json("report.json", &report)?;
    println!(
        "{}: {} params, final loss {:.4}",
        variant.name,
        outcome.model.num_params(),
        final_loss.unwrap_or(f64::NAN)
    );
    print_report(&report);
    let mut metrics = report_metrics(&report);
    metrics["final_loss"] = json!(final_loss);
    Ok(Outcome { exit_code: EXIT_OK, config: serde_json::to_value(&cfg)?, metrics, outputs: w.outputs })
}

fn load_corpus(path: &Path) -> Result<Corpus, Failure> {
    Corpus::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn eval(args: &crate::EvalArgs, out: &Path) -> Result<Outcome, Failure> {
    let corpus = load_corpus(&args.gt)?;
    let file = File::open(&args.pred).map_err(|e| Failure::Usage(format!("{}: {e}", args.pred.display())))?;
    let preds = read_predictions(BufReader::new(file))?;
    let params = EvalParams { target_size: args.img_size, ..EvalParams::default() };
    let report = coco_summary(&corpus, &preds, &params)?;
    print_report(&report);
    let mut w = writer(out);
    w.json("eval_report.json", &report)?;
    Ok(Outcome {
        exit_code: EXIT_OK,
        config: json!({ "gt": args.gt, "pred": args.pred, "img_size": args.img_size }),
        metrics: report_metrics(&report),
        outputs: w.outputs,
    })
}

fn stats(args: &crate::StatsArgs, out: &Path) -> Result<Outcome, Failure> {
    let corpus = load_corpus(&args.gt)?;
    let hist = dataset_stats(&corpus, args.img_size)?;
    println!("{:<8} {:>8} {:>9}", "bucket", "count", "fraction");
    for (name, (c, f)) in ["small", "medium", "large"].iter().zip(hist.counts.iter().zip(hist.fractions)) {
        println!("{name:<8} {c:>8} {f:>9.4}");
    }
    println!("{} objects, mean area {:.1} px² at {}²", hist.total, hist.mean_area, args.img_size);
    let mut w = writer(out);
    w.json("stats.json", &hist)?;
    Ok(Outcome {
        exit_code: EXIT_OK,
        config: json!({ "gt": args.gt, "img_size": args.img_size }),
        metrics: histogram_metrics(&hist),
        outputs: w.outputs,
    })
}

/// Runs the seeds on up to `threads` workers; the merged report lists runs
/// seed by seed, variants in their given order, whatever the thread count.
fn ablate_parallel(
    experiment: Experiment,
    cfg: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
    threads: usize,
) -> Result<AblationReport, Failure> {
    let workers = threads.clamp(1, seeds.len().max(1));
    let mut runs = Vec::new();
    if workers == 1 {
        runs = run_ablation(experiment, cfg, seeds, variants)?.runs;
    } else {
        let parts: Vec<Vec<u64>> =
            (0..workers).map(|k| seeds.iter().copied().skip(k).step_by(workers).collect()).collect();
        let results: Vec<cmafnet::Result<AblationReport>> = std::thread::scope(|s| {
            let handles: Vec<_> = parts
                .iter()
                .map(|part| s.spawn(move || run_ablation(experiment, cfg, part, variants)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
        });
        for r in results {
            runs.extend(r?.runs);
        }
        let seed_pos = |s: u64| seeds.iter().position(|&x| x == s);
        let var_pos = |n: &str| variants.iter().position(|v| v.name == n);
        runs.sort_by_key(|r| (seed_pos(r.seed), var_pos(&r.variant)));
    }
    Ok(AblationReport { experiment, seeds: seeds.to_vec(), runs })
}

fn ablate(cli: &Cli, args: &crate::AblateArgs, out: &Path, config: Option<Value>) -> Result<Outcome, Failure> {
    let cfg = train_config(cli, config)?;
    let experiment = Experiment::from_str(&args.experiment)?;
    let all = experiment.variants();
    let variants: Vec<Variant> = if args.variants.is_empty() {
        all
    } else {
        args.variants
            .iter()
            .map(|n| {
                all.iter()
                    .find(|v| &v.name == n)
                    .cloned()
                    .ok_or_else(|| Failure::Usage(format!("variant '{n}' is not part of the {} experiment", args.experiment)))
            })
            .collect::<Result<_, _>>()?
    };
    if args.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (cli.seed..cli.seed + args.seeds).collect();
    let report = ablate_parallel(experiment, &cfg, &seeds, &variants, cli.threads)?;

    print!("{:<6}", "seed");
    for v in &variants {
        print!(" {:>10}", v.name);
    }
    println!();
    for &seed in &seeds {
        print!("{seed:<6}");
        for v in &variants {
            let cell = report
                .result(&v.name, seed)
                .map_or("-".to_string(), |r| r.map50.map_or("DIVERGED".into(), |m| format!("{m:.4}")));
            print!(" {cell:>10}");
        }
        println!();
    }
    let (a, b) = experiment.headline();
    let headline = if variants.iter().any(|v| v.name == a) && variants.iter().any(|v| v.name == b) {
        let (wins, valid) = report.wins(a, b);
        println!("{a} > {b} in {wins}/{valid} seeds (mAP50)");
        json!({ "a": a, "b": b, "wins": wins, "valid": valid })
    } else {
        Value::Null
    };
    let diverged: Vec<String> =
        report.runs.iter().filter(|r| r.diverged).map(|r| format!("{}@{}", r.variant, r.seed)).collect();
    if !diverged.is_empty() {
        println!("DIVERGED (excluded): {}", diverged.join(", "));
    }
    let mut w = writer(out);
    w.json("ablation.json", &report)?;
    let runs: Vec<Value> = report
        .runs
        .iter()
        .map(|r| json!({ "variant": r.variant, "seed": r.seed, "map50": r.map50, "map50_95": r.map50_95, "diverged": r.diverged }))
        .collect();
    Ok(Outcome {
        exit_code: EXIT_OK,
        config: serde_json::to_value(&cfg)?,
        metrics: json!({ "runs": runs, "headline": headline }),
        outputs: w.outputs,
    })
}

fn replay(args: &crate::ReplayArgs, out: &Path) -> Result<Outcome, Failure> {
    use clap::Parser;

    let recorded = crate::RunManifest::load(&args.manifest)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.manifest.display())))?;
    if recorded.command == "replay" {
        return Err(Failure::Usage("a replay manifest cannot be replayed".into()));
    }
    let mut cli = Cli::try_parse_from(std::iter::once("cmafnet".to_string()).chain(recorded.argv.iter().cloned()))
        .map_err(|e| Failure::Usage(format!("recorded arguments: {e}")))?;
    let rerun_dir = out.join("rerun");
    cli.out = Some(rerun_dir.clone());
    let (_, fresh) = crate::run(&cli, &recorded.argv, Some(recorded.config.clone()))?;
    let identical = fresh.metrics == recorded.metrics && fresh.exit_code == recorded.exit_code;
    println!(
        "replay of '{}': metrics {}",
        recorded.command,
        if identical { "identical" } else { "DIFFER" }
    );
    let mut w = writer(out);
    w.json("replay.json", &json!({ "recorded": recorded.metrics, "reproduced": fresh.metrics, "identical": identical }))?;
    Ok(Outcome {
        exit_code: if identical { EXIT_OK } else { EXIT_CHECK_FAILED },
        config: json!({ "manifest": args.manifest }),
        metrics: json!({ "identical": identical }),
        outputs: w.outputs,
    })
}
