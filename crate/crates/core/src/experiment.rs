//! Toy training runs on synthetic scenes and the paired-seed ablations built
//! on them.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{
    decode_and_nms, train_step, AssignConfig, LossConfig, OptimConfig, PredictionRecord, Sgd,
};
use crate::error::{Error, Result};
use crate::evalkit::{coco_summary, EvalParams, EvalReport};
use crate::nn::{Ctx, Module};
use crate::synth::{collate, corpus_of, generate_one, NoiseSpec, SceneSample, SceneSpec};
use crate::tensor::no_grad;
use crate::topology::{Modality, ModelConfig, ModelGraph, ScaleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scale: String,
    pub steps: usize,
    pub batch: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Linear learning-rate ramp over the first steps.
    pub warmup_steps: usize,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub assign: AssignConfig,
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub max_det: usize,
    pub scene: SceneSpec,
    pub noise: NoiseSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scale: "micro".into(),
            steps: 400,
            batch: 8,
            train_scenes: 256,
            eval_scenes: 64,
            warmup_steps: 0,
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            assign: AssignConfig::default(),
            conf_thresh: 0.001,
            nms_iou: 0.6,
            max_det: 100,
            scene: SceneSpec::default(),
            noise: NoiseSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(Error::Config("steps, batch, train_scenes and eval_scenes must be positive".into()));
        }
        ScaleConfig::by_name(&self.scale)?;
        self.scene.validate()?;
        self.noise.validate()
    }

    pub fn model_config(&self, variant: &Variant) -> Result<ModelConfig> {
        Ok(ModelConfig {
            scale: ScaleConfig::by_name(&self.scale)?,
            num_classes: self.scene.classes.len(),
            modality: variant.modality,
            use_srm: variant.use_srm,
            use_csif: variant.use_csif,
            ..ModelConfig::default()
        })
    }
}

/// Scene streams of one seed: training scenes first, held-out scenes after.
pub fn scenes_for(cfg: &TrainConfig, seed: u64) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let spec = SceneSpec { seed, ..cfg.scene.clone() };
    let all = (0..cfg.train_scenes + cfg.eval_scenes)
        .map(|i| generate_one(&spec, &cfg.noise, i))
        .collect::<Result<Vec<_>>>()?;
    let mut train = all;
    let eval = train.split_off(cfg.train_scenes);
    Ok((train, eval))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub modality: Modality,
    pub use_srm: bool,
    pub use_csif: bool,
}

impl Variant {
    pub fn new(name: &str, modality: Modality, use_srm: bool, use_csif: bool) -> Variant {
        Variant { name: name.into(), modality, use_srm, use_csif }
    }

    pub fn full() -> Variant {
        Variant::new("full", Modality::Fused, true, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Modality,
    Modules,
}

impl Experiment {
    pub fn variants(self) -> Vec<Variant> {
        match self {
            Experiment::Modality => vec![
                Variant::new("rgb", Modality::Rgb, true, true),
                Variant::new("depth", Modality::Depth, true, true),
                Variant::new("fused", Modality::Fused, true, true),
            ],
            Experiment::Modules => vec![
                Variant::full(),
                Variant::new("no-srm", Modality::Fused, false, true),
                Variant::new("no-csif", Modality::Fused, true, false),
                Variant::new("neither", Modality::Fused, false, false),
            ],
        }
    }

    /// The comparison each experiment is judged on: `(better, worse)`.
    pub fn headline(self) -> (&'static str, &'static str) {
        match self {
            Experiment::Modality => ("fused", "rgb"),
            Experiment::Modules => ("full", "neither"),
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Experiment> {
        match s {
            "modality" => Ok(Experiment::Modality),
            "modules" => Ok(Experiment::Modules),
            _ => Err(Error::Config(format!("unknown experiment '{s}' (modality|modules)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    /// `None` when training diverged.
    pub map50: Option<f64>,
    pub map50_95: Option<f64>,
    pub diverged: bool,
    /// Total loss per step.
    pub losses: Vec<f64>,
    pub params: usize,
}

pub struct TrainOutcome {
    pub model: ModelGraph,
    pub losses: Vec<f64>,
    pub diverged_at: Option<usize>,
}

/// Trains a fresh model; a non-finite loss stops the run and is reported
/// through `diverged_at`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[SceneSample],
    seed: u64,
) -> Result<TrainOutcome> {
    let model = ModelGraph::build(model_cfg, seed)?;
    let params = model.parameters();
    let mut opt = Sgd::new(cfg.optim, &params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);
    let ctx = Ctx::train(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch);
        while picked.len() < cfg.batch {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut order_rng);
            }
            picked.push(train_set[order.pop().expect("refilled above")].clone());
        }
        let batch = collate(&picked)?;
        opt.config.lr = if step < cfg.warmup_steps {
            cfg.optim.lr * (step + 1) as f64 / cfg.warmup_steps as f64
        } else {
            cfg.optim.lr
        };
        match train_step(&model, &params, &mut opt, &batch, &cfg.loss, &cfg.assign, step, &ctx) {
            Ok(r) => {
                log::debug!("step {step} loss {:.5} cls {:.5} box {:.5}", r.total, r.cls, r.boxes);
                losses.push(r.total);
            }
            Err(Error::NonFinite { step, detail }) => {
                log::warn!("diverged at step {step}: {detail}");
                return Ok(TrainOutcome { model, losses, diverged_at: Some(step) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome { model, losses, diverged_at: None })
}

/// Predictions of `model` on `samples` in dump form, eval mode.
pub fn predict(model: &ModelGraph, cfg: &TrainConfig, samples: &[SceneSample]) -> Result<Vec<PredictionRecord>> {
    let ctx = Ctx::eval();
    let mut records = Vec::new();
    for chunk in samples.chunks(cfg.batch.max(1)) {
        let batch = collate(chunk)?;
        let out = no_grad(|| model.forward(&batch.rgb, &batch.depth, &ctx))?;
        for (s, dets) in chunk.iter().zip(decode_and_nms(&out, cfg.conf_thresh, cfg.nms_iou, cfg.max_det)) {
            records.extend(dets.iter().map(|d| PredictionRecord::from_detection(s.index as u64 + 1, d)));
        }
    }
    Ok(records)
}

pub fn evaluate(model: &ModelGraph, cfg: &TrainConfig, samples: &[SceneSample]) -> Result<EvalReport> {
    let preds = predict(model, cfg, samples)?;
    let corpus = corpus_of(samples, cfg.scene.categories());
    coco_summary(&corpus, &preds, &EvalParams::default())
}

/// One seed of one variant, data and initialization fixed by `seed`.
pub fn run_variant(
    cfg: &TrainConfig,
    variant: &Variant,
    seed: u64,
    data: &(Vec<SceneSample>, Vec<SceneSample>),
) -> Result<RunResult> {
    let model_cfg = cfg.model_config(variant)?;
    let outcome = train(&model_cfg, cfg, &data.0, seed)?;
    let params = outcome.model.num_params();
    if outcome.diverged_at.is_some() {
        return Ok(RunResult {
            variant: variant.name.clone(),
            seed,
            map50: None,
            map50_95: None,
            diverged: true,
            losses: outcome.losses,
            params,
        });
    }
    let report = evaluate(&outcome.model, cfg, &data.1)?;
    Ok(RunResult {
        variant: variant.name.clone(),
        seed,
        map50: Some(report.map50),
        map50_95: Some(report.map50_95),
        diverged: false,
        losses: outcome.losses,
        params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
}

impl AblationReport {
    pub fn result(&self, variant: &str, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// Seeds where `a` scores strictly higher than `b`, and seeds where
    /// both finished without diverging.
    pub fn wins(&self, a: &str, b: &str) -> (usize, usize) {
        let mut wins = 0;
        let mut valid = 0;
        for &seed in &self.seeds {
            let (Some(ra), Some(rb)) = (self.result(a, seed), self.result(b, seed)) else { continue };
            if let (Some(x), Some(y)) = (ra.map50, rb.map50) {
                valid += 1;
                wins += usize::from(x > y);
            }
        }
        (wins, valid)
    }
}

/// Trains every listed variant on every seed. Variants of one seed share
/// scenes, batch order and the initial weights of shared layers.
pub fn run_ablation(
    experiment: Experiment,
    cfg: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<AblationReport> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for &seed in seeds {
        let data = scenes_for(cfg, seed)?;
        for v in variants {
            let r = run_variant(cfg, v, seed, &data)?;
            log::info!(
                "{:?} seed {seed} {}: mAP50 {}",
                experiment,
                v.name,
                r.map50.map_or("DIVERGED".to_string(), |m| format!("{m:.4}"))
            );
            runs.push(r);
        }
    }
    Ok(AblationReport { experiment, seeds: seeds.to_vec(), runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_parsing_and_variants() {
        assert_eq!("modality".parse::<Experiment>().unwrap(), Experiment::Modality);
        assert!("other".parse::<Experiment>().is_err());
        let names: Vec<_> = Experiment::Modules.variants().into_iter().map(|v| v.name).collect();
        assert_eq!(names, ["full", "no-srm", "no-csif", "neither"]);
    }

    #[test]
    fn wins_skip_diverged_runs() {
        let run = |variant: &str, seed, map50| RunResult {
            variant: variant.into(),
            seed,
            map50,
            map50_95: map50,
            diverged: map50.is_none(),
            losses: vec![],
            params: 0,
        };
        let report = AblationReport {
            experiment: Experiment::Modality,
            seeds: vec![0, 1, 2],
            runs: vec![
                run("fused", 0, Some(0.5)),
                run("rgb", 0, Some(0.3)),
                run("fused", 1, None),
                run("rgb", 1, Some(0.3)),
                run("fused", 2, Some(0.2)),
                run("rgb", 2, Some(0.3)),
            ],
        };
        assert_eq!(report.wins("fused", "rgb"), (1, 2));
    }
}
