use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::save_checkpoint;
use super::config::ExperimentConfig;
use super::metrics::{harmonic_mean, MetricsReport, SeedMetrics};
use super::task::{generate_synthetic_task, SplitSpec, SyntheticTask};
use crate::error::{MmrlError, Result};
use crate::numerics::Tensor;
use crate::objective::{
    cosine_logits, infer_probabilities, mix_logits, InferenceMode, LossBreakdown, Mixing, ProbabilityVector,
};
use crate::trainer::{build_model, compute_features, train, ModelState, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SplitTag {
    Base,
    Novel,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Base => "base",
            SplitTag::Novel => "novel",
        }
    }
}

/// Inference outputs for one test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub class: usize,
    /// Index of `class` within its split.
    pub local_label: usize,
    pub split: SplitTag,
    pub p_c: ProbabilityVector,
    pub p_r: ProbabilityVector,
    /// The probabilities used for the decision.
    pub inferred: ProbabilityVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    pub hm: f64,
    pub records: Vec<SampleRecord>,
}

/// Per-sample class and representation probabilities against `prompts`.
pub fn predict(
    state: &ModelState<f32>,
    images: &[Tensor<f32>],
    prompts: &[Vec<usize>],
    tau: f64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let f = compute_features(state, images, prompts)?;
    (0..images.len())
        .map(|i| {
            Ok((
                cosine_logits(f.f_c.row(i), &f.w, tau)?,
                cosine_logits(f.f_r.row(i), &f.w, tau)?,
            ))
        })
        .collect()
}

fn infer(
    l_c: &[f64],
    l_r: &[f64],
    mode: InferenceMode,
    alpha: f64,
    mixing: Mixing,
) -> Result<(ProbabilityVector, ProbabilityVector, ProbabilityVector)> {
    let p_c = ProbabilityVector::from_logits(l_c)?;
    let p_r = ProbabilityVector::from_logits(l_r)?;
    let inferred = match (mode, mixing) {
        (InferenceMode::Base, Mixing::Logits) => mix_logits(l_c, l_r, alpha)?,
        _ => infer_probabilities(&p_c, Some(&p_r), mode, alpha)?,
    };
    Ok((p_c, p_r, inferred))
}

/// Base classes use mixed inference and novel classes class-only inference,
/// each over its own class set, unless the ablation toggles say otherwise.
pub fn evaluate_split(
    state: &ModelState<f32>,
    task: &SyntheticTask,
    split: &SplitSpec,
    alpha: f64,
    tau: f64,
    mixing: Mixing,
) -> Result<Evaluation> {
    split.validate(task.prompts.len())?;
    let ab = state.ablations;
    let mut records = Vec::new();
    let mut acc = [0.0; 2];
    for (slot, (tag, ids)) in [(SplitTag::Base, &split.base), (SplitTag::Novel, &split.novel)]
        .into_iter()
        .enumerate()
    {
        let samples: Vec<_> = task.test.iter().filter(|s| ids.contains(&s.label)).collect();
        if samples.is_empty() {
            return Err(MmrlError::Contract(format!("no {} test samples", tag.as_str())));
        }
        let prompts: Vec<Vec<usize>> = ids.iter().map(|&c| task.prompts[c].clone()).collect();
        let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
        let mode = match tag {
            SplitTag::Base if ab.base_class_only => InferenceMode::Novel,
            SplitTag::Base => InferenceMode::Base,
            SplitTag::Novel if ab.novel_mixed => InferenceMode::Base,
            SplitTag::Novel => InferenceMode::Novel,
        };
        let mut correct = 0usize;
        for (s, (l_c, l_r)) in samples.iter().zip(predict(state, &images, &prompts, tau)?) {
            let (p_c, p_r, inferred) = infer(&l_c, &l_r, mode, alpha, mixing)?;
            let local_label = SplitSpec::local_index(ids, s.label).expect("filtered by split");
            correct += (inferred.argmax() == local_label) as usize;
            records.push(SampleRecord {
                class: s.label,
                local_label,
                split: tag,
                p_c,
                p_r,
                inferred,
            });
        }
        acc[slot] = 100.0 * correct as f64 / samples.len() as f64;
    }
    Ok(Evaluation {
        base_accuracy: acc[0],
        novel_accuracy: acc[1],
        hm: harmonic_mean(acc[0], acc[1]),
        records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Class,
    Representation,
}

/// One line per test sample: label, split tag, then `d` tab-separated reals.
pub fn feature_dump(
    state: &ModelState<f32>,
    task: &SyntheticTask,
    split: &SplitSpec,
    kind: FeatureKind,
) -> Result<String> {
    let images: Vec<Tensor<f32>> = task.test.iter().map(|s| s.image.clone()).collect();
    let f = compute_features(state, &images, &task.prompts)?;
    let feats = match kind {
        FeatureKind::Class => &f.f_c,
        FeatureKind::Representation => &f.f_r,
    };
    let mut out = String::new();
    for (i, s) in task.test.iter().enumerate() {
        let tag = if split.base.contains(&s.label) {
            SplitTag::Base
        } else {
            SplitTag::Novel
        };
        write!(out, "{}\t{}", s.label, tag.as_str()).expect("string write");
        for v in feats.row(i) {
            write!(out, "\t{v}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Result of one seed's train-and-evaluate pipeline.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub metrics: SeedMetrics,
    pub state: ModelState<f32>,
    pub history: Vec<LossBreakdown>,
    pub evaluation: Evaluation,
}

/// Builds, trains on the base classes and evaluates one seed.
pub fn run_seed(cfg: &ExperimentConfig, task: &SyntheticTask, split: &SplitSpec, seed: u64) -> Result<SeedRun> {
    let mut state = build_model::<f32>(&cfg.encoder, cfg.ablations, seed, cfg.backbone_seed)?;
    let train_samples: Vec<_> = task.train.iter().filter(|s| split.base.contains(&s.label)).collect();
    let images: Vec<Tensor<f32>> = train_samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = train_samples
        .iter()
        .map(|s| SplitSpec::local_index(&split.base, s.label).expect("base sample"))
        .collect();
    let prompts: Vec<Vec<usize>> = split.base.iter().map(|&c| task.prompts[c].clone()).collect();
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let data = TrainingSet {
        images: &images,
        labels: &labels,
        prompts: &prompts,
    };
    let history = train(&mut state, &data, &tc, |_, _| {})?;
    let w = &cfg.train.weights;
    let evaluation = evaluate_split(&state, task, split, w.alpha, w.tau, cfg.mixing)?;
    Ok(SeedRun {
        metrics: SeedMetrics::new(seed, evaluation.base_accuracy, evaluation.novel_accuracy),
        state,
        history,
        evaluation,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub runs: Vec<(u64, Result<SeedRun, String>)>,
    pub artifacts: Vec<PathBuf>,
}

/// Runs every configured seed concurrently; aggregation is ordered by seed.
/// When `out_dir` is given, writes `metrics.tsv`, one checkpoint per seed and
/// optional feature dumps there.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let task = generate_synthetic_task(&cfg.task, &cfg.encoder)?;
    let split = SplitSpec::equal_halves(cfg.task.classes)?;
    let mut runs: Vec<(u64, Result<SeedRun, String>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let (task, split) = (&task, &split);
                (seed, scope.spawn(move || run_seed(cfg, task, split, seed)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(seed, h)| {
                let r = match h.join() {
                    Ok(r) => r.map_err(|e| e.to_string()),
                    Err(_) => Err("seed pipeline panicked".to_string()),
                };
                (seed, r)
            })
            .collect()
    });
    runs.sort_by_key(|(s, _)| *s);

    let mut artifacts = Vec::new();
    let mut per_seed = Vec::new();
    let mut failures = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    for (seed, run) in &runs {
        match run {
            Ok(r) => {
                per_seed.push(r.metrics);
                if let Some(dir) = out_dir {
                    let ckpt = dir.join(format!("seed-{seed}.ckpt"));
                    save_checkpoint(&r.state, &ckpt)?;
                    artifacts.push(ckpt);
                    if cfg.dump_features {
                        for (kind, tag) in [(FeatureKind::Class, "class"), (FeatureKind::Representation, "rep")] {
                            let path = dir.join(format!("features-{tag}-seed-{seed}.tsv"));
                            std::fs::write(&path, feature_dump(&r.state, &task, &split, kind)?)?;
                            artifacts.push(path);
                        }
                    }
                }
            }
            Err(e) => failures.push((*seed, e.clone())),
        }
    }
    let report = MetricsReport::from_seeds(per_seed, failures);
    if let Some(dir) = out_dir {
        let path = dir.join("metrics.tsv");
        std::fs::write(&path, report.to_tsv())?;
        artifacts.push(path);
    }
    Ok(ExperimentOutcome {
        report,
        runs,
        artifacts,
    })
}
