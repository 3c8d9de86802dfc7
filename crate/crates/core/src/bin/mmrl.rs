use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmrl_core::harness::{
    count_trainable_parameters, evaluate_split, feature_dump, generate_synthetic_task, load_checkpoint, load_config,
    run_experiment, ExperimentConfig, FeatureKind, MetricsReport, SeedMetrics, SplitSpec,
};
use mmrl_core::numerics::Tensor;
use mmrl_core::objective::LossWeights;
use mmrl_core::trainer::{build_model, gradient_check, ModelState, GRADCHECK_EPS};
use mmrl_core::Result;

#[derive(Parser)]
#[command(
    name = "mmrl",
    about = "Train and evaluate representation-space adapters on a synthetic task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Class,
    Rep,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and report base/novel accuracy.
    Train {
        config: PathBuf,
        /// Directory for metrics.tsv, checkpoints and feature dumps.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Evaluate a saved checkpoint on the configured task.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed label for the metrics row; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for metrics.tsv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the trainable-parameter breakdown.
    Params { config: PathBuf },
    /// Compare reverse-mode gradients with central differences.
    Gradcheck {
        config: PathBuf,
        /// Training samples in the checked batch.
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Std of the noise added to trainable parameters before checking.
        #[arg(long, default_value_t = 0.05)]
        perturb: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write per-sample test features for offline plotting.
    DumpFeatures {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use trained weights instead of a freshly built model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Kind::Rep)]
        kind: Kind,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out } => train(&load(&config)?, &out),
        Command::Eval {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = load(&config)?;
            eval(&cfg, &checkpoint, seed.unwrap_or(cfg.seeds[0]), &out)
        }
        Command::Params { config } => params(&load(&config)?),
        Command::Gradcheck {
            config,
            samples,
            perturb,
            tolerance,
        } => gradcheck(&load(&config)?, samples, perturb, tolerance),
        Command::DumpFeatures {
            config,
            out,
            checkpoint,
            kind,
        } => dump_features(&load(&config)?, &out, checkpoint.as_deref(), kind),
    }
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    load_config(path).map_err(|e| match e {
        mmrl_core::MmrlError::Io(io) => mmrl_core::MmrlError::Config(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let outcome = run_experiment(cfg, Some(out))?;
    print!("{}", outcome.report.to_table());
    for path in &outcome.artifacts {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn model_for(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<ModelState<f32>> {
    match checkpoint {
        Some(path) => {
            let state = load_checkpoint(path)?;
            if state.config != cfg.encoder {
                eprintln!("note: checkpoint encoder settings differ from the config; using the checkpoint's");
            }
            Ok(state)
        }
        None => build_model(&cfg.encoder, cfg.ablations, cfg.seeds[0], cfg.backbone_seed),
    }
}

fn eval(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64, out: &Path) -> Result<()> {
    let state = model_for(cfg, Some(checkpoint))?;
    let task = generate_synthetic_task(&cfg.task, &state.config)?;
    let split = SplitSpec::equal_halves(cfg.task.classes)?;
    let w = &cfg.train.weights;
    let e = evaluate_split(&state, &task, &split, w.alpha, w.tau, cfg.mixing)?;
    let report = MetricsReport::from_seeds(vec![SeedMetrics::new(seed, e.base_accuracy, e.novel_accuracy)], vec![]);
    print!("{}", report.to_table());
    std::fs::create_dir_all(out)?;
    let path = out.join("metrics.tsv");
    std::fs::write(&path, report.to_tsv())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn params(cfg: &ExperimentConfig) -> Result<()> {
    let count = count_trainable_parameters(&cfg.encoder, &cfg.ablations);
    println!("{} trainable parameters", cfg.encoder.variant.name());
    for (group, n) in &count.groups {
        println!("  {group:<22} {n:>12}");
    }
    println!("  {:<22} {:>12}", "total", count.total);
    Ok(())
}

fn gradcheck(cfg: &ExperimentConfig, samples: usize, perturb: f64, tolerance: f64) -> Result<()> {
    let task = generate_synthetic_task(&cfg.task, &cfg.encoder)?;
    let split = SplitSpec::equal_halves(cfg.task.classes)?;
    let chosen: Vec<_> = task
        .train
        .iter()
        .filter(|s| split.base.contains(&s.label))
        .step_by(cfg.task.shots.max(1))
        .take(samples.max(1))
        .collect();
    let images: Vec<Tensor<f32>> = chosen.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = chosen
        .iter()
        .map(|s| SplitSpec::local_index(&split.base, s.label).expect("base sample"))
        .collect();
    let prompts: Vec<Vec<usize>> = split.base.iter().map(|&c| task.prompts[c].clone()).collect();

    let mut state = build_model::<f32>(&cfg.encoder, cfg.ablations, cfg.seeds[0], cfg.backbone_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
    for name in state.params.trainable_names() {
        let t = state.params.value_mut(&name)?;
        let noise = Tensor::randn(t.shape(), perturb, &mut rng);
        t.add_assign(&noise);
    }
    let mut weights = Vec::new();
    for alpha in [0.0, 0.7, 1.0] {
        for lambda in [0.0, 0.2] {
            weights.push(LossWeights {
                alpha,
                lambda,
                tau: cfg.train.weights.tau,
            });
        }
    }
    let reports = gradient_check(
        &state,
        &images,
        &labels,
        &prompts,
        &weights,
        GRADCHECK_EPS,
        f64::INFINITY,
    )?;
    println!("{:>6}  {:>6}  {:>10}  worst parameter", "alpha", "lambda", "max rel");
    let mut worst = 0.0f64;
    for r in &reports {
        let name = r.worst().map_or("-", |(n, _)| n.as_str());
        println!(
            "{:>6}  {:>6}  {:>10.3e}  {name}",
            r.weights.alpha, r.weights.lambda, r.max
        );
        worst = worst.max(r.max);
    }
    if worst > tolerance {
        return Err(mmrl_core::MmrlError::Contract(format!(
            "max relative error {worst:.3e} exceeds {tolerance:.1e}"
        )));
    }
    println!("ok: max relative error {worst:.3e} <= {tolerance:.1e}");
    Ok(())
}

fn dump_features(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>, kind: Kind) -> Result<()> {
    let state = model_for(cfg, checkpoint)?;
    let task = generate_synthetic_task(&cfg.task, &state.config)?;
    let split = SplitSpec::equal_halves(cfg.task.classes)?;
    let kind = match kind {
        Kind::Class => FeatureKind::Class,
        Kind::Rep => FeatureKind::Representation,
    };
    let text = feature_dump(&state, &task, &split, kind)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, text)?;
    println!("wrote {} ({} samples)", out.display(), task.test.len());
    Ok(())
}
