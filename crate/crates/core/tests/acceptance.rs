//! Acceptance suite: one PASS/FAIL line per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mmrl_core::encoders::{
    encode_image, encode_text, encode_text_on_graph, init_backbone, tokens_for, EncoderConfig, Variant,
};
use mmrl_core::harness::{
    count_trainable_parameters, decode_checkpoint, encode_checkpoint, evaluate_split, generate_synthetic_task,
    harmonic_mean, load_checkpoint, run_experiment, save_checkpoint, ExperimentConfig, ExperimentOutcome, SplitSpec,
    SplitTag,
};
use mmrl_core::numerics::{Binder, Graph, Parameter, ParameterSet, Tensor};
use mmrl_core::objective::{Ablations, LossWeights, Mixing};
use mmrl_core::repspace::{init_space, names as rs, AlignerBank, Modality};
use mmrl_core::trainer::{
    build_model, compute_features, declared_trainable_names, frozen_hash, gradient_check, loss_and_gradients,
    reference_features, ModelState, GRADCHECK_EPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn parameter_accounting() -> Outcome {
    let start = Instant::now();
    let none = Ablations::default();
    let vit_b16 = |variant, d_r| EncoderConfig {
        variant,
        d_r,
        ..EncoderConfig::vit_b16()
    };
    let mmrl = count_trainable_parameters(&vit_b16(Variant::Mmrl, 512), &none).total;
    let pp = count_trainable_parameters(&vit_b16(Variant::MmrlPlusPlus, 512), &none).total;
    let small = count_trainable_parameters(&vit_b16(Variant::MmrlPlusPlus, 32), &none).total;
    let elapsed = start.elapsed();
    let rel = |got: usize, want: f64| (got as f64 - want).abs() / want;
    check(mmrl == 4_992_256, || format!("MMRL total {mmrl}"))?;
    check(rel(pp, 813_000.0) <= 0.02, || format!("MMRL++ total {pp}"))?;
    check(rel(small, 170_000.0) <= 0.06, || format!("d_r=32 total {small}"))?;
    check(elapsed < Duration::from_secs(1), || format!("took {}", secs(elapsed)))?;
    Ok(format!(
        "MMRL {mmrl}, MMRL++ {pp} ({:+.2}%), d_r=32 {small} ({:+.2}%), {}",
        100.0 * (pp as f64 / 813_000.0 - 1.0),
        100.0 * (small as f64 / 170_000.0 - 1.0),
        secs(elapsed)
    ))
}

fn harmonic_mean_oracle() -> Outcome {
    let rows = [(85.68, 77.16, 81.20), (85.53, 78.32, 81.77)];
    let mut got = Vec::new();
    for (b, n, want) in rows {
        let hm = harmonic_mean(b, n);
        check((hm - want).abs() <= 0.01, || format!("{b}/{n} -> {hm}, want {want}"))?;
        got.push(format!("{b}/{n} -> {hm:.4}"));
    }
    // the evaluation path reports the same quantity
    let run = &shared_run().runs[0].1.as_ref().map_err(|e| e.clone())?;
    let e = &run.evaluation;
    check(e.hm == harmonic_mean(e.base_accuracy, e.novel_accuracy), || {
        "evaluation HM differs".into()
    })?;
    Ok(got.join(", "))
}

fn perturb(state: &mut ModelState<f32>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in state.params.trainable_names() {
        let t = state.params.value_mut(&name).unwrap();
        let noise = Tensor::randn(t.shape(), std, &mut rng);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let task = generate_synthetic_task(&cfg.task, &cfg.encoder).map_err(|e| e.to_string())?;
    let split = SplitSpec::equal_halves(cfg.task.classes).map_err(|e| e.to_string())?;
    let samples: Vec<_> = task
        .train
        .iter()
        .filter(|s| split.base.contains(&s.label))
        .step_by(32)
        .collect();
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| SplitSpec::local_index(&split.base, s.label).unwrap())
        .collect();
    let prompts: Vec<Vec<usize>> = split.base.iter().map(|&c| task.prompts[c].clone()).collect();
    let mut weights = Vec::new();
    for alpha in [0.0, 0.7, 1.0] {
        for lambda in [0.0, 0.2] {
            weights.push(LossWeights {
                alpha,
                lambda,
                ..LossWeights::default()
            });
        }
    }
    let mut notes = Vec::new();
    for variant in [Variant::Mmrl, Variant::MmrlPlusPlus] {
        let enc = EncoderConfig {
            variant,
            ..cfg.encoder.clone()
        };
        let n = count_trainable_parameters(&enc, &Ablations::default()).total;
        check(n <= 5_000, || format!("{} has {n} trainable scalars", variant.name()))?;
        let mut state = build_model::<f32>(&enc, Ablations::default(), 1, 0).map_err(|e| e.to_string())?;
        perturb(&mut state, 0.05, 9);
        let reports = gradient_check(&state, &images, &labels, &prompts, &weights, GRADCHECK_EPS, 1e-4)
            .map_err(|e| e.to_string())?;
        let worst = reports.iter().map(|r| r.max).fold(0.0, f64::max);
        notes.push(format!("{} ({n} scalars) max rel err {worst:.2e}", variant.name()));
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), || format!("took {}", secs(elapsed)))?;
    Ok(format!("{}, 12 combinations, {}", notes.join("; "), secs(elapsed)))
}

fn freezing_contract() -> Outcome {
    let out = shared_run();
    let cfg = ExperimentConfig::default();
    for (seed, run) in &out.runs {
        let run = run.as_ref().map_err(|e| e.clone())?;
        let fresh = build_model::<f32>(&cfg.encoder, cfg.ablations, *seed, cfg.backbone_seed).unwrap();
        check(run.history.len() == 500, || {
            format!("seed {seed} ran {} steps", run.history.len())
        })?;
        check(frozen_hash(&run.state.params) == frozen_hash(&fresh.params), || {
            format!("seed {seed}: frozen hash changed")
        })?;
    }
    let mut listed = 0;
    for variant in [Variant::Mmrl, Variant::MmrlPlusPlus] {
        let enc = EncoderConfig {
            variant,
            ..cfg.encoder.clone()
        };
        let state = build_model::<f32>(&enc, Ablations::default(), 1, 0).unwrap();
        let mut have = state.params.trainable_names();
        let mut want = declared_trainable_names(&enc, &Ablations::default());
        have.sort();
        want.sort();
        check(have == want, || format!("{}: {have:?} vs {want:?}", variant.name()))?;
        listed += have.len();
    }
    Ok(format!(
        "frozen hash stable over 500 steps for {} seeds; {listed} trainable names match declarations",
        out.runs.len()
    ))
}

fn random_params(cfg: &EncoderConfig, seed: u64) -> ParameterSet<f32> {
    let mut p = ParameterSet::new();
    init_backbone(cfg, seed, &mut p).unwrap();
    let space = init_space::<f32>(cfg.k, cfg.d_r, 0.5, seed + 1).unwrap();
    p.insert(Parameter::new(rs::SPACE, space.tokens().clone(), true))
        .unwrap();
    AlignerBank::<f32>::init(cfg, &Modality::BOTH, 0.3, seed + 2)
        .unwrap()
        .register(&mut p)
        .unwrap();
    p
}

fn random_prompt(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.random_range(1..cfg.text_len - 2);
    let mut ids = vec![cfg.bos()];
    ids.extend((0..len).map(|_| rng.random_range(1..cfg.bos())));
    ids.push(cfg.eos());
    ids.resize(cfg.text_len, cfg.pad());
    ids
}

fn variant_equivalence() -> Outcome {
    let pp = EncoderConfig {
        beta: 1.0,
        ..EncoderConfig::desk()
    };
    let full_cfg = EncoderConfig {
        variant: Variant::Mmrl,
        ..pp.clone()
    };
    let p = random_params(&pp, 21);
    let bank = AlignerBank::from_params(&p, &pp).map_err(|e| e.to_string())?;
    let mut q = ParameterSet::new();
    for param in p.iter().filter(|x| !x.trainable() || x.name() == rs::SPACE) {
        q.insert(param.clone()).unwrap();
    }
    AlignerBank::Full(bank.to_full(pp.aligner_count()).map_err(|e| e.to_string())?)
        .register(&mut q)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for i in 0..100 {
        let x = Tensor::randn(&[pp.patches, pp.patch_dim], 1.0, &mut rng);
        let a = encode_image(&p, &pp, &x, true, false).unwrap();
        let b = encode_image(&q, &full_cfg, &x, true, false).unwrap();
        check(a == b, || format!("image input {i} differs"))?;
        let ids = random_prompt(&pp, &mut rng);
        let a = encode_text(&p, &pp, &ids, true, false).unwrap();
        let b = encode_text(&q, &full_cfg, &ids, true, false).unwrap();
        check(a == b, || format!("text input {i} differs"))?;
    }
    Ok("100 image and 100 text inputs bit-identical".into())
}

fn text_sequence(p: &ParameterSet<f32>, cfg: &EncoderConfig, ids: &[usize]) -> Tensor<f32> {
    let mut g = Graph::new();
    let mut b = Binder::new(p);
    let tokens = tokens_for(&mut g, &mut b, cfg, Modality::Textual, false).unwrap();
    let out = encode_text_on_graph(&mut g, &mut b, cfg, ids, tokens.as_deref()).unwrap();
    g.value(out.sequence).clone()
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut violations = 0;
    let mut trials = 0;
    let ks = [0usize, 3, 5];
    for t in 0..100 {
        let k = ks[t % 3];
        let cfg = EncoderConfig {
            k,
            ..EncoderConfig::desk()
        };
        let p = if k > 0 {
            random_params(&cfg, 40 + t as u64)
        } else {
            let mut p = ParameterSet::new();
            init_backbone(&cfg, 40 + t as u64, &mut p).unwrap();
            p
        };
        let ids = random_prompt(&cfg, &mut rng);
        let eos = ids.iter().position(|&i| i == cfg.eos()).unwrap();
        // change one token after position `pos`; rows at or before `pos` must not move
        let pos = rng.random_range(0..eos - 1);
        let target = rng.random_range(pos + 1..eos);
        let mut other = ids.clone();
        while other[target] == ids[target] {
            other[target] = rng.random_range(1..cfg.bos());
        }
        let a = text_sequence(&p, &cfg, &ids);
        let b = text_sequence(&p, &cfg, &other);
        let shift = if k > 0 { k } else { 0 };
        for row in 0..=pos + shift {
            if a.row(row) != b.row(row) {
                violations += 1;
            }
        }
        check(a.row(target + shift) != b.row(target + shift), || {
            format!("trial {t}: perturbation had no effect")
        })?;
        trials += 1;
    }
    check(violations == 0, || format!("{violations} violations"))?;
    Ok(format!("{trials} trials over K in {{0, 3, 5}}, 0 violations"))
}

fn zero_shot_equivalence() -> Outcome {
    let mut notes = Vec::new();
    for variant in [Variant::Mmrl, Variant::MmrlPlusPlus] {
        let cfg = ExperimentConfig::default();
        let enc = EncoderConfig {
            variant,
            insert_from: cfg.encoder.layers + 1,
            ..cfg.encoder.clone()
        };
        let state = build_model::<f32>(&enc, Ablations::default(), 3, 0).unwrap();
        for name in state.params.trainable_names() {
            if name.ends_with(".lora_b") {
                let t = state.params.tensor(&name).unwrap();
                check(t.data().iter().all(|&v| v == 0.0), || {
                    format!("{name} not zero at init")
                })?;
            }
        }
        let task = generate_synthetic_task(&cfg.task, &enc).unwrap();
        let images: Vec<Tensor<f32>> = task.test.iter().take(24).map(|s| s.image.clone()).collect();
        let labels: Vec<usize> = task.test.iter().take(24).map(|s| s.label).collect();
        let refs = reference_features(&state, &images, &task.prompts).unwrap();
        let f = compute_features(&state, &images, &task.prompts).unwrap();
        check(f.f_c == refs.f0, || format!("{}: f_c differs", variant.name()))?;
        check(f.w == refs.w0, || format!("{}: w differs", variant.name()))?;
        let (loss, _) =
            loss_and_gradients(&state, &images, &labels, &task.prompts, &refs, &LossWeights::default()).unwrap();
        check(loss.cos_v.abs() <= 1e-5 && loss.cos_t.abs() <= 1e-5, || {
            format!("{}: cos_v {} cos_t {}", variant.name(), loss.cos_v, loss.cos_t)
        })?;
        notes.push(format!(
            "{} cos_v {:.1e} cos_t {:.1e}",
            variant.name(),
            loss.cos_v,
            loss.cos_t
        ));
    }
    Ok(format!("features bit-exact; {}", notes.join(", ")))
}

struct Shared {
    outcome: ExperimentOutcome,
    elapsed: Duration,
}

fn shared() -> &'static Shared {
    static RUN: OnceLock<Shared> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let outcome = run_experiment(&ExperimentConfig::default(), None).expect("experiment runs");
        Shared {
            outcome,
            elapsed: start.elapsed(),
        }
    })
}

fn shared_run() -> &'static ExperimentOutcome {
    &shared().outcome
}

fn desk_adaptation() -> Outcome {
    let s = shared();
    let out = &s.outcome;
    let cfg = ExperimentConfig::default();
    check(out.report.failures.is_empty(), || {
        format!("failures: {:?}", out.report.failures)
    })?;
    let seeds: Vec<u64> = out.report.per_seed.iter().map(|m| m.seed).collect();
    check(seeds == [1, 2, 3], || format!("seeds {seeds:?}"))?;
    let task = generate_synthetic_task(&cfg.task, &cfg.encoder).unwrap();
    let split = SplitSpec::equal_halves(cfg.task.classes).unwrap();
    for (seed, run) in &out.runs {
        let run = run.as_ref().map_err(|e| e.clone())?;
        let pure = evaluate_split(
            &run.state,
            &task,
            &split,
            1.0,
            cfg.train.weights.tau,
            Mixing::Probabilities,
        )
        .map_err(|e| e.to_string())?;
        let novel = |e: &mmrl_core::harness::Evaluation| {
            e.records
                .iter()
                .filter(|r| r.split == SplitTag::Novel)
                .map(|r| r.inferred.as_slice().to_vec())
                .collect::<Vec<_>>()
        };
        check(novel(&run.evaluation) == novel(&pure), || {
            format!("seed {seed}: novel output differs from α=1")
        })?;
    }
    // population std, recomputed independently
    let base: Vec<f64> = out.report.per_seed.iter().map(|m| m.base).collect();
    let mean = base.iter().sum::<f64>() / 3.0;
    let std = ((base[0] - mean).powi(2) + (base[1] - mean).powi(2) + (base[2] - mean).powi(2)) / 3.0;
    check(
        out.report.base.mean == mean && out.report.base.std == std.sqrt(),
        || "aggregate mismatch".into(),
    )?;
    let low = base.iter().cloned().fold(f64::INFINITY, f64::min);
    let detail = format!(
        "base {:.2}±{:.2}, novel {:.2}±{:.2}, hm {:.2}±{:.2}; per-seed base {base:?}; {}",
        out.report.base.mean,
        out.report.base.std,
        out.report.novel.mean,
        out.report.novel.std,
        out.report.hm.mean,
        out.report.hm.std,
        secs(s.elapsed)
    );
    check(low >= 95.0, || {
        format!("lowest seed base accuracy {low:.2} < 95; {detail}")
    })?;
    check(s.elapsed < Duration::from_secs(300), || format!("too slow; {detail}"))?;
    Ok(detail)
}

fn decoupled_reductions() -> Outcome {
    let cfg = ExperimentConfig::default();
    let task = generate_synthetic_task(&cfg.task, &cfg.encoder).unwrap();
    let split = SplitSpec::equal_halves(cfg.task.classes).unwrap();
    let mut samples = 0;
    for (_, run) in &shared_run().runs {
        let run = run.as_ref().map_err(|e| e.clone())?;
        let tau = cfg.train.weights.tau;
        let one = evaluate_split(&run.state, &task, &split, 1.0, tau, Mixing::Probabilities).unwrap();
        for r in &one.records {
            check(r.inferred == r.p_c, || {
                format!("α=1 inference differs from class-only for class {}", r.class)
            })?;
        }
        let mixed = evaluate_split(&run.state, &task, &split, 0.7, tau, Mixing::Probabilities).unwrap();
        for r in &mixed.records {
            let sum: f64 = r.inferred.as_slice().iter().sum();
            check(
                (sum - 1.0).abs() <= 1e-6 && r.inferred.as_slice().iter().all(|&p| p >= 0.0),
                || format!("off simplex: sum {sum}"),
            )?;
        }
        samples += mixed.records.len();
    }
    Ok(format!(
        "α=1 identical per sample, α=0.7 on simplex for {samples} samples"
    ))
}

fn checkpoint_integrity() -> Outcome {
    let run = shared_run().runs[0].1.as_ref().map_err(|e| e.clone())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("seed.ckpt");
    save_checkpoint(&run.state, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    check(back == run.state, || "loaded state differs".into())?;
    check(frozen_hash(&back.params) == frozen_hash(&run.state.params), || {
        "hash differs".into()
    })?;
    let bytes = std::fs::read(&path).unwrap();
    check(encode_checkpoint(&back).unwrap() == bytes, || {
        "re-encoding differs".into()
    })?;
    let manifest_end = 48 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut positions: Vec<usize> = (0..manifest_end).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    positions.extend((0..2_000).map(|_| rng.random_range(manifest_end..bytes.len())));
    for &i in &positions {
        let mut bad = bytes.clone();
        bad[i] ^= 1 << rng.random_range(0..8);
        check(decode_checkpoint(&bad).is_err(), || {
            format!("flip at byte {i} undetected")
        })?;
    }
    Ok(format!(
        "{} tensors round-trip; {} single-byte corruptions detected",
        back.params.len(),
        positions.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("parameter accounting", parameter_accounting),
        ("harmonic-mean oracle", harmonic_mean_oracle),
        ("gradient fidelity", gradient_fidelity),
        ("freezing contract", freezing_contract),
        ("variant equivalence", variant_equivalence),
        ("causality", causality),
        ("zero-shot equivalence", zero_shot_equivalence),
        ("desk-scale adaptation", desk_adaptation),
        ("decoupled-inference reductions", decoupled_reductions),
        ("checkpoint integrity", checkpoint_integrity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
