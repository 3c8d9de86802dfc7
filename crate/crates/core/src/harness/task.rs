use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{MmrlError, Result};
use crate::numerics::Tensor;

/// Shape of the synthetic classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    /// Training examples per class.
    pub shots: usize,
    /// Test examples per class.
    pub test_shots: usize,
    /// Scale applied to each class mean.
    pub separation: f64,
    /// Shared template tokens placed before the class token.
    pub template_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            shots: 16,
            test_shots: 16,
            separation: 3.0,
            template_len: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// One prompt per class: `[BOS, template.., class token, EOS, PAD..]`.
    pub prompts: Vec<Vec<usize>>,
    /// `(M, patch_dim)` unit-scale class means before `separation` is applied.
    pub means: Vec<Tensor<f32>>,
}

/// Fraction of each class-mean row's variance shared by all patches of the class.
pub const SHARED_WEIGHT: f64 = 0.75;

/// Per class, patches are `separation * mean_c + N(0, 1)` where each row of
/// `mean_c` has unit expected norm and mixes a class prototype common to all
/// patches with a per-patch component. Class tokens take ids `1..=C`; template
/// tokens are drawn from the remaining ordinary ids.
pub fn generate_synthetic_task(spec: &SyntheticTaskSpec, cfg: &EncoderConfig) -> Result<SyntheticTask> {
    if spec.classes < 2 || spec.shots == 0 || spec.test_shots == 0 {
        return Err(MmrlError::Config("task needs >= 2 classes and >= 1 shot".into()));
    }
    if !spec.separation.is_finite() || spec.separation < 0.0 {
        return Err(MmrlError::Config(format!(
            "separation {} must be >= 0",
            spec.separation
        )));
    }
    // ids 0, BOS and EOS are reserved
    let ordinary = cfg.vocab.saturating_sub(3);
    if spec.classes + spec.template_len > ordinary {
        return Err(MmrlError::Config(format!(
            "{} classes and {} template tokens exceed the {} ordinary ids of the vocabulary",
            spec.classes, spec.template_len, ordinary
        )));
    }
    let prompt_len = spec.template_len + 3;
    if prompt_len > cfg.text_len {
        return Err(MmrlError::Config(format!(
            "prompt of {prompt_len} tokens exceeds text capacity {}",
            cfg.text_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool: Vec<usize> = (spec.classes + 1..=ordinary).collect();
    pool.shuffle(&mut rng);
    let template = &pool[..spec.template_len];
    let prompts = (0..spec.classes)
        .map(|c| {
            let mut ids = Vec::with_capacity(cfg.text_len);
            ids.push(cfg.bos());
            ids.extend_from_slice(template);
            ids.push(c + 1);
            ids.push(cfg.eos());
            ids.resize(cfg.text_len, cfg.pad());
            ids
        })
        .collect();

    let mean_std = 1.0 / (cfg.patch_dim as f64).sqrt();
    let (shared, local) = (SHARED_WEIGHT.sqrt() as f32, (1.0 - SHARED_WEIGHT).sqrt() as f32);
    let means: Vec<Tensor<f32>> = (0..spec.classes)
        .map(|_| {
            let proto = Tensor::<f32>::randn(&[1, cfg.patch_dim], mean_std, &mut rng);
            let mut m = Tensor::<f32>::randn(&[cfg.patches, cfg.patch_dim], mean_std, &mut rng);
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                *v = shared * proto.data()[i % cfg.patch_dim] + local * *v;
            }
            m
        })
        .collect();
    let sep = spec.separation as f32;
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        let mut out = Vec::with_capacity(n * spec.classes);
        for (label, mean) in means.iter().enumerate() {
            for _ in 0..n {
                let noise = Tensor::<f32>::randn(mean.shape(), 1.0, rng);
                let image = mean.zip_map(&noise, |m, e| sep * m + e).expect("same shape");
                out.push(Sample { image, label });
            }
        }
        out
    };
    let train = draw(spec.shots, &mut rng);
    let test = draw(spec.test_shots, &mut rng);
    Ok(SyntheticTask {
        spec: spec.clone(),
        train,
        test,
        prompts,
        means,
    })
}

/// Disjoint base and novel class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl SplitSpec {
    /// Sorted class ids, first half base and second half novel.
    pub fn equal_halves(classes: usize) -> Result<Self> {
        let split = Self {
            base: (0..classes / 2).collect(),
            novel: (classes / 2..classes).collect(),
        };
        split.validate(classes)?;
        Ok(split)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.base.is_empty() || self.novel.is_empty() {
            return Err(MmrlError::Contract(
                "base and novel splits must both be nonempty".into(),
            ));
        }
        let mut seen = vec![false; classes];
        for &c in self.base.iter().chain(&self.novel) {
            match seen.get_mut(c) {
                None => {
                    return Err(MmrlError::Range {
                        what: "class id",
                        index: c,
                        lo: 0,
                        hi: classes.saturating_sub(1),
                    })
                }
                Some(true) => return Err(MmrlError::Contract(format!("class {c} appears twice in the split"))),
                Some(s) => *s = true,
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(MmrlError::Contract("split does not cover every class".into()));
        }
        Ok(())
    }

    /// Position of `class` within `ids`.
    pub fn local_index(ids: &[usize], class: usize) -> Option<usize> {
        ids.iter().position(|&c| c == class)
    }
}

/// Accuracy (percent) of the nearest class centroid estimated from `train`.
pub fn nearest_centroid_accuracy(train: &[Sample], test: &[Sample], classes: usize) -> f64 {
    let dim = train[0].image.len();
    let mut centroids = vec![vec![0.0f64; dim]; classes];
    let mut counts = vec![0usize; classes];
    for s in train {
        counts[s.label] += 1;
        for (c, &v) in centroids[s.label].iter_mut().zip(s.image.data()) {
            *c += v as f64;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = test
        .iter()
        .filter(|s| {
            let dist =
                |c: &Vec<f64>| -> f64 { c.iter().zip(s.image.data()).map(|(a, &b)| (a - b as f64).powi(2)).sum() };
            let best = (0..classes)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap_or(0);
            best == s.label
        })
        .count();
    100.0 * correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let cfg = EncoderConfig::desk();
        let spec = SyntheticTaskSpec::default();
        let a = generate_synthetic_task(&spec, &cfg).unwrap();
        let b = generate_synthetic_task(&spec, &cfg).unwrap();
        assert_eq!(a, b);
        for c in 0..spec.classes {
            assert_eq!(a.train.iter().filter(|s| s.label == c).count(), spec.shots);
        }
        let other = generate_synthetic_task(&SyntheticTaskSpec { seed: 9, ..spec }, &cfg).unwrap();
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn prompts_share_a_template_and_differ_in_the_class_token() {
        let cfg = EncoderConfig::desk();
        let t = generate_synthetic_task(&SyntheticTaskSpec::default(), &cfg).unwrap();
        for (c, p) in t.prompts.iter().enumerate() {
            assert_eq!(p.len(), cfg.text_len);
            assert_eq!(p[0], cfg.bos());
            assert_eq!(p[1..5], t.prompts[0][1..5]);
            assert_eq!(p[5], c + 1);
            assert_eq!(p[6], cfg.eos());
            assert!(p[7..].iter().all(|&x| x == cfg.pad()));
            crate::encoders::validate_text(p, &cfg).unwrap();
        }
    }

    #[test]
    fn too_many_classes_for_the_vocabulary() {
        let cfg = EncoderConfig::desk();
        let spec = SyntheticTaskSpec {
            classes: 60,
            ..SyntheticTaskSpec::default()
        };
        assert!(matches!(
            generate_synthetic_task(&spec, &cfg),
            Err(MmrlError::Config(_))
        ));
    }

    #[test]
    fn nearest_centroid_separates_default_task() {
        let cfg = EncoderConfig::desk();
        let t = generate_synthetic_task(&SyntheticTaskSpec::default(), &cfg).unwrap();
        let acc = nearest_centroid_accuracy(&t.train, &t.test, 8);
        assert!(acc >= 90.0, "{acc}");
        let flat = generate_synthetic_task(
            &SyntheticTaskSpec {
                separation: 0.0,
                ..SyntheticTaskSpec::default()
            },
            &cfg,
        )
        .unwrap();
        assert!(nearest_centroid_accuracy(&flat.train, &flat.test, 8) < 50.0);
    }

    #[test]
    fn equal_halves_split() {
        let s = SplitSpec::equal_halves(8).unwrap();
        assert_eq!(s.base, vec![0, 1, 2, 3]);
        assert_eq!(s.novel, vec![4, 5, 6, 7]);
        assert!(SplitSpec::equal_halves(1).is_err());
        let bad = SplitSpec {
            base: vec![0, 1],
            novel: vec![1, 2],
        };
        assert!(bad.validate(3).is_err());
        assert_eq!(SplitSpec::local_index(&s.novel, 6), Some(2));
    }
}
