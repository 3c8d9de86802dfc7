//! Model assembly with the frozen/trainable partition, AdamW optimization and
//! the finite-difference gradient check.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{encode_image_on_graph, encode_text_on_graph, init_backbone, tokens_for, EncoderConfig, Variant};
use crate::error::{MmrlError, Result};
use crate::heads::{self, class_feature_on_graph, representation_feature_on_graph, text_feature_on_graph};
use crate::numerics::{
    finite_difference_jacobian, relative_error, Binder, Graph, NamedTensors, Parameter, ParameterSet, Scalar, Tensor,
    Var,
};
use crate::objective::{build_loss_on_graph, Ablations, LossBreakdown, LossWeights, ReferenceFeatures};
use crate::repspace::{init_space, names as rs, AlignerBank, Modality};

/// Standard deviation for every randomly initialized trainable tensor.
pub const INIT_STD: f64 = 0.02;

/// Model configuration plus every parameter, frozen and trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Scalar = f32> {
    pub config: EncoderConfig,
    pub ablations: Ablations,
    pub params: ParameterSet<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            ablations: self.ablations,
            params: self.params.cast(),
        }
    }

    /// Modalities that receive representation tokens.
    pub fn branches(&self) -> Vec<Modality> {
        branches(&self.config, &self.ablations)
    }
}

fn branches(cfg: &EncoderConfig, ab: &Ablations) -> Vec<Modality> {
    let mut out = Vec::new();
    if !ab.no_image_branch {
        out.push(Modality::Visual);
    }
    if !ab.no_text_branch {
        out.push(Modality::Textual);
    }
    if cfg.k == 0 {
        out.clear();
    }
    out
}

fn derive(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Builds the frozen backbone from `backbone_seed` and the trainable
/// components from `seed`.
pub fn build_model<T: Scalar>(
    cfg: &EncoderConfig,
    ablations: Ablations,
    seed: u64,
    backbone_seed: u64,
) -> Result<ModelState<T>> {
    cfg.validate()?;
    let mut params = ParameterSet::new();
    init_backbone(cfg, backbone_seed, &mut params)?;
    let modalities = branches(cfg, &ablations);
    if !modalities.is_empty() {
        if ablations.independent_spaces {
            for (s, &m) in modalities.iter().enumerate() {
                let space = init_space::<T>(cfg.k, cfg.d_r, INIT_STD, derive(seed, 1 + s as u64))?;
                params.insert(Parameter::new(rs::space(m, true), space.tokens().clone(), true))?;
            }
        } else {
            let space = init_space::<T>(cfg.k, cfg.d_r, INIT_STD, derive(seed, 1))?;
            params.insert(Parameter::new(rs::SPACE, space.tokens().clone(), true))?;
        }
        AlignerBank::<T>::init(cfg, &modalities, INIT_STD, derive(seed, 3))?.register(&mut params)?;
    }
    heads::init_heads(cfg, derive(backbone_seed, 4), derive(seed, 5), INIT_STD, &mut params)?;
    Ok(ModelState {
        config: cfg.clone(),
        ablations,
        params,
    })
}

/// Names and shapes of the trainable tensors implied by `(cfg, ablations)`
/// alone, in build order. Nothing is allocated.
pub fn trainable_shapes(cfg: &EncoderConfig, ablations: &Ablations) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let modalities = branches(cfg, ablations);
    if !modalities.is_empty() {
        let space = vec![cfg.k, cfg.d_r];
        if ablations.independent_spaces {
            out.extend(modalities.iter().map(|&m| (rs::space(m, true), space.clone())));
        } else {
            out.push((rs::SPACE.to_string(), space));
        }
        let layers = cfg.first_aligner()..cfg.first_aligner() + cfg.aligner_count();
        for m in Modality::BOTH.into_iter().filter(|m| modalities.contains(m)) {
            let w = m.width(cfg);
            match cfg.variant {
                Variant::Mmrl => {
                    for i in layers.clone() {
                        out.push((rs::full_weight(m, i), vec![cfg.d_r, w]));
                        out.push((rs::full_bias(m, i), vec![w]));
                    }
                }
                Variant::MmrlPlusPlus => {
                    out.push((rs::shared_weight(m), vec![cfg.d_r, w]));
                    out.push((rs::shared_bias(m), vec![w]));
                    for i in layers.clone() {
                        out.push((rs::residual_a(m, i), vec![cfg.d_r, cfg.r1]));
                        out.push((rs::residual_b(m, i), vec![cfg.r1, w]));
                        if cfg.residual_bias {
                            out.push((rs::residual_bias(m, i), vec![w]));
                        }
                    }
                }
            }
        }
    }
    match cfg.variant {
        Variant::Mmrl => out.push((heads::names::REP.to_string(), vec![cfg.d_v, cfg.d])),
        Variant::MmrlPlusPlus => {
            out.push((heads::names::REP_A.to_string(), vec![cfg.d_v, cfg.r2]));
            out.push((heads::names::REP_B.to_string(), vec![cfg.r2, cfg.d]));
        }
    }
    out
}

/// Trainable names implied by `(cfg, ablations)` alone, in build order.
pub fn declared_trainable_names(cfg: &EncoderConfig, ablations: &Ablations) -> Vec<String> {
    trainable_shapes(cfg, ablations).into_iter().map(|(n, _)| n).collect()
}

/// Feature vars for one batch: `(n, d)` class and representation features and
/// `(C, d)` class text features.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub f_c: Var,
    pub f_r: Var,
    pub w: Var,
}

/// Records the adapted forward pass for `images` and the class `prompts`.
/// Without image insertion the representation path reads the class token.
pub fn record_features<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    state: &ModelState<T>,
    images: &[Tensor<T>],
    prompts: &[Vec<usize>],
) -> Result<FeatureVars> {
    let cfg = &state.config;
    let indep = state.ablations.independent_spaces;
    if images.is_empty() || prompts.is_empty() {
        return Err(MmrlError::Contract(
            "batch needs at least one image and one class".into(),
        ));
    }
    let vis = tokens_for(g, b, cfg, Modality::Visual, indep)?;
    let txt = tokens_for(g, b, cfg, Modality::Textual, indep)?;

    let mut class_rows = Vec::with_capacity(images.len());
    let mut rep_rows = Vec::with_capacity(images.len());
    for x in images {
        let out = encode_image_on_graph(g, b, cfg, x, vis.as_deref())?;
        class_rows.push(out.class_out);
        rep_rows.push(match out.rep_out {
            Some(r) => g.mean_rows(r)?,
            None => out.class_out,
        });
    }
    let c_l = g.concat_rows(&class_rows)?;
    let r_l = g.concat_rows(&rep_rows)?;
    let f_c = class_feature_on_graph(g, b, c_l)?;
    let f_r = representation_feature_on_graph(g, b, cfg, r_l)?;

    let mut eos_rows = Vec::with_capacity(prompts.len());
    for ids in prompts {
        eos_rows.push(encode_text_on_graph(g, b, cfg, ids, txt.as_deref())?.eos_out);
    }
    let e_l = g.concat_rows(&eos_rows)?;
    let w = text_feature_on_graph(g, b, e_l)?;
    Ok(FeatureVars { f_c, f_r, w })
}

/// Adapted features as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Features<T: Scalar = f32> {
    pub f_c: Tensor<T>,
    pub f_r: Tensor<T>,
    pub w: Tensor<T>,
}

pub fn compute_features<T: Scalar>(
    state: &ModelState<T>,
    images: &[Tensor<T>],
    prompts: &[Vec<usize>],
) -> Result<Features<T>> {
    let mut g = Graph::new();
    let mut b = Binder::new(&state.params);
    let v = record_features(&mut g, &mut b, state, images, prompts)?;
    Ok(Features {
        f_c: g.value(v.f_c).clone(),
        f_r: g.value(v.f_r).clone(),
        w: g.value(v.w).clone(),
    })
}

/// Frozen-path image features, one `(1, d)` row per image.
pub fn reference_image_features<T: Scalar>(state: &ModelState<T>, images: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let mut b = Binder::new(&state.params);
    images
        .iter()
        .map(|x| {
            let out = encode_image_on_graph(&mut g, &mut b, &state.config, x, None)?;
            let f = class_feature_on_graph(&mut g, &mut b, out.class_out)?;
            Ok(g.value(f).clone())
        })
        .collect()
}

/// Frozen-path text features, `(C, d)`.
pub fn reference_text_features<T: Scalar>(state: &ModelState<T>, prompts: &[Vec<usize>]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut b = Binder::new(&state.params);
    let mut rows = Vec::with_capacity(prompts.len());
    for ids in prompts {
        rows.push(encode_text_on_graph(&mut g, &mut b, &state.config, ids, None)?.eos_out);
    }
    let e = g.concat_rows(&rows)?;
    let w = text_feature_on_graph(&mut g, &mut b, e)?;
    Ok(g.value(w).clone())
}

pub fn reference_features<T: Scalar>(
    state: &ModelState<T>,
    images: &[Tensor<T>],
    prompts: &[Vec<usize>],
) -> Result<ReferenceFeatures<T>> {
    let rows = reference_image_features(state, images)?;
    let f0 = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?;
    Ok(ReferenceFeatures {
        f0,
        w0: reference_text_features(state, prompts)?,
    })
}

/// Loss terms and the gradient of the total for every trainable parameter.
pub fn loss_and_gradients<T: Scalar>(
    state: &ModelState<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    prompts: &[Vec<usize>],
    refs: &ReferenceFeatures<T>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, NamedTensors<T>)> {
    if labels.len() != images.len() {
        return Err(MmrlError::Shape(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&state.params);
    let f = record_features(&mut g, &mut b, state, images, prompts)?;
    let loss = build_loss_on_graph(&mut g, f.f_c, f.f_r, f.w, refs, labels, weights)?;
    let breakdown = loss.read(&g);
    let grads = g.backward(loss.total)?;
    Ok((breakdown, b.collect(&grads)))
}

fn loss_terms<T: Scalar>(
    state: &ModelState<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    prompts: &[Vec<usize>],
    refs: &ReferenceFeatures<T>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let mut b = Binder::new(&state.params);
    let f = record_features(&mut g, &mut b, state, images, prompts)?;
    Ok(build_loss_on_graph(&mut g, f.f_c, f.f_r, f.w, refs, labels, weights)?.read(&g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            steps: 500,
            batch: 16,
            seed: 1,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(MmrlError::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(MmrlError::Config("steps and batch must be >= 1".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(MmrlError::Config("weight decay must be >= 0".into()));
        }
        self.weights.validate()
    }
}

/// Whether decoupled weight decay applies: aligner and head matrices only.
pub fn decays(name: &str) -> bool {
    !name.starts_with(rs::SPACE) && !name.ends_with(".bias") && !name.ends_with(".bias_residual")
}

/// Adam with decoupled weight decay, applied as `p *= 1 - lr wd` before the
/// moment update.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParameterSet<T>, grads: &[(String, Tensor<T>)]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = params
                .get(name)
                .ok_or_else(|| MmrlError::UnknownParameter(name.clone()))?;
            if !param.trainable() {
                return Err(MmrlError::Contract(format!(
                    "optimizer asked to update frozen `{name}`"
                )));
            }
            if param.value.shape() != grad.shape() {
                return Err(MmrlError::Shape(format!("gradient shape mismatch for `{name}`")));
            }
            let decay = if decays(name) { self.weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let value = params.value_mut(name)?.data_mut();
            for i in 0..value.len() {
                let g = grad.data()[i].as_f64();
                let mut p = value[i].as_f64();
                p *= 1.0 - self.lr * decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                value[i] = T::of(p);
            }
        }
        Ok(())
    }
}

/// One optimizer step on a batch. Aborts before updating anything if a loss
/// term is not finite.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    state: &mut ModelState<T>,
    opt: &mut AdamW,
    images: &[Tensor<T>],
    labels: &[usize],
    prompts: &[Vec<usize>],
    refs: &ReferenceFeatures<T>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if images.is_empty() {
        return Err(MmrlError::Contract("empty batch".into()));
    }
    let (loss, grads) = loss_and_gradients(state, images, labels, prompts, refs, weights)?;
    let step = opt.steps_taken() as usize + 1;
    for (term, v) in loss.terms() {
        if !v.is_finite() {
            return Err(MmrlError::NonFiniteLoss { term, step });
        }
    }
    opt.step(&mut state.params, &grads)?;
    Ok(loss)
}

/// Labeled training images with the class prompts they index into.
#[derive(Clone, Debug)]
pub struct TrainingSet<'a, T: Scalar = f32> {
    pub images: &'a [Tensor<T>],
    pub labels: &'a [usize],
    pub prompts: &'a [Vec<usize>],
}

/// Runs `cfg.steps` steps over shuffled epochs and returns the loss history.
/// Frozen reference features are computed once up front.
pub fn train<T: Scalar>(
    state: &mut ModelState<T>,
    data: &TrainingSet<'_, T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if data.images.is_empty() || data.images.len() != data.labels.len() {
        return Err(MmrlError::Contract(
            "training set needs matching images and labels".into(),
        ));
    }
    let f0_rows = reference_image_features(state, data.images)?;
    let w0 = reference_text_features(state, data.prompts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 6));
    let mut order: Vec<usize> = (0..data.images.len()).collect();
    let mut cursor = order.len();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(order.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let images: Vec<Tensor<T>> = idx.iter().map(|&i| data.images[i].clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let rows: Vec<&Tensor<T>> = idx.iter().map(|&i| &f0_rows[i]).collect();
        let refs = ReferenceFeatures {
            f0: Tensor::concat_rows(&rows)?,
            w0: w0.clone(),
        };
        let loss =
            train_step(state, &mut opt, &images, &labels, data.prompts, &refs, &cfg.weights).map_err(|e| match e {
                MmrlError::NonFiniteLoss { term, .. } => MmrlError::NonFiniteLoss { term, step },
                other => other,
            })?;
        on_step(step, &loss);
        history.push(loss);
    }
    Ok(history)
}

/// SHA-256 over the names and little-endian f32 bytes of every frozen parameter.
pub fn frozen_hash<T: Scalar>(params: &ParameterSet<T>) -> String {
    let mut h = Sha256::new();
    for p in params.frozen() {
        h.update(p.name().as_bytes());
        h.update([0u8]);
        h.update(p.value.to_f32_le_bytes());
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub weights: LossWeights,
    /// Maximum relative error per trainable parameter.
    pub per_param: Vec<(String, f64)>,
    pub max: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Denominator floor for relative errors in the model gradient check.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// Central-difference step for [`gradient_check`].
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Per-parameter maximum of `relative_error(analytic, numeric, floor)`.
pub fn compare_gradients(
    analytic: &[(String, Tensor<f64>)],
    numeric: &[(String, Tensor<f64>)],
    floor: f64,
    weights: LossWeights,
) -> Result<GradCheckReport> {
    let numeric: HashMap<&str, &Tensor<f64>> = numeric.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut per_param = Vec::with_capacity(analytic.len());
    let mut max: f64 = 0.0;
    for (name, a) in analytic {
        let n = numeric
            .get(name.as_str())
            .ok_or_else(|| MmrlError::UnknownParameter(name.clone()))?;
        if a.shape() != n.shape() {
            return Err(MmrlError::Shape(format!("gradient shapes differ for `{name}`")));
        }
        let worst = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(&x, &y)| relative_error(x, y, floor))
            .fold(0.0, f64::max);
        max = max.max(worst);
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport {
        weights,
        per_param,
        max,
    })
}

fn check_tolerance(report: &GradCheckReport, tolerance: f64) -> Result<()> {
    if let Some((param, error)) = report.worst() {
        if *error > tolerance {
            return Err(MmrlError::GradientMismatch {
                param: param.clone(),
                error: *error,
                tolerance,
            });
        }
    }
    Ok(())
}

/// Compares reverse-mode gradients of the total loss with central differences
/// for every entry of `weight_sets`, in f64.
///
/// The four loss terms are differenced once and combined per weight set, so
/// every set must share one `tau`. Fails on the first report whose worst
/// parameter exceeds `tolerance`.
pub fn gradient_check(
    state: &ModelState<f32>,
    images: &[Tensor<f32>],
    labels: &[usize],
    prompts: &[Vec<usize>],
    weight_sets: &[LossWeights],
    eps: f64,
    tolerance: f64,
) -> Result<Vec<GradCheckReport>> {
    let Some(first) = weight_sets.first() else {
        return Ok(Vec::new());
    };
    if weight_sets.iter().any(|w| w.tau != first.tau) {
        return Err(MmrlError::Config("gradient check weight sets must share tau".into()));
    }
    let s64: ModelState<f64> = state.cast();
    let x64: Vec<Tensor<f64>> = images.iter().map(|x| x.cast()).collect();
    let refs = reference_features(&s64, &x64, prompts)?;
    let numeric_terms = finite_difference_jacobian(
        |p| {
            let probe = ModelState {
                config: s64.config.clone(),
                ablations: s64.ablations,
                params: p.clone(),
            };
            let l = loss_terms(&probe, &x64, labels, prompts, &refs, first)?;
            Ok(vec![l.ce_c, l.ce_r, l.cos_v, l.cos_t])
        },
        &s64.params,
        eps,
        4,
    )?;
    let mut reports = Vec::with_capacity(weight_sets.len());
    for w in weight_sets {
        let (_, analytic) = loss_and_gradients(&s64, &x64, labels, prompts, &refs, w)?;
        let coef = [w.alpha, 1.0 - w.alpha, w.lambda, w.lambda];
        let numeric: Vec<(String, Tensor<f64>)> = (0..numeric_terms[0].len())
            .map(|p| {
                let name = numeric_terms[0][p].0.clone();
                let mut acc = Tensor::zeros(numeric_terms[0][p].1.shape());
                for (term, c) in numeric_terms.iter().zip(coef) {
                    acc.add_assign(&term[p].1.scale(c));
                }
                (name, acc)
            })
            .collect();
        let report = compare_gradients(&analytic, &numeric, GRADCHECK_FLOOR, *w)?;
        check_tolerance(&report, tolerance)?;
        reports.push(report);
    }
    Ok(reports)
}
