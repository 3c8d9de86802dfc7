//! Cosine classification, the composite loss and decoupled inference.

use serde::{Deserialize, Serialize};

use crate::error::{MmrlError, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Guard added to every norm denominator.
pub const NORM_EPS: f64 = 1e-8;
/// Floor applied to a label probability before taking its logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            lambda: 0.2,
            tau: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(MmrlError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(MmrlError::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(MmrlError::Config(format!("tau {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

/// Frozen-path features the regularizers compare against.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFeatures<T: Scalar = f32> {
    /// `(n, d)` image features, one row per sample.
    pub f0: Tensor<T>,
    /// `(C, d)` text features, one row per class.
    pub w0: Tensor<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_c: f64,
    pub ce_r: f64,
    pub cos_v: f64,
    pub cos_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("ce_c", self.ce_c),
            ("ce_r", self.ce_r),
            ("cos_v", self.cos_v),
            ("cos_t", self.cos_t),
            ("total", self.total),
        ]
    }
}

/// Per-class probabilities summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(MmrlError::Degenerate("empty probability vector".into()));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MmrlError::Domain("probabilities must be finite and nonnegative".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(MmrlError::Domain(format!("probabilities sum to {s}")));
        }
        Ok(Self(p))
    }

    /// Softmax of `logits`, max-shifted.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(MmrlError::Degenerate("no classes".into()));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(Self(e.into_iter().map(|v| v / s).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Highest-probability class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn checked_norm(v: &[f64], what: &str) -> Result<f64> {
    let n = norm(v);
    if !n.is_finite() || n <= NORM_EPS {
        return Err(MmrlError::Domain(format!("{what} has zero norm")));
    }
    Ok(n)
}

fn as_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// `cos(a, b) = a.b / ((|a| + eps)(|b| + eps))`.
fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MmrlError::Shape(format!("feature widths {} vs {}", a.len(), b.len())));
    }
    let na = checked_norm(a, "feature")?;
    let nb = checked_norm(b, "feature")?;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / ((na + NORM_EPS) * (nb + NORM_EPS)))
}

/// Cosine logits `cos(f, w_c) / tau`.
pub fn cosine_logits<T: Scalar>(f: &[T], classifiers: &Tensor<T>, tau: f64) -> Result<Vec<f64>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(MmrlError::Config(format!("tau {tau} must be > 0")));
    }
    let (c, d) = classifiers.dims2()?;
    if f.len() != d {
        return Err(MmrlError::Shape(format!(
            "feature width {} vs classifier width {d}",
            f.len()
        )));
    }
    let f = as_f64(f);
    (0..c)
        .map(|i| cosine(&f, &as_f64(classifiers.row(i))).map(|s| s / tau))
        .collect()
}

/// Softmax over cosine similarities scaled by `1 / tau`.
pub fn class_probabilities<T: Scalar>(f: &[T], classifiers: &Tensor<T>, tau: f64) -> Result<ProbabilityVector> {
    ProbabilityVector::from_logits(&cosine_logits(f, classifiers, tau)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// The label probability fell below [`PROB_EPS`] and was clamped.
    pub clamped: bool,
}

pub fn cross_entropy_loss(p: &ProbabilityVector, label: usize) -> Result<CrossEntropy> {
    let Some(&pl) = p.as_slice().get(label) else {
        return Err(MmrlError::Range {
            what: "label",
            index: label,
            lo: 0,
            hi: p.len() - 1,
        });
    };
    let clamped = pl < PROB_EPS;
    Ok(CrossEntropy {
        loss: -pl.max(PROB_EPS).ln(),
        clamped,
    })
}

/// `1 - cos(a, b)`.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    Ok(1.0 - cosine(&as_f64(a), &as_f64(b))?)
}

/// `alpha ce_c + (1 - alpha) ce_r + lambda (cos_v + cos_t)`.
pub fn total_loss(ce_c: f64, ce_r: f64, cos_v: f64, cos_t: f64, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    Ok(LossBreakdown {
        ce_c,
        ce_r,
        cos_v,
        cos_t,
        total: w.alpha * ce_c + (1.0 - w.alpha) * ce_r + w.lambda * (cos_v + cos_t),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceMode {
    Base,
    Novel,
}

/// Base mode mixes `alpha p_c + (1 - alpha) p_r`; novel mode returns `p_c`.
pub fn infer_probabilities(
    p_c: &ProbabilityVector,
    p_r: Option<&ProbabilityVector>,
    mode: InferenceMode,
    alpha: f64,
) -> Result<ProbabilityVector> {
    match mode {
        InferenceMode::Novel => Ok(p_c.clone()),
        InferenceMode::Base => {
            let p_r = p_r.ok_or_else(|| MmrlError::Contract("base inference needs p_r".into()))?;
            if p_r.len() != p_c.len() {
                return Err(MmrlError::Shape(format!("{} vs {} classes", p_c.len(), p_r.len())));
            }
            if !(0.0..=1.0).contains(&alpha) {
                return Err(MmrlError::Config(format!("alpha {alpha} outside [0, 1]")));
            }
            Ok(ProbabilityVector(
                p_c.as_slice()
                    .iter()
                    .zip(p_r.as_slice())
                    .map(|(c, r)| alpha * c + (1.0 - alpha) * r)
                    .collect(),
            ))
        }
    }
}

/// Alternative base-mode rule: softmax of `alpha l_c + (1 - alpha) l_r`.
pub fn mix_logits(l_c: &[f64], l_r: &[f64], alpha: f64) -> Result<ProbabilityVector> {
    if l_c.len() != l_r.len() {
        return Err(MmrlError::Shape(format!("{} vs {} classes", l_c.len(), l_r.len())));
    }
    let mixed: Vec<f64> = l_c
        .iter()
        .zip(l_r)
        .map(|(c, r)| alpha * c + (1.0 - alpha) * r)
        .collect();
    ProbabilityVector::from_logits(&mixed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mixing {
    #[default]
    Probabilities,
    Logits,
}

/// Component toggles from the ablation table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// w/o L-Branch
    pub no_text_branch: bool,
    /// w/o V-Branch
    pub no_image_branch: bool,
    /// w/o DS-Base
    pub base_class_only: bool,
    /// w/o DS-Novel
    pub novel_mixed: bool,
    /// w/o RS
    pub independent_spaces: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 5] = ["w/o L-Branch", "w/o V-Branch", "w/o DS-Base", "w/o DS-Novel", "w/o RS"];

    /// Parses a comma-separated list of toggle names; `none` or empty gives no toggles.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Ablations::default();
        for raw in list.split(',') {
            let key: String = raw
                .trim()
                .to_ascii_lowercase()
                .chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .collect();
            match key.as_str() {
                "" | "none" => {}
                "wolbranch" | "notextbranch" => a.no_text_branch = true,
                "wovbranch" | "noimagebranch" => a.no_image_branch = true,
                "wodsbase" | "baseclassonly" => a.base_class_only = true,
                "wodsnovel" | "novelmixed" => a.novel_mixed = true,
                "wors" | "independentspaces" => a.independent_spaces = true,
                _ => {
                    return Err(MmrlError::Config(format!(
                        "unknown ablation `{}`; expected one of {}",
                        raw.trim(),
                        Self::NAMES.join(", ")
                    )))
                }
            }
        }
        Ok(a)
    }

    pub fn active_names(&self) -> Vec<&'static str> {
        let flags = [
            self.no_text_branch,
            self.no_image_branch,
            self.base_class_only,
            self.novel_mixed,
            self.independent_spaces,
        ];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }
}

/// Loss terms recorded on a graph; each is a `(1, 1)` var.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ce_c: Var,
    pub ce_r: Var,
    pub cos_v: Var,
    pub cos_t: Var,
    pub total: Var,
}

/// `(n, d) x (C, d) -> (n, C)` cosine logits divided by `tau`.
pub fn cosine_logits_on_graph<T: Scalar>(g: &mut Graph<T>, f: Var, w: Var, tau: f64) -> Result<Var> {
    let fe = g.l2_normalize_rows(f, T::of(NORM_EPS))?;
    let we = g.l2_normalize_rows(w, T::of(NORM_EPS))?;
    let sims = g.matmul_nt(fe, we)?;
    g.scale(sims, T::of(1.0 / tau))
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy_on_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = g.log_softmax_rows(logits)?;
    let picked = g.pick(logp, labels)?;
    let m = g.mean(picked)?;
    g.scale(m, -T::one())
}

/// Mean over rows of `1 - cos(a_i, b_i)`.
pub fn cosine_distance_on_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let an = g.l2_normalize_rows(a, T::of(NORM_EPS))?;
    let bn = g.l2_normalize_rows(b, T::of(NORM_EPS))?;
    let prod = g.mul(an, bn)?;
    let cos = g.sum_rows(prod)?;
    let mean = g.mean(cos)?;
    let neg = g.scale(mean, -T::one())?;
    let one = g.constant(Tensor::filled(&[1, 1], T::one()));
    g.add(one, neg)
}

/// Records the four loss terms and their weighted sum.
#[allow(clippy::too_many_arguments)]
pub fn build_loss_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    f_c: Var,
    f_r: Var,
    w: Var,
    refs: &ReferenceFeatures<T>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let classes = g.value(w).rows();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MmrlError::Range {
            what: "label",
            index: bad,
            lo: 0,
            hi: classes - 1,
        });
    }
    let lc = cosine_logits_on_graph(g, f_c, w, weights.tau)?;
    let ce_c = cross_entropy_on_graph(g, lc, labels)?;
    let lr = cosine_logits_on_graph(g, f_r, w, weights.tau)?;
    let ce_r = cross_entropy_on_graph(g, lr, labels)?;
    let f0 = g.constant(refs.f0.clone());
    let w0 = g.constant(refs.w0.clone());
    let cos_v = cosine_distance_on_graph(g, f_c, f0)?;
    let cos_t = cosine_distance_on_graph(g, w, w0)?;

    let a = g.scale(ce_c, T::of(weights.alpha))?;
    let r = g.scale(ce_r, T::of(1.0 - weights.alpha))?;
    let reg = g.add(cos_v, cos_t)?;
    let reg = g.scale(reg, T::of(weights.lambda))?;
    let total = g.add(a, r)?;
    let total = g.add(total, reg)?;
    Ok(LossVars {
        ce_c,
        ce_r,
        cos_v,
        cos_t,
        total,
    })
}

impl LossVars {
    pub fn read<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossBreakdown {
            ce_c: v(self.ce_c),
            ce_r: v(self.ce_r),
            cos_v: v(self.cos_v),
            cos_t: v(self.cos_t),
            total: v(self.total),
        }
    }
}
