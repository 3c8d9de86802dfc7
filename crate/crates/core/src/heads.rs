//! Projections into the shared embedding space and representation pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EncoderConfig, Variant};
use crate::error::{MmrlError, Result};
use crate::numerics::{Binder, Graph, Parameter, ParameterSet, Scalar, Tensor, Var};

pub mod names {
    pub const CLASS: &str = "head.class.weight";
    pub const TEXT: &str = "head.text.weight";
    /// Full trainable representation projection (MMRL).
    pub const REP: &str = "head.rep.weight";
    pub const REP_A: &str = "head.rep.lora_a";
    pub const REP_B: &str = "head.rep.lora_b";
}

/// Adds the frozen class and text projections and the trainable
/// representation head for `cfg.variant`.
///
/// The representation head starts equal to the class projection: MMRL copies
/// it, MMRL++ uses a zero `B_r`.
pub fn init_heads<T: Scalar>(
    cfg: &EncoderConfig,
    frozen_seed: u64,
    trainable_seed: u64,
    std: f64,
    params: &mut ParameterSet<T>,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(frozen_seed);
    let class = Tensor::randn(&[cfg.d_v, cfg.d], 1.0 / (cfg.d_v as f64).sqrt(), &mut rng);
    let text = Tensor::randn(&[cfg.d_t, cfg.d], 1.0 / (cfg.d_t as f64).sqrt(), &mut rng);
    params.insert(Parameter::new(names::CLASS, class.clone(), false))?;
    params.insert(Parameter::new(names::TEXT, text, false))?;
    match cfg.variant {
        Variant::Mmrl => params.insert(Parameter::new(names::REP, class, true)),
        Variant::MmrlPlusPlus => {
            let mut rng = ChaCha8Rng::seed_from_u64(trainable_seed);
            let a = Tensor::randn(&[cfg.d_v, cfg.r2], std, &mut rng);
            params.insert(Parameter::new(names::REP_A, a, true))?;
            params.insert(Parameter::new(names::REP_B, Tensor::zeros(&[cfg.r2, cfg.d]), true))
        }
    }
}

/// Mean of the `K` representation token outputs.
pub fn pool_representation<T: Scalar>(rows: &[Vec<T>]) -> Result<Tensor<T>> {
    let Some(first) = rows.first() else {
        return Err(MmrlError::Degenerate("cannot pool zero representation tokens".into()));
    };
    let width = first.len();
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(MmrlError::Shape(
            "representation rows must share a nonzero width".into(),
        ));
    }
    let scale = T::one() / T::of(rows.len() as f64);
    let mut out = vec![T::zero(); width];
    for r in rows {
        for (o, &v) in out.iter_mut().zip(r) {
            *o = *o + v;
        }
    }
    Tensor::vector(out.into_iter().map(|v| v * scale).collect())
}

fn project<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
    let x = x.clone().reshape(vec![1, x.len()])?;
    if x.cols() != w.rows() {
        return Err(MmrlError::Shape(format!(
            "{what} input width {} vs projection rows {}",
            x.cols(),
            w.rows()
        )));
    }
    x.matmul(w)?.reshape(vec![w.cols()])
}

pub fn project_class_feature<T: Scalar>(params: &ParameterSet<T>, c_l: &Tensor<T>) -> Result<Tensor<T>> {
    project(c_l, params.tensor(names::CLASS)?, "class")
}

pub fn project_text_feature<T: Scalar>(params: &ParameterSet<T>, e_l: &Tensor<T>) -> Result<Tensor<T>> {
    project(e_l, params.tensor(names::TEXT)?, "text")
}

/// Effective representation projection: the full matrix for MMRL,
/// `W_v^c + A_r B_r` for MMRL++.
pub fn representation_weight<T: Scalar>(params: &ParameterSet<T>, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    match cfg.variant {
        Variant::Mmrl => Ok(params.tensor(names::REP)?.clone()),
        Variant::MmrlPlusPlus => {
            let delta = params.tensor(names::REP_A)?.matmul(params.tensor(names::REP_B)?)?;
            params.tensor(names::CLASS)?.add(&delta)
        }
    }
}

pub fn project_representation_feature<T: Scalar>(
    params: &ParameterSet<T>,
    cfg: &EncoderConfig,
    r_l: &Tensor<T>,
) -> Result<Tensor<T>> {
    project(r_l, &representation_weight(params, cfg)?, "representation")
}

/// `(n, d_v) -> (n, d)` through the frozen class projection.
pub fn class_feature_on_graph<T: Scalar>(g: &mut Graph<T>, b: &mut Binder<'_, T>, c_l: Var) -> Result<Var> {
    let w = b.var(g, names::CLASS)?;
    g.matmul(c_l, w)
}

pub fn text_feature_on_graph<T: Scalar>(g: &mut Graph<T>, b: &mut Binder<'_, T>, e_l: Var) -> Result<Var> {
    let w = b.var(g, names::TEXT)?;
    g.matmul(e_l, w)
}

/// Projects already pooled `(n, d_v)` representation features.
pub fn representation_feature_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    cfg: &EncoderConfig,
    r_l: Var,
) -> Result<Var> {
    match cfg.variant {
        Variant::Mmrl => {
            let w = b.var(g, names::REP)?;
            g.matmul(r_l, w)
        }
        Variant::MmrlPlusPlus => {
            let wc = b.var(g, names::CLASS)?;
            let a = b.var(g, names::REP_A)?;
            let bb = b.var(g, names::REP_B)?;
            let base = g.matmul(r_l, wc)?;
            let low = g.matmul(r_l, a)?;
            let low = g.matmul(low, bb)?;
            g.add(base, low)
        }
    }
}
