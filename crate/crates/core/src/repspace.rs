//! The shared representation space and the aligners that carry its tokens
//! into each modality at every insertion layer.
//!
//! Two aligner layouts are supported:
//!
//! * a full stack, holding an independent `(d_r, d_m)` weight and bias for every
//!   insertion layer, and
//! * a shared-residual stack, holding one shared weight and bias per modality
//!   plus a rank-`r1` residual `A_i B_i` per layer.
//!
//! Parameters live in a [`ParameterSet`] under the names produced by [`names`];
//! the typed stacks here are value views used for composition, inspection and
//! synthesis of equivalent weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EncoderConfig, Variant};
use crate::error::{MmrlError, Result};
use crate::numerics::{Binder, Graph, Parameter, ParameterSet, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }

    pub fn width(self, cfg: &EncoderConfig) -> usize {
        match self {
            Modality::Visual => cfg.d_v,
            Modality::Textual => cfg.d_t,
        }
    }
}

/// Parameter naming scheme for the trainable adaptation components.
pub mod names {
    use super::Modality;

    pub const SPACE: &str = "space.tokens";

    /// Token matrix feeding `m`; `independent` selects per-modality spaces.
    pub fn space(m: Modality, independent: bool) -> String {
        if independent {
            format!("{SPACE}.{}", m.tag())
        } else {
            SPACE.to_string()
        }
    }

    pub fn full_weight(m: Modality, i: usize) -> String {
        format!("aligner.{}.{i}.weight", m.tag())
    }

    pub fn full_bias(m: Modality, i: usize) -> String {
        format!("aligner.{}.{i}.bias", m.tag())
    }

    pub fn shared_weight(m: Modality) -> String {
        format!("aligner.{}.shared.weight", m.tag())
    }

    pub fn shared_bias(m: Modality) -> String {
        format!("aligner.{}.shared.bias", m.tag())
    }

    pub fn residual_a(m: Modality, i: usize) -> String {
        format!("aligner.{}.{i}.lora_a", m.tag())
    }

    pub fn residual_b(m: Modality, i: usize) -> String {
        format!("aligner.{}.{i}.lora_b", m.tag())
    }

    pub fn residual_bias(m: Modality, i: usize) -> String {
        format!("aligner.{}.{i}.bias_residual", m.tag())
    }
}

/// Learnable `(K, d_r)` token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationSpace<T: Scalar = f32> {
    tokens: Tensor<T>,
}

impl<T: Scalar> RepresentationSpace<T> {
    pub fn from_tokens(tokens: Tensor<T>) -> Result<Self> {
        tokens.dims2()?;
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn count(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Zero-mean Gaussian initialization of the representation space.
pub fn init_space<T: Scalar>(k: usize, d_r: usize, std: f64, seed: u64) -> Result<RepresentationSpace<T>> {
    if k == 0 || d_r == 0 {
        return Err(MmrlError::Config(format!(
            "representation space needs K >= 1 and d_r >= 1, got K={k}, d_r={d_r}"
        )));
    }
    if !std.is_finite() || std <= 0.0 {
        return Err(MmrlError::Config(format!("init std must be positive, got {std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(RepresentationSpace {
        tokens: Tensor::randn(&[k, d_r], std, &mut rng),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Independent aligners for the insertion layers `first..first + len`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullAlignerStack<T: Scalar = f32> {
    pub first: usize,
    pub visual: Option<Vec<Linear<T>>>,
    pub textual: Option<Vec<Linear<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residual<T: Scalar = f32> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedResidual<T: Scalar = f32> {
    pub shared: Linear<T>,
    pub residuals: Vec<Residual<T>>,
}

/// One shared aligner per modality plus per-layer low-rank residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedResidualStack<T: Scalar = f32> {
    pub first: usize,
    pub rank: usize,
    pub visual: Option<SharedResidual<T>>,
    pub textual: Option<SharedResidual<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AlignerBank<T: Scalar = f32> {
    Full(FullAlignerStack<T>),
    SharedResidual(SharedResidualStack<T>),
}

/// Tokens carried into one modality for one insertion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTokens<T: Scalar = f32> {
    pub modality: Modality,
    pub layer: usize,
    pub tokens: Tensor<T>,
}

fn check_layer(first: usize, count: usize, i: usize) -> Result<usize> {
    if i < first || i >= first + count {
        return Err(MmrlError::Range {
            what: "aligner layer",
            index: i,
            lo: first,
            hi: (first + count).saturating_sub(1),
        });
    }
    Ok(i - first)
}

fn absent(m: Modality) -> MmrlError {
    MmrlError::Contract(format!("no {} aligners in this bank", m.tag()))
}

impl<T: Scalar> AlignerBank<T> {
    /// Randomly initialized bank for `cfg`. Full-stack layers start from one
    /// shared Gaussian draw per modality; residual `B` factors start at zero.
    pub fn init(cfg: &EncoderConfig, modalities: &[Modality], std: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = cfg.first_aligner();
        let count = cfg.aligner_count();
        let draw = |m: Modality, rng: &mut ChaCha8Rng| -> Linear<T> {
            Linear {
                weight: Tensor::randn(&[cfg.d_r, m.width(cfg)], std, rng),
                bias: Tensor::zeros(&[m.width(cfg)]),
            }
        };
        match cfg.variant {
            Variant::Mmrl => {
                let mut stack = FullAlignerStack {
                    first,
                    visual: None,
                    textual: None,
                };
                for &m in modalities {
                    let base = draw(m, &mut rng);
                    let layers = vec![base; count];
                    match m {
                        Modality::Visual => stack.visual = Some(layers),
                        Modality::Textual => stack.textual = Some(layers),
                    }
                }
                Ok(AlignerBank::Full(stack))
            }
            Variant::MmrlPlusPlus => {
                let mut stack = SharedResidualStack {
                    first,
                    rank: cfg.r1,
                    visual: None,
                    textual: None,
                };
                for &m in modalities {
                    let shared = draw(m, &mut rng);
                    let residuals = (0..count)
                        .map(|_| Residual {
                            a: Tensor::randn(&[cfg.d_r, cfg.r1], std, &mut rng),
                            b: Tensor::zeros(&[cfg.r1, m.width(cfg)]),
                            bias: cfg.residual_bias.then(|| Tensor::zeros(&[m.width(cfg)])),
                        })
                        .collect();
                    let sr = SharedResidual { shared, residuals };
                    match m {
                        Modality::Visual => stack.visual = Some(sr),
                        Modality::Textual => stack.textual = Some(sr),
                    }
                }
                Ok(AlignerBank::SharedResidual(stack))
            }
        }
    }

    pub fn first(&self) -> usize {
        match self {
            AlignerBank::Full(s) => s.first,
            AlignerBank::SharedResidual(s) => s.first,
        }
    }

    pub fn has(&self, m: Modality) -> bool {
        match (self, m) {
            (AlignerBank::Full(s), Modality::Visual) => s.visual.is_some(),
            (AlignerBank::Full(s), Modality::Textual) => s.textual.is_some(),
            (AlignerBank::SharedResidual(s), Modality::Visual) => s.visual.is_some(),
            (AlignerBank::SharedResidual(s), Modality::Textual) => s.textual.is_some(),
        }
    }

    /// Weight and bias of the aligner feeding layer index `i` (`J-1..=L-1`).
    pub fn compose_aligner_weight(&self, m: Modality, i: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        match self {
            AlignerBank::Full(s) => {
                let layers = match m {
                    Modality::Visual => s.visual.as_ref(),
                    Modality::Textual => s.textual.as_ref(),
                }
                .ok_or_else(|| absent(m))?;
                let idx = check_layer(s.first, layers.len(), i)?;
                Ok((layers[idx].weight.clone(), layers[idx].bias.clone()))
            }
            AlignerBank::SharedResidual(s) => {
                let sr = match m {
                    Modality::Visual => s.visual.as_ref(),
                    Modality::Textual => s.textual.as_ref(),
                }
                .ok_or_else(|| absent(m))?;
                let idx = check_layer(s.first, sr.residuals.len(), i)?;
                let r = &sr.residuals[idx];
                let weight = sr.shared.weight.add(&r.a.matmul(&r.b)?)?;
                let bias = match &r.bias {
                    Some(b) => sr.shared.bias.add(b)?,
                    None => sr.shared.bias.clone(),
                };
                Ok((weight, bias))
            }
        }
    }

    /// Full stack whose every aligner equals this bank's composed weights.
    pub fn to_full(&self, layers: usize) -> Result<FullAlignerStack<T>> {
        let first = self.first();
        let mut out = FullAlignerStack {
            first,
            visual: None,
            textual: None,
        };
        for m in Modality::BOTH {
            if !self.has(m) {
                continue;
            }
            let stack = (first..first + layers)
                .map(|i| {
                    self.compose_aligner_weight(m, i)
                        .map(|(weight, bias)| Linear { weight, bias })
                })
                .collect::<Result<Vec<_>>>()?;
            match m {
                Modality::Visual => out.visual = Some(stack),
                Modality::Textual => out.textual = Some(stack),
            }
        }
        Ok(out)
    }

    /// Adds every tensor of the bank to `params` as trainable.
    pub fn register(&self, params: &mut ParameterSet<T>) -> Result<()> {
        match self {
            AlignerBank::Full(s) => {
                for m in Modality::BOTH {
                    let layers = match m {
                        Modality::Visual => &s.visual,
                        Modality::Textual => &s.textual,
                    };
                    for (j, l) in layers.iter().flatten().enumerate() {
                        let i = s.first + j;
                        params.insert(Parameter::new(names::full_weight(m, i), l.weight.clone(), true))?;
                        params.insert(Parameter::new(names::full_bias(m, i), l.bias.clone(), true))?;
                    }
                }
            }
            AlignerBank::SharedResidual(s) => {
                for m in Modality::BOTH {
                    let Some(sr) = (match m {
                        Modality::Visual => &s.visual,
                        Modality::Textual => &s.textual,
                    }) else {
                        continue;
                    };
                    params.insert(Parameter::new(names::shared_weight(m), sr.shared.weight.clone(), true))?;
                    params.insert(Parameter::new(names::shared_bias(m), sr.shared.bias.clone(), true))?;
                    for (j, r) in sr.residuals.iter().enumerate() {
                        let i = s.first + j;
                        params.insert(Parameter::new(names::residual_a(m, i), r.a.clone(), true))?;
                        params.insert(Parameter::new(names::residual_b(m, i), r.b.clone(), true))?;
                        if let Some(b) = &r.bias {
                            params.insert(Parameter::new(names::residual_bias(m, i), b.clone(), true))?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads the bank for `cfg` back out of a parameter set.
    pub fn from_params(params: &ParameterSet<T>, cfg: &EncoderConfig) -> Result<Self> {
        let first = cfg.first_aligner();
        let count = cfg.aligner_count();
        let present = |m: Modality| match cfg.variant {
            Variant::Mmrl => params.get(&names::full_weight(m, first)).is_some(),
            Variant::MmrlPlusPlus => params.get(&names::shared_weight(m)).is_some(),
        };
        match cfg.variant {
            Variant::Mmrl => {
                let read = |m: Modality| -> Result<Option<Vec<Linear<T>>>> {
                    if !present(m) {
                        return Ok(None);
                    }
                    (first..first + count)
                        .map(|i| {
                            Ok(Linear {
                                weight: params.tensor(&names::full_weight(m, i))?.clone(),
                                bias: params.tensor(&names::full_bias(m, i))?.clone(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                        .map(Some)
                };
                Ok(AlignerBank::Full(FullAlignerStack {
                    first,
                    visual: read(Modality::Visual)?,
                    textual: read(Modality::Textual)?,
                }))
            }
            Variant::MmrlPlusPlus => {
                let read = |m: Modality| -> Result<Option<SharedResidual<T>>> {
                    if !present(m) {
                        return Ok(None);
                    }
                    let shared = Linear {
                        weight: params.tensor(&names::shared_weight(m))?.clone(),
                        bias: params.tensor(&names::shared_bias(m))?.clone(),
                    };
                    let residuals = (first..first + count)
                        .map(|i| {
                            Ok(Residual {
                                a: params.tensor(&names::residual_a(m, i))?.clone(),
                                b: params.tensor(&names::residual_b(m, i))?.clone(),
                                bias: params.get(&names::residual_bias(m, i)).map(|p| p.value.clone()),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Some(SharedResidual { shared, residuals }))
                };
                Ok(AlignerBank::SharedResidual(SharedResidualStack {
                    first,
                    rank: cfg.r1,
                    visual: read(Modality::Visual)?,
                    textual: read(Modality::Textual)?,
                }))
            }
        }
    }
}

/// `R W + b`, bias broadcast over the token rows.
pub fn align_space_tokens<T: Scalar>(
    space: &RepresentationSpace<T>,
    bank: &AlignerBank<T>,
    m: Modality,
    i: usize,
) -> Result<AlignedTokens<T>> {
    let (weight, bias) = bank.compose_aligner_weight(m, i)?;
    if weight.rows() != space.dim() {
        return Err(MmrlError::Shape(format!(
            "space width {} vs aligner input {}",
            space.dim(),
            weight.rows()
        )));
    }
    Ok(AlignedTokens {
        modality: m,
        layer: i,
        tokens: space.tokens().matmul(&weight)?.add_row(&bias)?,
    })
}

/// Records the aligned tokens for every insertion layer of modality `m` on
/// `g`, reading parameters by name. Returns one `(K, d_m)` var per layer in
/// order `J-1..=L-1`.
pub fn aligned_tokens_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    binder: &mut Binder<'_, T>,
    cfg: &EncoderConfig,
    m: Modality,
    independent_spaces: bool,
) -> Result<Vec<Var>> {
    let space = binder.var(g, &names::space(m, independent_spaces))?;
    let first = cfg.first_aligner();
    let mut out = Vec::with_capacity(cfg.aligner_count());
    match cfg.variant {
        Variant::Mmrl => {
            for i in first..first + cfg.aligner_count() {
                let w = binder.var(g, &names::full_weight(m, i))?;
                let b = binder.var(g, &names::full_bias(m, i))?;
                out.push(g.linear(space, w, Some(b))?);
            }
        }
        Variant::MmrlPlusPlus => {
            let shared_w = binder.var(g, &names::shared_weight(m))?;
            let shared_b = binder.var(g, &names::shared_bias(m))?;
            for i in first..first + cfg.aligner_count() {
                let a = binder.var(g, &names::residual_a(m, i))?;
                let b = binder.var(g, &names::residual_b(m, i))?;
                let delta = g.matmul(a, b)?;
                let w = g.add(shared_w, delta)?;
                let bias = if binder.params().get(&names::residual_bias(m, i)).is_some() {
                    let rb = binder.var(g, &names::residual_bias(m, i))?;
                    g.add(shared_b, rb)?
                } else {
                    shared_b
                };
                out.push(g.linear(space, w, Some(bias))?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(variant: Variant) -> EncoderConfig {
        EncoderConfig {
            variant,
            ..EncoderConfig::desk()
        }
    }

    #[test]
    fn init_is_deterministic_at_vit_b16_shape() {
        let a = init_space::<f32>(5, 512, 0.02, 17).unwrap();
        let b = init_space::<f32>(5, 512, 0.02, 17).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens().shape(), &[5, 512]);
    }

    #[test]
    fn init_sample_std_close_to_configured() {
        for seed in 0..5 {
            let s = init_space::<f64>(5, 512, 0.02, seed).unwrap();
            let d = s.tokens().data();
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((0.016..=0.024).contains(&std), "seed {seed}: std {std}");
            assert!(mean.abs() < 0.002);
        }
    }

    #[test]
    fn init_rejects_bad_configuration() {
        assert!(init_space::<f32>(0, 4, 0.02, 0).is_err());
        assert!(init_space::<f32>(4, 0, 0.02, 0).is_err());
        assert!(init_space::<f32>(4, 4, 0.0, 0).is_err());
        assert!(init_space::<f32>(4, 4, -1.0, 0).is_err());
    }

    #[test]
    fn zero_residual_returns_shared_weight() {
        let cfg = small_cfg(Variant::MmrlPlusPlus);
        let mut bank = AlignerBank::<f32>::init(&cfg, &Modality::BOTH, 0.02, 1).unwrap();
        if let AlignerBank::SharedResidual(s) = &mut bank {
            for r in &mut s.visual.as_mut().unwrap().residuals {
                r.a = Tensor::zeros(r.a.shape());
                r.b = Tensor::randn(r.b.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(2));
            }
        }
        let AlignerBank::SharedResidual(s) = &bank else {
            unreachable!()
        };
        let (w, b) = bank
            .compose_aligner_weight(Modality::Visual, cfg.first_aligner())
            .unwrap();
        assert_eq!(w, s.visual.as_ref().unwrap().shared.weight);
        assert_eq!(b, s.visual.as_ref().unwrap().shared.bias);
    }

    #[test]
    fn full_stack_returns_stored_matrix() {
        let cfg = small_cfg(Variant::Mmrl);
        let mut bank = AlignerBank::<f32>::init(&cfg, &Modality::BOTH, 0.02, 1).unwrap();
        let i = cfg.first_aligner() + 1;
        let stored = Tensor::randn(&[cfg.d_r, cfg.d_t], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        if let AlignerBank::Full(s) = &mut bank {
            s.textual.as_mut().unwrap()[1].weight = stored.clone();
        }
        let (w, _) = bank.compose_aligner_weight(Modality::Textual, i).unwrap();
        assert_eq!(w, stored);
    }

    #[test]
    fn layer_outside_insertion_range_is_rejected() {
        let cfg = small_cfg(Variant::MmrlPlusPlus);
        let bank = AlignerBank::<f32>::init(&cfg, &Modality::BOTH, 0.02, 1).unwrap();
        let below = cfg.first_aligner() - 1;
        let above = cfg.layers;
        for i in [below, above] {
            assert!(matches!(
                bank.compose_aligner_weight(Modality::Visual, i),
                Err(MmrlError::Range { .. })
            ));
        }
    }

    #[test]
    fn identity_zero_and_bias_only_alignment() {
        let space =
            RepresentationSpace::from_tokens(Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(0))).unwrap();
        let bank = |weight: Tensor<f32>, bias: Tensor<f32>| {
            AlignerBank::Full(FullAlignerStack {
                first: 0,
                visual: Some(vec![Linear { weight, bias }]),
                textual: None,
            })
        };
        let out = align_space_tokens(
            &space,
            &bank(Tensor::identity(4), Tensor::zeros(&[4])),
            Modality::Visual,
            0,
        )
        .unwrap();
        assert_eq!(out.tokens, *space.tokens());

        let b = Tensor::vector(vec![1.0f32, -2.0, 0.5, 3.0]).unwrap();
        let out = align_space_tokens(&space, &bank(Tensor::zeros(&[4, 4]), b.clone()), Modality::Visual, 0).unwrap();
        for r in 0..3 {
            assert_eq!(out.tokens.row(r), b.data());
        }

        let wide = bank(Tensor::zeros(&[4, 7]), Tensor::zeros(&[7]));
        assert_eq!(
            align_space_tokens(&space, &wide, Modality::Visual, 0)
                .unwrap()
                .tokens
                .shape(),
            &[3, 7]
        );

        let mismatched = bank(Tensor::zeros(&[5, 7]), Tensor::zeros(&[7]));
        assert!(matches!(
            align_space_tokens(&space, &mismatched, Modality::Visual, 0),
            Err(MmrlError::Shape(_))
        ));
    }

    #[test]
    fn vit_b16_shape_alignment() {
        let space = init_space::<f32>(5, 512, 0.02, 0).unwrap();
        let bank = AlignerBank::Full(FullAlignerStack {
            first: 5,
            visual: Some(vec![Linear {
                weight: Tensor::zeros(&[512, 768]),
                bias: Tensor::zeros(&[768]),
            }]),
            textual: None,
        });
        let out = align_space_tokens(&space, &bank, Modality::Visual, 5).unwrap();
        assert_eq!(out.tokens.shape(), &[5, 768]);
    }

    /// Numerical rank from the eigenvalues of `M^T M` (Jacobi sweeps, f64).
    fn numerical_rank(m: &Tensor<f64>) -> usize {
        let gram = m.transpose().unwrap().matmul(m).unwrap();
        let n = gram.rows();
        let mut a: Vec<f64> = gram.data().to_vec();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[p * n + q].powi(2);
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let eig: Vec<f64> = (0..n).map(|i| a[i * n + i].abs()).collect();
        let max = eig.iter().cloned().fold(0.0, f64::max);
        eig.iter().filter(|&&e| e > 1e-10 * max).count()
    }

    #[test]
    fn composed_residual_rank_is_bounded() {
        let cfg = EncoderConfig {
            d_r: 16,
            d_v: 24,
            d_t: 24,
            heads: 4,
            r1: 3,
            ..small_cfg(Variant::MmrlPlusPlus)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bank = AlignerBank::<f64>::init(&cfg, &[Modality::Visual], 0.02, 4).unwrap();
        if let AlignerBank::SharedResidual(s) = &mut bank {
            for r in &mut s.visual.as_mut().unwrap().residuals {
                r.b = Tensor::randn(r.b.shape(), 1.0, &mut rng);
            }
        }
        let AlignerBank::SharedResidual(s) = &bank else {
            unreachable!()
        };
        let shared = s.visual.as_ref().unwrap().shared.weight.clone();
        for i in cfg.first_aligner()..cfg.layers {
            let (w, _) = bank.compose_aligner_weight(Modality::Visual, i).unwrap();
            let delta = w.sub(&shared).unwrap();
            assert_eq!(delta.shape(), &[16, 24]);
            let rank = numerical_rank(&delta);
            assert!(rank <= cfg.r1 && rank > 0, "rank {rank}");
        }
        // a dense random matrix of the same shape has full rank
        assert_eq!(numerical_rank(&Tensor::randn(&[16, 24], 1.0, &mut rng)), 16);
    }

    #[test]
    fn full_and_shared_residual_agree_on_synthesized_weights() {
        let cfg = small_cfg(Variant::MmrlPlusPlus);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bank = AlignerBank::<f32>::init(&cfg, &Modality::BOTH, 0.02, 8).unwrap();
        if let AlignerBank::SharedResidual(s) = &mut bank {
            for r in &mut s.textual.as_mut().unwrap().residuals {
                r.b = Tensor::randn(r.b.shape(), 0.1, &mut rng);
            }
        }
        let full = AlignerBank::Full(bank.to_full(cfg.aligner_count()).unwrap());
        let space = init_space::<f32>(cfg.k, cfg.d_r, 0.02, 1).unwrap();
        for i in cfg.first_aligner()..cfg.layers {
            let a = align_space_tokens(&space, &bank, Modality::Textual, i).unwrap();
            let b = align_space_tokens(&space, &full, Modality::Textual, i).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn register_and_read_back() {
        for variant in [Variant::Mmrl, Variant::MmrlPlusPlus] {
            let cfg = small_cfg(variant);
            let bank = AlignerBank::<f32>::init(&cfg, &Modality::BOTH, 0.02, 2).unwrap();
            let mut params = ParameterSet::new();
            bank.register(&mut params).unwrap();
            assert!(params.iter().all(|p| p.trainable()));
            assert_eq!(AlignerBank::from_params(&params, &cfg).unwrap(), bank);
        }
    }

    #[test]
    fn shared_residual_has_one_shared_weight_per_modality() {
        let cfg = EncoderConfig {
            layers: 8,
            ..small_cfg(Variant::MmrlPlusPlus)
        };
        let bank = AlignerBank::<f32>::init(&cfg, &Modality::BOTH, 0.02, 2).unwrap();
        let mut params = ParameterSet::new();
        bank.register(&mut params).unwrap();
        let shared = params.iter().filter(|p| p.name().contains(".shared.weight")).count();
        assert_eq!(shared, 2);
        let a = params.iter().filter(|p| p.name().ends_with("lora_a")).count();
        assert_eq!(a, 2 * cfg.aligner_count());
    }
}
