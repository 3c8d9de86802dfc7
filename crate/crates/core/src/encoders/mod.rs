//! Frozen miniature image and text transformers with representation-token
//! insertion from layer `J` onward.

mod backbone;
mod mask;

pub use backbone::{init_backbone, names as backbone_names};
pub use mask::{build_text_attention_mask, causal_mask};

use serde::{Deserialize, Serialize};

use crate::error::{MmrlError, Result};
use crate::numerics::{Binder, Graph, ParameterSet, Scalar, Tensor, Var};
use crate::repspace::{aligned_tokens_on_graph, Modality};

/// Which adaptation scheme the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Independent aligner per insertion layer, fresh tokens at every layer.
    Mmrl,
    /// Shared-residual aligners and progressive token composition.
    MmrlPlusPlus,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Mmrl => "MMRL",
            Variant::MmrlPlusPlus => "MMRL++",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mmrl" => Ok(Variant::Mmrl),
            "mmrl++" | "mmrlpp" | "mmrl_plus_plus" => Ok(Variant::MmrlPlusPlus),
            other => Err(MmrlError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Dimensions of the dual encoder and its adaptation components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Transformer layers per encoder (`L`).
    pub layers: usize,
    pub heads: usize,
    pub d_v: usize,
    pub d_t: usize,
    /// Shared embedding width.
    pub d: usize,
    /// Representation space width.
    pub d_r: usize,
    /// Image patches per input (`M`).
    pub patches: usize,
    /// Raw values per patch before the frozen patch embedding.
    pub patch_dim: usize,
    /// Text token capacity (`N`).
    pub text_len: usize,
    pub vocab: usize,
    /// First layer (1-based) receiving representation tokens; `L + 1` disables insertion.
    pub insert_from: usize,
    /// Representation tokens (`K`).
    pub k: usize,
    pub beta: f64,
    pub r1: usize,
    pub r2: usize,
    pub variant: Variant,
    /// Per-layer residual bias on shared-residual aligners.
    pub residual_bias: bool,
    /// Add the backbone's positional rows `1..=K` to inserted tokens.
    pub rep_positional: bool,
}

impl EncoderConfig {
    /// Small configuration used for training and property tests.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_v: 32,
            d_t: 32,
            d: 32,
            d_r: 16,
            patches: 16,
            patch_dim: 8,
            text_len: 16,
            vocab: 64,
            insert_from: 2,
            k: 3,
            beta: 0.9,
            r1: 2,
            r2: 4,
            variant: Variant::MmrlPlusPlus,
            residual_bias: false,
            rep_positional: false,
        }
    }

    /// ViT-B/16-sized dimensions used for parameter accounting.
    pub fn vit_b16() -> Self {
        Self {
            layers: 12,
            heads: 8,
            d_v: 768,
            d_t: 512,
            d: 512,
            d_r: 512,
            patches: 196,
            patch_dim: 768,
            text_len: 77,
            vocab: 49408,
            insert_from: 6,
            k: 5,
            beta: 0.9,
            r1: 4,
            r2: 64,
            variant: Variant::Mmrl,
            residual_bias: false,
            rep_positional: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MmrlError::Config(m));
        if self.layers == 0 {
            return fail("layer count must be positive".into());
        }
        if self.insert_from == 0 || self.insert_from > self.layers + 1 {
            return fail(format!(
                "insertion layer J={} outside 1..={}",
                self.insert_from,
                self.layers + 1
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta {} outside [0, 1]", self.beta));
        }
        if self.heads == 0 || !self.d_v.is_multiple_of(self.heads) || !self.d_t.is_multiple_of(self.heads) {
            return fail(format!(
                "widths d_v={} d_t={} not divisible by {} heads",
                self.d_v, self.d_t, self.heads
            ));
        }
        for (name, v) in [
            ("d", self.d),
            ("d_r", self.d_r),
            ("patches", self.patches),
            ("patch_dim", self.patch_dim),
            ("text_len", self.text_len),
            ("r1", self.r1),
            ("r2", self.r2),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.vocab < 4 {
            return fail(format!("vocabulary of {} cannot hold special tokens", self.vocab));
        }
        if self.text_len < 2 {
            return fail("text capacity must hold BOS and EOS".into());
        }
        if self.rep_positional && (self.k > self.patches || self.k >= self.text_len) {
            return fail("positional rows for inserted tokens exceed the position tables".into());
        }
        Ok(())
    }

    pub fn insertion_enabled(&self) -> bool {
        self.insert_from <= self.layers && self.k > 0
    }

    /// Index of the first aligner (`J - 1`).
    pub fn first_aligner(&self) -> usize {
        self.insert_from - 1
    }

    /// Number of insertion layers (`L - J + 1`).
    pub fn aligner_count(&self) -> usize {
        (self.layers + 1).saturating_sub(self.insert_from)
    }

    /// The composition coefficient actually used; MMRL always takes fresh tokens.
    pub fn effective_beta(&self) -> f64 {
        match self.variant {
            Variant::Mmrl => 1.0,
            Variant::MmrlPlusPlus => self.beta,
        }
    }

    pub fn bos(&self) -> usize {
        self.vocab - 2
    }

    pub fn eos(&self) -> usize {
        self.vocab - 1
    }

    pub fn pad(&self) -> usize {
        0
    }
}

/// Graph handles produced by the image encoder.
#[derive(Clone, Copy, Debug)]
pub struct ImageForward {
    /// `(1, d_v)` class token output.
    pub class_out: Var,
    /// `(K, d_v)` representation token output, present when tokens were inserted.
    pub rep_out: Option<Var>,
    /// Final normalized sequence.
    pub sequence: Var,
}

/// Graph handles produced by the text encoder.
#[derive(Clone, Copy, Debug)]
pub struct TextForward {
    /// `(1, d_t)` EOS output.
    pub eos_out: Var,
    pub eos_index: usize,
    pub rep_out: Option<Var>,
    pub sequence: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageForwardResult<T: Scalar = f32> {
    pub class_out: Tensor<T>,
    pub rep_out: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextForwardResult<T: Scalar = f32> {
    pub eos_out: Tensor<T>,
    pub eos_index: usize,
    pub rep_out: Option<Tensor<T>>,
}

/// `beta * fresh + (1 - beta) * carried`.
pub fn prc_mix<T: Scalar>(fresh: &Tensor<T>, carried: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(MmrlError::Config(format!("beta {beta} outside [0, 1]")));
    }
    let b = T::of(beta);
    let c = T::of(1.0 - beta);
    fresh.zip_map(carried, |f, o| f * b + o * c)
}

fn prc_mix_on_graph<T: Scalar>(g: &mut Graph<T>, fresh: Var, carried: Var, beta: f64) -> Result<Var> {
    let f = g.scale(fresh, T::of(beta))?;
    let o = g.scale(carried, T::of(1.0 - beta))?;
    g.add(f, o)
}

/// Token positions of a validated text sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextLayout {
    pub len: usize,
    pub eos: usize,
}

pub fn validate_text(ids: &[usize], cfg: &EncoderConfig) -> Result<TextLayout> {
    if ids.first() != Some(&cfg.bos()) {
        return Err(MmrlError::Input("text must start with BOS".into()));
    }
    let eos: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == cfg.eos())
        .map(|(i, _)| i)
        .collect();
    if eos.len() != 1 {
        return Err(MmrlError::Input(format!(
            "text must contain exactly one EOS, found {}",
            eos.len()
        )));
    }
    if ids.len() > cfg.text_len {
        return Err(MmrlError::Capacity {
            len: ids.len(),
            extra: cfg.k,
            capacity: cfg.text_len + cfg.k,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab) {
        return Err(MmrlError::Range {
            what: "token id",
            index: bad,
            lo: 0,
            hi: cfg.vocab - 1,
        });
    }
    Ok(TextLayout {
        len: ids.len(),
        eos: eos[0],
    })
}

fn check_inserted(cfg: &EncoderConfig, inserted: Option<&[Var]>) -> Result<()> {
    if let Some(tokens) = inserted {
        if !cfg.insertion_enabled() {
            return Err(MmrlError::Contract("tokens supplied but insertion is disabled".into()));
        }
        if tokens.len() != cfg.aligner_count() {
            return Err(MmrlError::Shape(format!(
                "{} token sets for {} insertion layers",
                tokens.len(),
                cfg.aligner_count()
            )));
        }
    }
    Ok(())
}

/// Attention mask for a layer, given the graph and the 1-based layer index.
type MaskFn<'a, T> = dyn Fn(&mut Graph<T>, usize) -> Result<Option<Var>> + 'a;

/// Runs the layer stack, inserting representation tokens right after the
/// leading token from layer `J` on. Returns the final normalized sequence.
#[allow(clippy::too_many_arguments)]
fn run_layers<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    cfg: &EncoderConfig,
    tower: &str,
    mut x: Var,
    inserted: Option<&[Var]>,
    rep_pos: Option<Var>,
    mask_for: &MaskFn<'_, T>,
) -> Result<Var> {
    let k = cfg.k;
    let beta = cfg.effective_beta();
    for layer in 1..=cfg.layers {
        if let Some(tokens) = inserted.filter(|_| layer >= cfg.insert_from) {
            let mut fresh = tokens[layer - cfg.insert_from];
            if let Some(pos) = rep_pos {
                fresh = g.add(fresh, pos)?;
            }
            let n = g.value(x).rows();
            let lead = g.slice_rows(x, 0, 1)?;
            x = if layer == cfg.insert_from {
                let rest = g.slice_rows(x, 1, n - 1)?;
                g.concat_rows(&[lead, fresh, rest])?
            } else {
                let carried = g.slice_rows(x, 1, k)?;
                let rest = g.slice_rows(x, 1 + k, n - 1 - k)?;
                let tok = if cfg.variant == Variant::Mmrl {
                    fresh
                } else {
                    prc_mix_on_graph(g, fresh, carried, beta)?
                };
                g.concat_rows(&[lead, tok, rest])?
            };
        }
        let mask = mask_for(g, layer)?;
        x = backbone::layer_forward(g, b, cfg, tower, layer, x, mask)?;
    }
    Ok(x)
}

/// Image encoder on a graph. `inserted` holds one `(K, d_v)` token var per
/// insertion layer, or `None` to run the frozen backbone alone.
pub fn encode_image_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    cfg: &EncoderConfig,
    patches: &Tensor<T>,
    inserted: Option<&[Var]>,
) -> Result<ImageForward> {
    if patches.dims2()? != (cfg.patches, cfg.patch_dim) {
        return Err(MmrlError::Shape(format!(
            "image patches {:?}, expected ({}, {})",
            patches.shape(),
            cfg.patches,
            cfg.patch_dim
        )));
    }
    check_inserted(cfg, inserted)?;
    let n = backbone::names::visual();
    let x = g.constant(patches.clone());
    let proj = b.var(g, &n.patch_embed)?;
    let embedded = g.matmul(x, proj)?;
    let cls = b.var(g, &n.class_embed)?;
    let seq = g.concat_rows(&[cls, embedded])?;
    let pos = b.var(g, &n.pos_embed)?;
    let seq = g.add(seq, pos)?;
    let seq = backbone::affine_norm(g, b, seq, &n.ln_pre)?;
    let rep_pos = match (cfg.rep_positional, inserted) {
        (true, Some(_)) => Some(g.slice_rows(pos, 1, cfg.k)?),
        _ => None,
    };
    let out = run_layers(g, b, cfg, backbone::VISUAL, seq, inserted, rep_pos, &|_, _| Ok(None))?;
    let out = backbone::affine_norm(g, b, out, &n.ln_post)?;
    let class_out = g.slice_rows(out, 0, 1)?;
    let rep_out = match inserted {
        Some(_) => Some(g.slice_rows(out, 1, cfg.k)?),
        None => None,
    };
    Ok(ImageForward {
        class_out,
        rep_out,
        sequence: out,
    })
}

/// Text encoder on a graph, with the extended causal mask after insertion.
pub fn encode_text_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    cfg: &EncoderConfig,
    ids: &[usize],
    inserted: Option<&[Var]>,
) -> Result<TextForward> {
    let layout = validate_text(ids, cfg)?;
    check_inserted(cfg, inserted)?;
    let n = backbone::names::textual();
    let table = b.var(g, &n.token_embed)?;
    let tok = g.gather(table, ids)?;
    let pos_all = b.var(g, &n.pos_embed)?;
    let pos = g.slice_rows(pos_all, 0, layout.len)?;
    let seq = g.add(tok, pos)?;
    let rep_pos = match (cfg.rep_positional, inserted) {
        (true, Some(_)) => Some(g.slice_rows(pos_all, 1, cfg.k)?),
        _ => None,
    };
    let extra = if inserted.is_some() { cfg.k } else { 0 };
    let mask_for = |g: &mut Graph<T>, layer: usize| -> Result<Option<Var>> {
        let k = if layer >= cfg.insert_from { extra } else { 0 };
        let m = build_text_attention_mask::<T>(layout.len, k, 1, layer, cfg)?;
        Ok(Some(g.constant(m)))
    };
    let out = run_layers(g, b, cfg, backbone::TEXTUAL, seq, inserted, rep_pos, &mask_for)?;
    let out = backbone::affine_norm(g, b, out, &n.ln_final)?;
    let eos_index = layout.eos + extra;
    let eos_out = g.slice_rows(out, eos_index, 1)?;
    let rep_out = match inserted {
        Some(_) => Some(g.slice_rows(out, 1, cfg.k)?),
        None => None,
    };
    Ok(TextForward {
        eos_out,
        eos_index,
        rep_out,
        sequence: out,
    })
}

/// Aligned tokens for `m`, or `None` when insertion is disabled or the
/// modality has no aligners.
pub fn tokens_for<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    cfg: &EncoderConfig,
    m: Modality,
    independent_spaces: bool,
) -> Result<Option<Vec<Var>>> {
    if !cfg.insertion_enabled() {
        return Ok(None);
    }
    let present = match cfg.variant {
        Variant::Mmrl => crate::repspace::names::full_weight(m, cfg.first_aligner()),
        Variant::MmrlPlusPlus => crate::repspace::names::shared_weight(m),
    };
    if b.params().get(&present).is_none() {
        return Ok(None);
    }
    aligned_tokens_on_graph(g, b, cfg, m, independent_spaces).map(Some)
}

/// Image forward pass over a parameter set; `insert = false` runs the frozen path.
pub fn encode_image<T: Scalar>(
    params: &ParameterSet<T>,
    cfg: &EncoderConfig,
    patches: &Tensor<T>,
    insert: bool,
    independent_spaces: bool,
) -> Result<ImageForwardResult<T>> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let tokens = if insert {
        tokens_for(&mut g, &mut b, cfg, Modality::Visual, independent_spaces)?
    } else {
        None
    };
    let out = encode_image_on_graph(&mut g, &mut b, cfg, patches, tokens.as_deref())?;
    Ok(ImageForwardResult {
        class_out: g.value(out.class_out).clone(),
        rep_out: out.rep_out.map(|v| g.value(v).clone()),
    })
}

/// Text forward pass over a parameter set; `insert = false` runs the frozen path.
pub fn encode_text<T: Scalar>(
    params: &ParameterSet<T>,
    cfg: &EncoderConfig,
    ids: &[usize],
    insert: bool,
    independent_spaces: bool,
) -> Result<TextForwardResult<T>> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let tokens = if insert {
        tokens_for(&mut g, &mut b, cfg, Modality::Textual, independent_spaces)?
    } else {
        None
    };
    let out = encode_text_on_graph(&mut g, &mut b, cfg, ids, tokens.as_deref())?;
    Ok(TextForwardResult {
        eos_out: g.value(out.eos_out).clone(),
        eos_index: out.eos_index,
        rep_out: out.rep_out.map(|v| g.value(v).clone()),
    })
}
