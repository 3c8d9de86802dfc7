//! Frozen pre-norm transformer towers standing in for pre-trained weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::error::Result;
use crate::numerics::{Binder, Graph, Parameter, ParameterSet, Scalar, Tensor, Var};

pub const VISUAL: &str = "backbone.visual";
pub const TEXTUAL: &str = "backbone.text";

const LN_EPS: f64 = 1e-5;

pub mod names {
    use super::{TEXTUAL, VISUAL};

    pub struct Visual {
        pub patch_embed: String,
        pub class_embed: String,
        pub pos_embed: String,
        pub ln_pre: String,
        pub ln_post: String,
    }

    pub struct Textual {
        pub token_embed: String,
        pub pos_embed: String,
        pub ln_final: String,
    }

    pub fn visual() -> Visual {
        Visual {
            patch_embed: format!("{VISUAL}.patch_embed"),
            class_embed: format!("{VISUAL}.class_embed"),
            pos_embed: format!("{VISUAL}.pos_embed"),
            ln_pre: format!("{VISUAL}.ln_pre"),
            ln_post: format!("{VISUAL}.ln_post"),
        }
    }

    pub fn textual() -> Textual {
        Textual {
            token_embed: format!("{TEXTUAL}.token_embed"),
            pos_embed: format!("{TEXTUAL}.pos_embed"),
            ln_final: format!("{TEXTUAL}.ln_final"),
        }
    }

    pub fn layer(tower: &str, layer: usize, part: &str) -> String {
        format!("{tower}.layers.{layer}.{part}")
    }
}

fn frozen<T: Scalar>(params: &mut ParameterSet<T>, name: String, value: Tensor<T>) -> Result<()> {
    params.insert(Parameter::new(name, value, false))
}

fn norm_params<T: Scalar>(params: &mut ParameterSet<T>, prefix: &str, width: usize) -> Result<()> {
    frozen(params, format!("{prefix}.gain"), Tensor::filled(&[width], T::one()))?;
    frozen(params, format!("{prefix}.bias"), Tensor::zeros(&[width]))
}

fn tower_layers<T: Scalar>(
    params: &mut ParameterSet<T>,
    cfg: &EncoderConfig,
    tower: &str,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let hidden = 4 * width;
    let w_std = 1.0 / (width as f64).sqrt();
    for layer in 1..=cfg.layers {
        let name = |part: &str| names::layer(tower, layer, part);
        norm_params(params, &name("ln1"), width)?;
        for proj in ["q", "k", "v", "o"] {
            frozen(
                params,
                name(&format!("attn.{proj}.weight")),
                Tensor::randn(&[width, width], w_std, rng),
            )?;
            frozen(
                params,
                name(&format!("attn.{proj}.bias")),
                Tensor::randn(&[width], 0.02, rng),
            )?;
        }
        norm_params(params, &name("ln2"), width)?;
        frozen(
            params,
            name("mlp.fc1.weight"),
            Tensor::randn(&[width, hidden], w_std, rng),
        )?;
        frozen(params, name("mlp.fc1.bias"), Tensor::randn(&[hidden], 0.02, rng))?;
        frozen(
            params,
            name("mlp.fc2.weight"),
            Tensor::randn(&[hidden, width], 1.0 / (hidden as f64).sqrt(), rng),
        )?;
        frozen(params, name("mlp.fc2.bias"), Tensor::randn(&[width], 0.02, rng))?;
    }
    Ok(())
}

/// Adds both seeded random towers to `params`, all frozen.
pub fn init_backbone<T: Scalar>(cfg: &EncoderConfig, seed: u64, params: &mut ParameterSet<T>) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = names::visual();
    frozen(
        params,
        v.patch_embed,
        Tensor::randn(&[cfg.patch_dim, cfg.d_v], 1.0 / (cfg.patch_dim as f64).sqrt(), &mut rng),
    )?;
    frozen(params, v.class_embed, Tensor::randn(&[1, cfg.d_v], 1.0, &mut rng))?;
    frozen(
        params,
        v.pos_embed,
        Tensor::randn(&[cfg.patches + 1, cfg.d_v], 0.1, &mut rng),
    )?;
    norm_params(params, &v.ln_pre, cfg.d_v)?;
    tower_layers(params, cfg, VISUAL, cfg.d_v, &mut rng)?;
    norm_params(params, &v.ln_post, cfg.d_v)?;

    let t = names::textual();
    frozen(
        params,
        t.token_embed,
        Tensor::randn(&[cfg.vocab, cfg.d_t], 1.0, &mut rng),
    )?;
    frozen(
        params,
        t.pos_embed,
        Tensor::randn(&[cfg.text_len, cfg.d_t], 0.1, &mut rng),
    )?;
    tower_layers(params, cfg, TEXTUAL, cfg.d_t, &mut rng)?;
    norm_params(params, &t.ln_final, cfg.d_t)
}

pub(super) fn affine_norm<T: Scalar>(g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let gain = b.var(g, &format!("{prefix}.gain"))?;
    let bias = b.var(g, &format!("{prefix}.bias"))?;
    let n = g.layer_norm(x, T::of(LN_EPS))?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

/// One pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
pub(super) fn layer_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    cfg: &EncoderConfig,
    tower: &str,
    layer: usize,
    x: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let name = |part: &str| names::layer(tower, layer, part);
    let h = affine_norm(g, b, x, &name("ln1"))?;
    let proj = |g: &mut Graph<T>, b: &mut Binder<'_, T>, p: &str, input: Var| -> Result<Var> {
        let w = b.var(g, &name(&format!("attn.{p}.weight")))?;
        let bias = b.var(g, &name(&format!("attn.{p}.bias")))?;
        g.linear(input, w, Some(bias))
    };
    let q = proj(g, b, "q", h)?;
    let k = proj(g, b, "k", h)?;
    let v = proj(g, b, "v", h)?;
    let a = g.multi_head_attention(q, k, v, mask, cfg.heads)?;
    let a = proj(g, b, "o", a)?;
    let x = g.add(x, a)?;

    let h = affine_norm(g, b, x, &name("ln2"))?;
    let w1 = b.var(g, &name("mlp.fc1.weight"))?;
    let b1 = b.var(g, &name("mlp.fc1.bias"))?;
    let w2 = b.var(g, &name("mlp.fc2.weight"))?;
    let b2 = b.var(g, &name("mlp.fc2.bias"))?;
    let h = g.linear(h, w1, Some(b1))?;
    let h = g.quick_gelu(h)?;
    let h = g.linear(h, w2, Some(b2))?;
    g.add(x, h)
}
