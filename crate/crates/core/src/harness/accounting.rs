use serde::Serialize;

use crate::encoders::{EncoderConfig, Variant};
use crate::objective::Ablations;
use crate::trainer::trainable_shapes;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    pub total: usize,
    /// `(group, count)` in a fixed order; groups sum to `total`.
    pub groups: Vec<(&'static str, usize)>,
}

impl ParameterCount {
    pub fn group(&self, name: &str) -> usize {
        self.groups.iter().find(|(g, _)| *g == name).map_or(0, |(_, c)| *c)
    }
}

/// Closed-form trainable-parameter count. `cfg.residual_bias` adds a
/// per-layer bias to every shared-residual aligner.
pub fn count_trainable_parameters(cfg: &EncoderConfig, ablations: &Ablations) -> ParameterCount {
    let layers = cfg.aligner_count();
    let visual = !ablations.no_image_branch && cfg.k > 0;
    let textual = !ablations.no_text_branch && cfg.k > 0;
    let branches = visual as usize + textual as usize;
    let spaces = match (branches, ablations.independent_spaces) {
        (0, _) => 0,
        (n, true) => n,
        (_, false) => 1,
    };
    let aligner = |on: bool, width: usize| -> usize {
        if !on {
            return 0;
        }
        let full = cfg.d_r * width + width;
        match cfg.variant {
            Variant::Mmrl => layers * full,
            Variant::MmrlPlusPlus => {
                let bias = if cfg.residual_bias { width } else { 0 };
                full + layers * (cfg.d_r * cfg.r1 + cfg.r1 * width + bias)
            }
        }
    };
    let head = match cfg.variant {
        Variant::Mmrl => cfg.d_v * cfg.d,
        Variant::MmrlPlusPlus => cfg.d_v * cfg.r2 + cfg.r2 * cfg.d,
    };
    let groups = vec![
        ("representation space", spaces * cfg.k * cfg.d_r),
        ("visual aligners", aligner(visual, cfg.d_v)),
        ("text aligners", aligner(textual, cfg.d_t)),
        ("representation head", head),
    ];
    ParameterCount {
        total: groups.iter().map(|(_, c)| c).sum(),
        groups,
    }
}

/// Count obtained by enumerating the declared trainable tensor shapes.
pub fn enumerate_trainable_parameters(cfg: &EncoderConfig, ablations: &Ablations) -> usize {
    trainable_shapes(cfg, ablations)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}
