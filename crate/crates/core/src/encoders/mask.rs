use super::EncoderConfig;
use crate::error::{MmrlError, Result};
use crate::numerics::{Scalar, Tensor, MASK_BLOCKED};

/// Additive causal mask: row `i` may attend to columns `0..=i`.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let blocked = T::of(MASK_BLOCKED);
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            m.data_mut()[i * n + j] = blocked;
        }
    }
    m
}

/// Text-branch mask for `layer`. Before the insertion layer this is the plain
/// `n x n` causal mask; from layer `J` on, `k` tokens sit at position `p` and
/// the mask is causal over the extended `n + k` sequence.
pub fn build_text_attention_mask<T: Scalar>(
    n: usize,
    k: usize,
    p: usize,
    layer: usize,
    cfg: &EncoderConfig,
) -> Result<Tensor<T>> {
    if p == 0 || p > n {
        return Err(MmrlError::Range {
            what: "insertion position",
            index: p,
            lo: 1,
            hi: n,
        });
    }
    if layer < cfg.insert_from {
        Ok(causal_mask(n))
    } else {
        Ok(causal_mask(n + k))
    }
}
