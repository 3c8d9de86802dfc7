use super::params::{NamedTensors, ParameterSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{MmrlError, Result};

/// Central-difference estimate of the gradient of `loss_fn` for every entry of
/// every trainable parameter. Frozen parameters are not probed.
pub fn finite_difference_gradients<T, F>(mut loss_fn: F, params: &ParameterSet<T>, eps: T) -> Result<NamedTensors<T>>
where
    T: Scalar,
    F: FnMut(&ParameterSet<T>) -> Result<T>,
{
    let mut out = finite_difference_jacobian(|p| loss_fn(p).map(|v| vec![v]), params, eps, 1)?;
    Ok(out.remove(0))
}

/// Central differences of a function with `outputs` scalar results, sharing
/// each pair of probes across all outputs. Returns one gradient list per output.
pub fn finite_difference_jacobian<T, F>(
    mut f: F,
    params: &ParameterSet<T>,
    eps: T,
    outputs: usize,
) -> Result<Vec<NamedTensors<T>>>
where
    T: Scalar,
    F: FnMut(&ParameterSet<T>) -> Result<Vec<T>>,
{
    if eps.is_nan() || eps <= T::zero() {
        return Err(MmrlError::Config("finite-difference step must be positive".into()));
    }
    let mut probe = params.clone();
    let two_eps = eps + eps;
    let mut out: Vec<NamedTensors<T>> = vec![Vec::new(); outputs];
    for name in params.trainable_names() {
        let n = params.tensor(&name)?.len();
        let mut grads = vec![Tensor::zeros(params.tensor(&name)?.shape()); outputs];
        for e in 0..n {
            let orig = probe.tensor(&name)?.data()[e];
            probe.value_mut(&name)?.data_mut()[e] = orig + eps;
            let plus = f(&probe)?;
            probe.value_mut(&name)?.data_mut()[e] = orig - eps;
            let minus = f(&probe)?;
            probe.value_mut(&name)?.data_mut()[e] = orig;
            if plus.len() != outputs || minus.len() != outputs {
                return Err(MmrlError::Shape(format!(
                    "function returned {} values, expected {outputs}",
                    plus.len().min(minus.len())
                )));
            }
            for (o, (p, m)) in plus.iter().zip(&minus).enumerate() {
                if !p.is_finite() || !m.is_finite() {
                    return Err(MmrlError::Oracle {
                        param: name.clone(),
                        entry: e,
                    });
                }
                grads[o].data_mut()[e] = (*p - *m) / two_eps;
            }
        }
        for (o, g) in grads.into_iter().enumerate() {
            out[o].push((name.clone(), g));
        }
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}
