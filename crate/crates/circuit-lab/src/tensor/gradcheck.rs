//! Central-difference gradient verification.
//!
//! [`check_gradients`] rebuilds a user-supplied scalar computation with each
//! input coordinate perturbed by ±eps and compares the resulting numeric
//! derivative against the analytic gradient from one backward pass. The
//! relative error uses a floored denominator,
//! `|a − n| / max(|a|, |n|, floor)`, so coordinates whose true gradient is
//! near zero are judged on absolute error instead of an explosive ratio.

use super::{Dtype, Graph, Scalar, Tensor, TensorId};
use crate::error::{Error, Result};

/// Tolerances for a gradient check. `eps` is the perturbation step, `floor`
/// the denominator floor described at the module level, and `threshold` the
/// largest acceptable relative error.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub eps: f64,
    pub floor: f64,
    pub threshold: f64,
}

impl GradCheckSettings {
    /// Defaults tuned per element type. The 32-bit settings are loose
    /// because central differences lose roughly half the significand to
    /// cancellation at f32 precision.
    pub fn for_dtype(dtype: Dtype) -> Self {
        match dtype {
            Dtype::F64 => GradCheckSettings { eps: 1e-5, floor: 1e-4, threshold: 1e-5 },
            Dtype::F32 => GradCheckSettings { eps: 1e-2, floor: 1e-1, threshold: 1e-3 },
        }
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest floored relative error over every coordinate checked.
    pub max_rel_error: f64,
    /// Input label and flat coordinate where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Total coordinates compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, settings: &GradCheckSettings) -> bool {
        self.max_rel_error <= settings.threshold
    }
}

/// Compare analytic gradients of `build` against central differences for
/// every coordinate of every input.
///
/// `build` must construct a scalar output from the leaves it is handed, in
/// the same order as `inputs`; it is invoked `2·N + 1` times for N total
/// input coordinates, so keep fixtures small. Inputs are gradient-tracked
/// regardless of their `requires_grad` flag.
pub fn check_gradients<T, F>(
    inputs: &[(&str, Tensor<T>)],
    build: F,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[TensorId]) -> Result<TensorId>,
{
    let eval = |tensors: &[Tensor<T>], want_grads: bool| -> Result<(f64, Vec<Vec<T>>)> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &ids)?;
        if g.shape(out) != [1] {
            return Err(Error::Contract(format!(
                "gradient check requires a scalar output, got shape {:?}",
                g.shape(out)
            )));
        }
        let value = g.data(out)[0].to_f64();
        if !value.is_finite() {
            return Err(Error::Numeric("gradient check output".into()));
        }
        let grads = if want_grads {
            g.backward(out)?;
            ids.iter()
                .enumerate()
                .map(|(i, &id)| {
                    g.grad(id)
                        .map(<[T]>::to_vec)
                        .unwrap_or_else(|| vec![T::ZERO; tensors[i].numel()])
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let mut tensors: Vec<Tensor<T>> = inputs
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.requires_grad = true;
            t
        })
        .collect();

    let (_, analytic) = eval(&tensors, true)?;

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;
    for ti in 0..tensors.len() {
        for ci in 0..tensors[ti].numel() {
            let original = tensors[ti].data()[ci];
            let step = T::from_f64(settings.eps);

            tensors[ti].data_mut()[ci] = original + step;
            let (up, _) = eval(&tensors, false)?;
            tensors[ti].data_mut()[ci] = original - step;
            let (down, _) = eval(&tensors, false)?;
            tensors[ti].data_mut()[ci] = original;

            // The numeric step uses the actually-realized perturbation, which
            // can differ from eps after rounding at low precision.
            let realized = (original + step).to_f64() - (original - step).to_f64();
            let numeric = (up - down) / realized;
            let a = analytic[ti][ci].to_f64();
            let denom = a.abs().max(numeric.abs()).max(settings.floor);
            let rel = (a - numeric).abs() / denom;
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = Some((inputs[ti].0.to_string(), ci));
            }
        }
    }

    Ok(GradCheckReport { max_rel_error: max_rel, worst, checked })
}
