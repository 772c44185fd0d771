//! Central finite-difference gradient checking.
//!
//! Used by the `selftest` subcommand and by the acceptance suite. The
//! finite-difference side never touches the reverse-mode path: it re-runs
//! the forward closure on perturbed copies of the inputs.

use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of one gradient comparison sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative disagreement with a floor so that near-zero pairs compare
/// absolutely instead of blowing up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare reverse-mode gradients of `forward(inputs)` against central
/// differences for every element of every input.
///
/// `forward` must build a scalar from the given leaves alone. Step size is
/// h = 1e-5 * (1 + |x|) per element.
pub fn check_gradients<F>(inputs: &[Tensor], forward: F) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |ei| (ti, ei)))
        .collect();
    check_gradients_at(inputs, forward, &coords)
}

/// Same as [`check_gradients`] but probing only the given
/// (input index, element index) coordinates. Useful for large models where
/// exhaustive probing is wasteful.
pub fn check_gradients_at<F>(
    inputs: &[Tensor],
    forward: F,
    coords: &[(usize, usize)],
) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    let loss = forward(&leaves)?;
    loss.backward()?;
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut max_rel: f64 = 0.0;
    for &(ti, ei) in coords {
        let x = inputs[ti].data()[ei];
        let h = 1e-5 * (1.0 + x.abs());
        let f_plus = eval_perturbed(inputs, &forward, ti, ei, x + h)?;
        let f_minus = eval_perturbed(inputs, &forward, ti, ei, x - h)?;
        let fd = (f_plus - f_minus) / (2.0 * h);
        let ad = grads[ti][ei];
        let err = rel_err(ad, fd);
        if err > max_rel {
            max_rel = err;
        }
    }
    Ok(GradCheck {
        checked: coords.len(),
        max_rel_err: max_rel,
    })
}

fn eval_perturbed<F>(
    inputs: &[Tensor],
    forward: &F,
    ti: usize,
    ei: usize,
    value: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let probes: Vec<Tensor> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i == ti {
                let mut data = t.data().to_vec();
                data[ei] = value;
                Tensor::from_vec(t.shape(), data)
            } else {
                Ok(t.clone())
            }
        })
        .collect::<Result<_>>()?;
    forward(&probes)?.item()
}

/// Deterministic dense scalar readout: sum(out * weights) with fixed
/// pseudo-random weights, so every output element influences the loss.
pub fn weighted_readout(out: &Tensor, salt: u64) -> Result<Tensor> {
    let n = out.len();
    let mut w = Vec::with_capacity(n);
    let mut state = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    for _ in 0..n {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        // values in [-1, 1), away from zero often enough
        w.push((state >> 11) as f64 / (1u64 << 52) as f64 - 1.0);
    }
    let weights = Tensor::from_vec(out.shape(), w)?;
    Ok(out.mul(&weights)?.sum())
}
