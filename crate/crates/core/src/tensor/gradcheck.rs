use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{contract, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `eval(params, want_grad)` returns the loss and, when `want_grad` is set,
/// one gradient tensor per parameter. It must be deterministic. At most
/// `max_coords` coordinates per parameter are probed (chosen with `seed`);
/// `None` probes all of them. The per-coordinate error is
/// `|a - d| / max(|a|, |d|, 1e-6)`; the floor keeps round-off on
/// gradients that are exactly zero (such as attention key biases) from
/// dominating.
pub fn finite_diff_check<F>(
    params: &[Tensor],
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
    mut eval: F,
) -> Result<GradCheck>
where
    F: FnMut(&[Tensor], bool) -> Result<(f64, Option<Vec<Tensor>>)>,
{
    if !(h > 0.0) {
        return Err(contract("finite_diff_check: step must be positive"));
    }
    let (_, grads) = eval(params, true)?;
    let grads = grads.ok_or_else(|| contract("finite_diff_check: no analytic gradient"))?;
    if grads.len() != params.len() {
        return Err(contract(
            "finite_diff_check: one gradient per parameter expected",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    for (pi, (param, grad)) in params.iter().zip(&grads).enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let x0 = param.data()[c];
            probe[pi].data_mut()[c] = x0 + h;
            let (up, _) = eval(&probe, false)?;
            probe[pi].data_mut()[c] = x0 - h;
            let (down, _) = eval(&probe, false)?;
            probe[pi].data_mut()[c] = x0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.data()[c];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let err = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, c);
            }
        }
    }
    Ok(report)
}
