//! Numerical gradient verification against central differences.

use super::{backward, Tensor};
use crate::error::Result;
use crate::rng::DetRng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst_coordinate: (usize, usize),
    pub samples_checked: usize,
}

/// Compares the autodiff gradient of `loss_fn` against central differences
/// (f(θ+εe) − f(θ−εe)) / 2ε on `samples` randomly chosen coordinates per
/// parameter. Relative error uses denominator max(|g|, 1e-8). `loss_fn` must
/// be deterministic in the parameter values.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[Tensor],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
{
    for p in params {
        p.clear_grad();
    }
    let loss = loss_fn(params)?;
    backward(&loss)?;
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    for p in params {
        p.clear_grad();
    }

    let mut rng = DetRng::seeded(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: (0, 0),
        samples_checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        let len = p.len();
        if len == 0 {
            continue;
        }
        for _ in 0..samples {
            let ci = rng.below(len);
            let orig = p.values_ref()[ci];
            p.set_value(ci, orig + eps);
            let f_plus = loss_fn(params)?.item();
            p.set_value(ci, orig - eps);
            let f_minus = loss_fn(params)?.item();
            p.set_value(ci, orig);
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let g = grads[pi][ci];
            let rel = (g - fd).abs() / g.abs().max(1e-8);
            report.samples_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coordinate = (pi, ci);
            }
        }
    }
    Ok(report)
}
