//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward evaluation closure, so it stays
//! independent of the backward implementation it is judging.

use super::tape::Tensor;

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares `analytic` gradients against central differences of `eval` at
/// `point`, perturbing one coordinate at a time by `step`.
///
/// Relative error per coordinate is |fd - an| / max(|fd|, |an|); coordinates
/// where both magnitudes fall below 1e-6 are compared absolutely at 1e-8.
pub fn check_gradients(
    eval: &mut dyn FnMut(&[Tensor]) -> f64,
    point: &[Tensor],
    analytic: &[Tensor],
    step: f64,
) -> GradCheckReport {
    assert_eq!(point.len(), analytic.len());
    let point: Vec<Tensor> = point
        .iter()
        .map(|t| t.as_standard_layout().to_owned())
        .collect();
    let analytic: Vec<Tensor> = analytic
        .iter()
        .map(|t| t.as_standard_layout().to_owned())
        .collect();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor> = point.to_vec();
    for ti in 0..point.len() {
        assert_eq!(
            point[ti].shape(),
            analytic[ti].shape(),
            "analytic gradient shape mismatch for tensor {ti}"
        );
        for idx in 0..point[ti].len() {
            let orig = point[ti].as_slice().unwrap()[idx];
            work[ti].as_slice_mut().unwrap()[idx] = orig + step;
            let f_plus = eval(&work);
            work[ti].as_slice_mut().unwrap()[idx] = orig - step;
            let f_minus = eval(&work);
            work[ti].as_slice_mut().unwrap()[idx] = orig;

            let fd = (f_plus - f_minus) / (2.0 * step);
            let an = analytic[ti].as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs());
            let rel = if denom < 1e-6 {
                if (fd - an).abs() < 1e-8 {
                    0.0
                } else {
                    (fd - an).abs()
                }
            } else {
                (fd - an).abs() / denom
            };
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: checked,
    }
}
