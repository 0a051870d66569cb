//! Central finite differences, used as the independent oracle for AD.

use super::GradientVector;
use crate::branchnet::BranchedModel;
use crate::{Dataset, Error, LossSpec, Result};

/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn central_difference(
    theta: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut point = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point)?;
        point[i] = orig - h;
        let minus = f(&point)?;
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteAtCoordinate { coordinate: i });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference gradient of the mean batch loss.
pub fn finite_diff_gradient(
    model: &BranchedModel,
    loss: &LossSpec,
    batch: &Dataset,
    h: f64,
) -> Result<GradientVector> {
    if model.params().values().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("model parameters are not finite".into()));
    }
    let mut probe = model.clone();
    let entries = central_difference(model.params().values(), h, |theta| {
        probe.params_mut().values_mut().copy_from_slice(theta);
        probe.mean_loss(loss, batch)
    })?;
    GradientVector::new(entries, model.params().branch_slices().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branchnet::{BranchArch, BranchKind};
    use crate::data;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let g = central_difference(&[0.0], 1e-5, |w| Ok(0.5 * (w[0] - 1.0).powi(2))).unwrap();
        assert!((g[0] + 1.0).abs() < 1e-9, "{}", g[0]);
    }

    #[test]
    fn zero_step_rejected() {
        let err = central_difference(&[0.0], 0.0, |w| Ok(w[0])).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let err = central_difference(&[1.0, 0.0], 1e-3, |w| {
            Ok(if w[1] > 0.0 { f64::INFINITY } else { w[0] })
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteAtCoordinate { coordinate: 1 }));
    }

    #[test]
    fn toy1_single_branch_matches_backward() {
        let arch = BranchArch::new(BranchKind::ScalarPerceptron);
        let data = data::toy1();
        for seed in 0..20 {
            let model = BranchedModel::init(arch.clone(), 1, seed).unwrap();
            let fd = finite_diff_gradient(&model, &LossSpec::SquaredL2, &data, 1e-6).unwrap();
            let (_, ad) = model.tape_loss_gradient(&LossSpec::SquaredL2, &data).unwrap();
            assert!(fd.max_relative_error(&ad, 1e-3) < 1e-6, "seed {seed}");
        }
    }
}
