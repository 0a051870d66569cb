use nalgebra::DMatrix;

use crate::branchnet::{BranchOutputs, BranchedModel};
use crate::{Error, Result, Sample};

/// Relative norm threshold separating active from silent branches.
pub const DEFAULT_ACTIVE_FRACTION: f64 = 0.10;

/// Branch responses over a dataset: row `i` holds `vᵢ(xⱼ)` for every sample
/// `j`, with vector outputs flattened sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    pub f: DMatrix<f64>,
    pub branch_norms: Vec<f64>,
}

impl ResponseMatrix {
    pub fn from_outputs(outputs: &BranchOutputs) -> Self {
        let width = outputs.samples * outputs.dim;
        let f = DMatrix::from_row_slice(outputs.branches, width, outputs.as_slice());
        Self::from_matrix(f)
    }

    pub fn from_matrix(f: DMatrix<f64>) -> Self {
        let branch_norms = f.row_iter().map(|r| r.norm()).collect();
        Self { f, branch_norms }
    }

    pub fn branches(&self) -> usize {
        self.f.nrows()
    }
}

pub fn response_matrix(model: &BranchedModel, samples: &[Sample]) -> Result<ResponseMatrix> {
    Ok(ResponseMatrix::from_outputs(&model.forward_all(samples)?))
}

/// Uncentered branch covariance `F·Fᵀ`.
pub fn covariance(f: &ResponseMatrix) -> DMatrix<f64> {
    &f.f * f.f.transpose()
}

/// Statistical covariance of the rows after removing each row's mean.
pub fn centered_covariance(f: &ResponseMatrix) -> DMatrix<f64> {
    let mut centered = f.f.clone();
    let n = centered.ncols().max(1) as f64;
    for mut row in centered.row_iter_mut() {
        let mean = row.sum() / n;
        row.add_scalar_mut(-mean);
    }
    &centered * centered.transpose() / n
}

/// `Cᵢⱼ / √(Cᵢᵢ Cⱼⱼ)`, with rows of zero variance mapped to zero.
pub fn correlation(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d: Vec<f64> = (0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
        let s = d[i] * d[j];
        if s > 0.0 {
            cov[(i, j)] / s
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSplit {
    pub active: Vec<usize>,
    pub silent: Vec<usize>,
}

/// Branch `i` is active iff `‖Fᵢ‖ ≥ frac · maxₗ ‖Fₗ‖`.
///
/// An all-zero response marks every branch silent.
pub fn active_branches(f: &ResponseMatrix, frac: f64) -> Result<ActiveSplit> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "active threshold fraction must lie in (0, 1), got {frac}"
        )));
    }
    let max = f.branch_norms.iter().copied().fold(0.0, f64::max);
    let (active, silent) = (0..f.branches())
        .partition(|&i| max > 0.0 && f.branch_norms[i] >= frac * max);
    Ok(ActiveSplit { active, silent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branchnet::BranchArch;
    use crate::data;
    use proptest::prelude::*;

    fn rm(rows: usize, cols: usize, v: &[f64]) -> ResponseMatrix {
        ResponseMatrix::from_matrix(DMatrix::from_row_slice(rows, cols, v))
    }

    #[test]
    fn zero_model_has_zero_response() {
        let model =
            BranchedModel::from_params(BranchArch::scalar_perceptron(), 3, 0, vec![0.0; 6]).unwrap();
        let f = response_matrix(&model, &data::toy1().samples).unwrap();
        assert!(f.f.iter().all(|&v| v == 0.0));
        let split = active_branches(&f, DEFAULT_ACTIVE_FRACTION).unwrap();
        assert!(split.active.is_empty());
        assert_eq!(split.silent, vec![0, 1, 2]);
    }

    #[test]
    fn hand_evaluated_toy1_rows() {
        let model = BranchedModel::from_params(
            BranchArch::scalar_perceptron(),
            2,
            0,
            vec![1.0, 0.0, -1.0, 0.0],
        )
        .unwrap();
        let f = response_matrix(&model, &data::toy1().samples).unwrap();
        assert_eq!(f.f.row(0).iter().copied().collect::<Vec<_>>(), vec![-0.01, 0.0, 0.0, 1.0]);
        assert_eq!(f.f.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, -0.01]);
    }

    #[test]
    fn covariance_cases() {
        assert_eq!(covariance(&rm(2, 2, &[1.0, 0.0, 0.0, 1.0])), DMatrix::identity(2, 2));
        let c = covariance(&rm(2, 3, &[1.0, 0.0, 2.0, 0.0, 5.0, 0.0]));
        assert_eq!(c[(0, 1)], 0.0);
        assert_eq!(c[(1, 0)], 0.0);
        let c = covariance(&rm(3, 2, &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0]));
        assert_eq!(c[(0, 0)], c[(2, 2)]);
        assert_eq!(c[(0, 0)], c[(0, 2)]);
    }

    #[test]
    fn active_split_cases() {
        let f = rm(3, 1, &[10.0, 0.5, 2.0]);
        let split = active_branches(&f, 0.10).unwrap();
        assert_eq!(split.active, vec![0, 2]);
        assert_eq!(split.silent, vec![1]);
        assert_eq!(active_branches(&rm(1, 1, &[0.3]), 0.1).unwrap().active, vec![0]);
        let ones = rm(3, 1, &[1.0, 1.0, 1.0]);
        assert_eq!(active_branches(&ones, 0.99).unwrap().active, vec![0, 1, 2]);
        assert!(active_branches(&ones, 0.0).is_err());
        assert!(active_branches(&ones, 1.0).is_err());
    }

    #[test]
    fn correlation_has_unit_diagonal() {
        let f = rm(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let r = correlation(&covariance(&f));
        assert!((r[(0, 0)] - 1.0).abs() < 1e-15 && (r[(1, 1)] - 1.0).abs() < 1e-15);
        let cc = centered_covariance(&f);
        assert!((cc[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_psd(v in prop::collection::vec(-10.0..10.0f64, 12)) {
            let c = covariance(&rm(4, 3, &v));
            prop_assert_eq!(&c, &c.transpose());
            let eig = c.clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10 * (1.0 + c.norm())));
        }

        #[test]
        fn active_set_is_scale_covariant(v in prop::collection::vec(-10.0..10.0f64, 12), scale in 1e-3..1e3f64) {
            let f = rm(4, 3, &v);
            let scaled = ResponseMatrix::from_matrix(&f.f * scale);
            prop_assert_eq!(active_branches(&f, 0.1).unwrap(), active_branches(&scaled, 0.1).unwrap());
        }

        #[test]
        fn permuting_branches_permutes_covariance(seed in any::<u64>()) {
            let model = BranchedModel::init(BranchArch::scalar_perceptron(), 4, seed).unwrap();
            let perm = [2, 0, 3, 1];
            let permuted = model.permute_branches(&perm).unwrap();
            let samples = data::toy2().samples;
            let c = covariance(&response_matrix(&model, &samples).unwrap());
            let cp = covariance(&response_matrix(&permuted, &samples).unwrap());
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert_eq!(cp[(i, j)], c[(perm[i], perm[j])]);
                }
            }
        }
    }
}
