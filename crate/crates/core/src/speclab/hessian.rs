//! Dense Hessians by central differences of the loss gradient, and their
//! branch-block structure.

use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::branchnet::BranchedModel;
use crate::export;
use crate::{Dataset, Error, LossSpec, Result};

pub const MAX_HESSIAN_PARAMS: usize = 5000;

/// `1e-4 · max(1, ‖θ‖∞)`.
pub fn default_step(theta: &[f64]) -> f64 {
    1e-4 * theta.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Column `i` is `(g(θ + h·eᵢ) − g(θ − h·eᵢ)) / 2h`; columns are computed in
/// parallel. The result is not symmetrized.
pub fn fd_hessian<G>(theta: &[f64], h: f64, grad: G) -> Result<DMatrix<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let n = theta.len();
    if n > MAX_HESSIAN_PARAMS {
        return Err(Error::TooManyParameters {
            count: n,
            limit: MAX_HESSIAN_PARAMS,
        });
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let columns = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut point = theta.to_vec();
            point[i] = theta[i] + h;
            let plus = grad(&point)?;
            point[i] = theta[i] - h;
            let minus = grad(&point)?;
            if plus.len() != n || minus.len() != n {
                return Err(Error::Shape(format!(
                    "gradient of length {} for {n} parameters",
                    plus.len()
                )));
            }
            let col: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect();
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteHessian { column: i });
            }
            Ok(col)
        })
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<f64> = columns.into_iter().flatten().collect();
    Ok(DMatrix::from_vec(n, n, flat))
}

#[derive(Debug, Clone, Serialize)]
pub struct HessianReport {
    pub h: f64,
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
    pub block_slices: Vec<Range<usize>>,
    /// `‖off-diagonal blocks‖_F / ‖H‖_F`.
    pub off_block_ratio: f64,
    /// Largest off-block entry over the largest entry.
    pub off_block_max_ratio: f64,
    #[serde(skip)]
    pub per_pair_block_norms: DMatrix<f64>,
    /// `‖H − Hᵀ‖_F / ‖H‖_F` before symmetrization.
    pub asymmetry: f64,
}

fn block_of(slices: &[Range<usize>], i: usize) -> usize {
    slices.iter().position(|r| r.contains(&i)).unwrap_or(usize::MAX)
}

impl HessianReport {
    /// Symmetrizes `raw` and fills the block metrics.
    pub fn from_matrix(raw: DMatrix<f64>, block_slices: Vec<Range<usize>>, h: f64) -> Result<Self> {
        let n = raw.nrows();
        if raw.ncols() != n || block_slices.last().map_or(0, |r| r.end) != n {
            return Err(Error::Shape(format!(
                "{}×{} Hessian against blocks covering {}",
                raw.nrows(),
                raw.ncols(),
                block_slices.last().map_or(0, |r| r.end)
            )));
        }
        let total = raw.norm();
        let asymmetry = if total > 0.0 {
            (&raw - raw.transpose()).norm() / total
        } else {
            0.0
        };
        let matrix = (&raw + raw.transpose()) * 0.5;
        let m = block_slices.len();
        let owner: Vec<usize> = (0..n).map(|i| block_of(&block_slices, i)).collect();
        let mut pair_sq = DMatrix::zeros(m, m);
        let (mut max_all, mut max_off) = (0.0f64, 0.0f64);
        for c in 0..n {
            for r in 0..n {
                let v = matrix[(r, c)];
                pair_sq[(owner[r], owner[c])] += v * v;
                max_all = max_all.max(v.abs());
                if owner[r] != owner[c] {
                    max_off = max_off.max(v.abs());
                }
            }
        }
        let per_pair_block_norms = pair_sq.map(f64::sqrt);
        let off_sq: f64 = (0..m)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .filter(|(a, b)| a != b)
            .map(|(a, b)| pair_sq[(a, b)])
            .sum();
        let norm = matrix.norm();
        let ratio = |num: f64, den: f64| if den > 0.0 { (num / den).min(1.0) } else { 0.0 };
        Ok(Self {
            h,
            off_block_ratio: ratio(off_sq.sqrt(), norm),
            off_block_max_ratio: ratio(max_off, max_all),
            matrix,
            block_slices,
            per_pair_block_norms,
            asymmetry,
        })
    }

    /// The sub-Hessian over `indices` (sorted, e.g. first-layer parameters),
    /// with blocks inherited from the full parameter partition.
    pub fn restricted(&self, indices: &[usize]) -> Result<Self> {
        let n = self.matrix.nrows();
        if indices.windows(2).any(|w| w[0] >= w[1]) || indices.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument(
                "restriction indices must be sorted, unique and in range".into(),
            ));
        }
        let sub = DMatrix::from_fn(indices.len(), indices.len(), |r, c| {
            self.matrix[(indices[r], indices[c])]
        });
        let mut slices = Vec::with_capacity(self.block_slices.len());
        let mut start = 0;
        for block in &self.block_slices {
            let count = indices.iter().filter(|i| block.contains(i)).count();
            slices.push(start..start + count);
            start += count;
        }
        Self::from_matrix(sub, slices, self.h)
    }

    pub fn branches(&self) -> usize {
        self.block_slices.len()
    }

    /// Block `(k, l)` as an owned matrix.
    pub fn block(&self, k: usize, l: usize) -> DMatrix<f64> {
        let (rk, rl) = (&self.block_slices[k], &self.block_slices[l]);
        self.matrix.view((rk.start, rl.start), (rk.len(), rl.len())).into_owned()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        export::write_matrix_csv(path, &self.matrix)
    }

    pub fn heatmap_svg(&self, title: &str) -> String {
        export::heatmap_svg(&self.matrix, title)
    }
}

/// Hessian of the mean loss over `data`, with `h` defaulting to
/// [`default_step`].
pub fn hessian(
    model: &BranchedModel,
    loss: &LossSpec,
    data: &Dataset,
    h: Option<f64>,
) -> Result<HessianReport> {
    let theta = model.params().values();
    if theta.len() > MAX_HESSIAN_PARAMS {
        return Err(Error::TooManyParameters {
            count: theta.len(),
            limit: MAX_HESSIAN_PARAMS,
        });
    }
    let h = h.unwrap_or_else(|| default_step(theta));
    let raw = fd_hessian(theta, h, |point| {
        let mut probe = model.clone();
        probe.params_mut().values_mut().copy_from_slice(point);
        Ok(probe.loss_gradient(loss, data)?.gradient.into_entries())
    })?;
    HessianReport::from_matrix(raw, model.params().branch_slices().to_vec(), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branchnet::BranchArch;
    use crate::speclab::cross_block_from_factors;
    use crate::{data, Dataset};
    use proptest::prelude::*;

    #[test]
    fn two_parameter_quadratic() {
        // L = ½(w₁ + w₂ − 1)²
        let grad = |w: &[f64]| {
            let r = w[0] + w[1] - 1.0;
            Ok(vec![r, r])
        };
        let raw = fd_hessian(&[0.3, -0.7], 1e-4, grad).unwrap();
        let report = HessianReport::from_matrix(raw, vec![0..1, 1..2], 1e-4).unwrap();
        for v in report.matrix.iter() {
            assert!((v - 1.0).abs() < 1e-6);
        }
        assert!((report.off_block_ratio - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((report.off_block_max_ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_branches_give_all_ones() {
        let arch = BranchArch::scalar_perceptron().with_alpha(1.0);
        let model = BranchedModel::from_params(arch, 2, 0, vec![0.2, -0.1, 0.4, 0.3]).unwrap();
        let data = Dataset::scalar(&[1.0], &[1.0]).unwrap();
        let report = hessian(&model, &LossSpec::SquaredL2, &data, None).unwrap();
        for v in report.matrix.iter() {
            assert!((v - 1.0).abs() < 1e-6, "{}", report.matrix);
        }
        assert!((report.off_block_ratio - 0.5f64.sqrt()).abs() < 1e-6);
        assert_eq!(report.per_pair_block_norms.shape(), (2, 2));
    }

    #[test]
    fn saturated_branch_decouples() {
        let arch = BranchArch::scalar_perceptron().with_alpha(0.0);
        let model =
            BranchedModel::from_params(arch, 2, 0, vec![-5.0, -5.0, 0.7, 0.1]).unwrap();
        let data = Dataset::scalar(&[0.5, 1.0, 2.0], &[1.0, 0.0, 2.0]).unwrap();
        let report = hessian(&model, &LossSpec::SquaredL2, &data, None).unwrap();
        let tol = 10.0 * report.h * report.h;
        assert!(report.block(0, 1).iter().all(|v| v.abs() <= tol));
        assert!(report.block(1, 0).iter().all(|v| v.abs() <= tol));
        assert!(report.block(0, 0).iter().all(|v| v.abs() <= tol));
        assert!(report.block(1, 1).norm() > 0.1);
        assert!(report.off_block_ratio <= tol);
    }

    #[test]
    fn cross_blocks_match_factor_assembly() {
        let data = data::toy2();
        for seed in 0..4 {
            let model = BranchedModel::init(BranchArch::scalar_perceptron(), 3, seed).unwrap();
            let report = hessian(&model, &LossSpec::SquaredL2, &data, None).unwrap();
            for (k, l) in [(0, 1), (1, 2), (2, 0)] {
                let expected =
                    cross_block_from_factors(&model, &LossSpec::SquaredL2, &data, k, l).unwrap();
                assert!((report.block(k, l) - expected).amax() < 1e-6);
            }
        }
    }

    #[test]
    fn classifier_cross_blocks_match_factor_assembly() {
        let arch = BranchArch::mlp(&[2, 3, 3]).with_clamp(true);
        let spec = LossSpec::ClampedCrossEntropy { classes: 3 };
        let data = Dataset::new(
            vec![
                crate::Sample::new(vec![0.2, -0.1]),
                crate::Sample::new(vec![-0.3, 0.4]),
            ],
            vec![crate::Target::Class(0), crate::Target::Class(2)],
        )
        .unwrap();
        let model = BranchedModel::init(arch, 2, 5).unwrap();
        let report = hessian(&model, &spec, &data, None).unwrap();
        let expected = cross_block_from_factors(&model, &spec, &data, 0, 1).unwrap();
        assert!((report.block(0, 1) - expected).amax() < 1e-6);
        assert!(report.asymmetry < 1e-4);
    }

    #[test]
    fn guard_and_step_errors() {
        let theta = vec![0.0; MAX_HESSIAN_PARAMS + 1];
        assert!(matches!(
            fd_hessian(&theta, 1e-4, |t| Ok(t.to_vec())),
            Err(Error::TooManyParameters { .. })
        ));
        assert!(fd_hessian(&[1.0], 0.0, |t| Ok(t.to_vec())).is_err());
        assert!(matches!(
            fd_hessian(&[1.0, 2.0], 1e-3, |t| Ok(vec![t[0], f64::NAN])),
            Err(Error::NonFiniteHessian { .. })
        ));
        assert_eq!(default_step(&[0.5, -3.0]), 1e-4 * 3.0);
        assert_eq!(default_step(&[0.5]), 1e-4);
    }

    #[test]
    fn restriction_keeps_block_layout() {
        let raw = DMatrix::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let report = HessianReport::from_matrix(raw, vec![0..2, 2..4], 1e-4).unwrap();
        let sub = report.restricted(&[0, 2]).unwrap();
        assert_eq!(sub.block_slices, vec![0..1, 1..2]);
        assert_eq!(sub.matrix[(0, 1)], report.matrix[(0, 2)]);
        assert!(report.restricted(&[2, 0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn report_is_symmetric_and_ratio_bounded(seed in any::<u64>()) {
            let model = BranchedModel::init(BranchArch::scalar_perceptron(), 3, seed).unwrap();
            let report = hessian(&model, &LossSpec::SquaredL2, &data::toy1(), None).unwrap();
            prop_assert_eq!(&report.matrix, &report.matrix.transpose());
            prop_assert!(report.asymmetry < 1e-4);
            prop_assert!((0.0..=1.0).contains(&report.off_block_ratio));
        }

        #[test]
        fn permutation_permutes_blocks(seed in any::<u64>()) {
            let model = BranchedModel::init(BranchArch::scalar_perceptron(), 3, seed).unwrap();
            let perm = [2, 0, 1];
            let permuted = model.permute_branches(&perm).unwrap();
            let data = data::toy2();
            let a = hessian(&model, &LossSpec::SquaredL2, &data, None).unwrap();
            let b = hessian(&permuted, &LossSpec::SquaredL2, &data, None).unwrap();
            for k in 0..3 {
                for l in 0..3 {
                    prop_assert!((b.block(k, l) - a.block(perm[k], perm[l])).amax() < 1e-9);
                    prop_assert!((b.per_pair_block_norms[(k, l)] - a.per_pair_block_norms[(perm[k], perm[l])]).abs() < 1e-9);
                }
            }
            prop_assert!((a.off_block_ratio - b.off_block_ratio).abs() < 1e-12);
        }
    }
}
