//! Column structure of the distributive factor near equilibrium.
//!
//! For each branch and sample the columns of `D_dist` are split into zero
//! columns and the rest; for the rest the cosine with `D_collab` is recorded.

use serde::Serialize;

use super::factor::factorize_gradient;
use crate::branchnet::BranchedModel;
use crate::{Dataset, LossSpec, Result};

const PERFECT_FIT: f64 = 1e-12;
const ZERO_COLUMN: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumRecord {
    pub branch: usize,
    pub sample: usize,
    pub perfect_fit: bool,
    pub zero_column_fraction: f64,
    pub nonzero_columns: usize,
    /// Mean `|cos|` between non-zero columns and `D_collab`; absent when
    /// `C = 1`, on a perfect fit, or with no non-zero columns.
    pub mean_abs_cosine: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumReport {
    pub records: Vec<EquilibriumRecord>,
    pub perfect_fit_samples: usize,
    pub mean_zero_column_fraction: f64,
    pub mean_abs_cosine: Option<f64>,
}

pub fn equilibrium_diagnostic(
    model: &BranchedModel,
    loss: &LossSpec,
    data: &Dataset,
) -> Result<EquilibriumReport> {
    let mut records = Vec::new();
    let mut perfect_fit_samples = 0;
    for (j, (sample, target)) in data.iter().enumerate() {
        let fg = factorize_gradient(model, loss, sample, target)?;
        let collab_norm = fg.collab.iter().map(|v| v * v).sum::<f64>().sqrt();
        let perfect_fit = collab_norm <= PERFECT_FIT;
        perfect_fit_samples += perfect_fit as usize;
        for (k, dist) in fg.dist.iter().enumerate() {
            let norms: Vec<f64> = dist.column_iter().map(|c| c.norm()).collect();
            let max = norms.iter().copied().fold(0.0, f64::max);
            let nonzero: Vec<usize> = (0..norms.len())
                .filter(|&i| max > 0.0 && norms[i] >= ZERO_COLUMN * max)
                .collect();
            let zero_column_fraction = if norms.is_empty() {
                0.0
            } else {
                1.0 - nonzero.len() as f64 / norms.len() as f64
            };
            let mean_abs_cosine = if dist.nrows() < 2 || perfect_fit || nonzero.is_empty() {
                None
            } else {
                let total: f64 = nonzero
                    .iter()
                    .map(|&i| {
                        let dot: f64 = dist.column(i).iter().zip(&fg.collab).map(|(a, b)| a * b).sum();
                        (dot / (norms[i] * collab_norm)).abs()
                    })
                    .sum();
                Some(total / nonzero.len() as f64)
            };
            records.push(EquilibriumRecord {
                branch: k,
                sample: j,
                perfect_fit,
                zero_column_fraction,
                nonzero_columns: nonzero.len(),
                mean_abs_cosine,
            });
        }
    }
    let n = records.len().max(1) as f64;
    let mean_zero_column_fraction = records.iter().map(|r| r.zero_column_fraction).sum::<f64>() / n;
    let cosines: Vec<f64> = records.iter().filter_map(|r| r.mean_abs_cosine).collect();
    let mean_abs_cosine =
        (!cosines.is_empty()).then(|| cosines.iter().sum::<f64>() / cosines.len() as f64);
    Ok(EquilibriumReport {
        records,
        perfect_fit_samples,
        mean_zero_column_fraction,
        mean_abs_cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branchnet::BranchArch;
    use crate::{Sample, Target};

    #[test]
    fn perfect_fit_is_flagged() {
        let model = BranchedModel::from_params(
            BranchArch::scalar_perceptron(),
            2,
            0,
            vec![0.5, 1.0, 0.5, 0.0],
        )
        .unwrap();
        let data = Dataset::scalar(&[2.0], &[3.0]).unwrap();
        let report = equilibrium_diagnostic(&model, &LossSpec::SquaredL2, &data).unwrap();
        assert_eq!(report.perfect_fit_samples, 1);
        assert!(report.records.iter().all(|r| r.perfect_fit && r.mean_abs_cosine.is_none()));
    }

    #[test]
    fn scalar_output_reports_zero_columns_only() {
        // branch 0 has x = 0 so its weight column is zero
        let model = BranchedModel::from_params(
            BranchArch::scalar_perceptron(),
            1,
            0,
            vec![1.0, 0.5],
        )
        .unwrap();
        let data = Dataset::scalar(&[0.0], &[2.0]).unwrap();
        let report = equilibrium_diagnostic(&model, &LossSpec::SquaredL2, &data).unwrap();
        let r = &report.records[0];
        assert_eq!(r.zero_column_fraction, 0.5);
        assert_eq!(r.nonzero_columns, 1);
        assert!(r.mean_abs_cosine.is_none());
    }

    #[test]
    fn random_classifier_reports_finite_values() {
        let arch = BranchArch::mlp(&[2, 5, 3]).with_clamp(true);
        let model = BranchedModel::init(arch, 4, 11).unwrap();
        let data = Dataset::new(
            vec![Sample::new(vec![0.3, 0.1]), Sample::new(vec![-0.5, 0.8])],
            vec![Target::Class(0), Target::Class(2)],
        )
        .unwrap();
        let spec = LossSpec::ClampedCrossEntropy { classes: 3 };
        let report = equilibrium_diagnostic(&model, &spec, &data).unwrap();
        assert_eq!(report.records.len(), 8);
        let c = report.mean_abs_cosine.unwrap();
        assert!(c.is_finite() && (0.0..=1.0 + 1e-12).contains(&c));
        assert!(report.mean_zero_column_fraction.is_finite());
    }
}
