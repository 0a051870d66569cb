//! Distributive × collaborative factorization of per-sample gradients.
//!
//! For a sum-aggregated model the loss gradient restricted to branch `k` is
//! `(∇_θₖ vₖ)ᵀ · dL/df`: a branch-local Jacobian times a factor shared by all
//! branches. With an output clamp the shared factor is `dL/df` masked by the
//! clamp derivative of the pre-clamp sum.

use nalgebra::{DMatrix, DVector};

use crate::branchnet::BranchedModel;
use crate::diffkit::{clamp_derivative, GradientVector};
use crate::losses::{self, LossSpec};
use crate::{Dataset, Error, Result, Sample, Target};

const ASSEMBLY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FactorizedGradient {
    /// `dL/df` at the (clamped) output.
    pub loss_gradient: Vec<f64>,
    /// Collaborative factor: `dL/df` times the clamp mask.
    pub collab: Vec<f64>,
    /// Per branch, the `C × |θₖ|` Jacobian of `vₖ`.
    pub dist: Vec<DMatrix<f64>>,
    /// Per branch, `distᵀ · collab`.
    pub assembled: Vec<Vec<f64>>,
    /// Gradient of the single-sample loss recorded end to end on a tape.
    pub direct: GradientVector,
}

impl FactorizedGradient {
    pub fn max_assembly_error(&self) -> f64 {
        self.assembled
            .iter()
            .enumerate()
            .flat_map(|(k, a)| {
                a.iter()
                    .zip(self.direct.branch(k))
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// `C × |θₖ|` Jacobian of branch `k`, one backward pass per output coordinate
/// through a tape holding branch `k` alone.
pub fn branch_jacobian(model: &BranchedModel, k: usize, sample: &Sample) -> Result<DMatrix<f64>> {
    let mut tape = model.new_tape();
    let v = model.record_branch(&mut tape, k, sample)?;
    let dim = tape.value(v)?.len();
    let range = model.params().branch_slices()[k].clone();
    let mut jac = DMatrix::zeros(dim, range.len());
    for c in 0..dim {
        let comp = tape.component(v, c)?;
        let g = tape.backward(comp)?;
        for (col, val) in g.branch(k).iter().enumerate() {
            jac[(c, col)] = *val;
        }
    }
    Ok(jac)
}

fn clamp_mask(model: &BranchedModel, pre: &[f64]) -> Vec<f64> {
    pre.iter()
        .map(|&p| {
            if model.arch().output_clamp {
                clamp_derivative(p, crate::branchnet::CLAMP_LO, crate::branchnet::CLAMP_HI)
            } else {
                1.0
            }
        })
        .collect()
}

pub fn factorize_gradient(
    model: &BranchedModel,
    loss: &LossSpec,
    sample: &Sample,
    target: &Target,
) -> Result<FactorizedGradient> {
    let (pre, f) = model.forward_parts(sample)?;
    let loss_gradient = losses::collaborative_gradient(loss, &f, target)?;
    let mask = clamp_mask(model, &pre);
    let collab: Vec<f64> = loss_gradient.iter().zip(&mask).map(|(g, m)| g * m).collect();
    let collab_vec = DVector::from_column_slice(&collab);

    let mut dist = Vec::with_capacity(model.branch_count());
    let mut assembled = Vec::with_capacity(model.branch_count());
    for k in 0..model.branch_count() {
        let jac = branch_jacobian(model, k, sample)?;
        assembled.push((jac.transpose() * &collab_vec).iter().copied().collect());
        dist.push(jac);
    }

    let mut tape = model.new_tape();
    let out = model.record_forward(&mut tape, sample)?;
    let l = losses::record_loss(&mut tape, loss, out, target)?;
    let direct = tape.backward(l)?;

    let result = FactorizedGradient {
        loss_gradient,
        collab,
        dist,
        assembled,
        direct,
    };
    let err = result.max_assembly_error();
    if !(err <= ASSEMBLY_TOLERANCE) {
        return Err(Error::Inconsistent(format!(
            "factorized gradient deviates from the direct gradient by {err:e}"
        )));
    }
    Ok(result)
}

/// Inter-branch Hessian block `(k, l)` of the mean loss assembled from
/// factors: `meanₓ Jₖᵀ · diag(mask) · d²L/df² · diag(mask) · Jₗ`.
///
/// For `k ≠ l` this is the distributive factor of branch `k` times the
/// derivative of the collaborative factor w.r.t. `θₗ`; it is exact wherever
/// the clamp mask is locally constant.
pub fn cross_block_from_factors(
    model: &BranchedModel,
    loss: &LossSpec,
    data: &Dataset,
    k: usize,
    l: usize,
) -> Result<DMatrix<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let rows = model.params().branch_slices()[k].len();
    let cols = model.params().branch_slices()[l].len();
    let mut block = DMatrix::zeros(rows, cols);
    for (sample, _) in data.iter() {
        let (pre, f) = model.forward_parts(sample)?;
        let mask = DMatrix::from_diagonal(&DVector::from_vec(clamp_mask(model, &pre)));
        let c = f.len();
        let curvature = DMatrix::from_row_slice(c, c, &losses::output_curvature(loss, &f));
        let jk = branch_jacobian(model, k, sample)?;
        let jl = branch_jacobian(model, l, sample)?;
        block += jk.transpose() * &mask * curvature * &mask * jl;
    }
    Ok(block / data.len() as f64)
}
