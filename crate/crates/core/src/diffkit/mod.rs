//! First-order reverse-mode differentiation and finite-difference oracles.

mod fd;
mod tape;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use fd::{central_difference, finite_diff_gradient};
pub use tape::{
    clamp_derivative, leaky_relu, leaky_relu_derivative, softmax, NodeId, Tape,
};

/// Gradient aligned index-for-index with a parameter vector, plus the branch
/// partition of that vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    entries: Vec<f64>,
    branch_slices: Vec<Range<usize>>,
}

impl GradientVector {
    /// Fails unless `branch_slices` partition `0..entries.len()` in order.
    pub fn new(entries: Vec<f64>, branch_slices: Vec<Range<usize>>) -> Result<Self> {
        check_partition(&branch_slices, entries.len())?;
        Ok(Self {
            entries,
            branch_slices,
        })
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.entries
    }

    pub fn branch_slices(&self) -> &[Range<usize>] {
        &self.branch_slices
    }

    pub fn branch(&self, k: usize) -> &[f64] {
        &self.entries[self.branch_slices[k].clone()]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Largest `|a - b| / max(|a|, |b|, floor)` over all entries.
    pub fn max_relative_error(&self, other: &GradientVector, floor: f64) -> f64 {
        max_relative_error(&self.entries, &other.entries, floor)
    }
}

pub(crate) fn check_partition(slices: &[Range<usize>], total: usize) -> Result<()> {
    let mut next = 0;
    for s in slices {
        if s.start != next || s.end < s.start {
            return Err(Error::Shape(format!(
                "branch slices do not partition 0..{total}"
            )));
        }
        next = s.end;
    }
    if next != total {
        return Err(Error::Shape(format!(
            "branch slices cover 0..{next}, expected 0..{total}"
        )));
    }
    Ok(())
}

pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Sum whose result does not depend on the order of `values`.
///
/// The buffer is sorted in place before accumulation, so any permutation of
/// the same multiset yields bit-identical output.
pub fn order_independent_sum(values: &mut [f64]) -> f64 {
    if values.len() > 2 {
        values.sort_unstable_by(f64::total_cmp);
    }
    values.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_checked() {
        assert!(GradientVector::new(vec![0.0; 4], vec![0..2, 2..4]).is_ok());
        assert!(GradientVector::new(vec![0.0; 4], vec![0..2, 3..4]).is_err());
        assert!(GradientVector::new(vec![0.0; 4], vec![0..2, 1..4]).is_err());
        assert!(GradientVector::new(vec![0.0; 4], vec![0..3]).is_err());
    }

    #[test]
    fn two_element_sum_is_commutative_without_sorting() {
        let mut a = [0.1, 0.2];
        let mut b = [0.2, 0.1];
        assert_eq!(
            order_independent_sum(&mut a).to_bits(),
            order_independent_sum(&mut b).to_bits()
        );
    }
}
